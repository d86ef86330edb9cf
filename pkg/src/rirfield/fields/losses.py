"""Training losses for the acoustic fields (torch, differentiable)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from ..signal import Spectrogram, StftConfig

MULTIRES_FFT = (128, 512, 1024, 2048)
MULTIRES_WIN = (80, 240, 600, 1200)
MULTIRES_HOP = (16, 50, 120, 240)
LOG_EPS = 1e-6      # additive floor inside log-magnitudes
POWER_FLOOR = 1e-14  # keeps sqrt differentiable at exactly zero
DECAY_TAIL_FLOOR = 1e-10  # relative to the item's total energy
DEFAULT_LAMBDA = {"naf": 0.0, "naf++": 1.0, "inras": 0.0, "inras++": 2.0}
KINDS = tuple(DEFAULT_LAMBDA)


class FloorWarning(UserWarning):
    pass


def default_multires() -> list[tuple[int, int, int]]:
    return list(zip(MULTIRES_FFT, MULTIRES_WIN, MULTIRES_HOP))


@dataclass
class LossConfig:
    kind: str = "inras++"
    lam: float | None = None
    multires: list = field(default_factory=default_multires)
    stft: StftConfig = field(default_factory=lambda: StftConfig(512, 256, 128))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA[self.kind]
        if self.lam < 0:
            raise ValueError("decay-loss weight must be nonnegative")
        if self.kind.startswith("inras") and not self.multires:
            raise ValueError("INRAS losses need at least one STFT resolution")

    @property
    def family(self) -> str:
        return "naf" if self.kind.startswith("naf") else "inras"


_windows: dict = {}


def _hann(n: int, dtype) -> torch.Tensor:
    key = (n, dtype)
    if key not in _windows:
        _windows[key] = torch.hann_window(n, periodic=True, dtype=dtype)
    return _windows[key]


def stft_mag(x: torch.Tensor, fft_size: int, window_length: int, hop_length: int) -> torch.Tensor:
    """Magnitude STFT of (..., T) signals -> (..., F, K); same framing as ``signal.stft_complex``."""
    n = x.shape[-1]
    n_frames = 1 + -(-max(n - window_length, 0) // hop_length)
    pad = (n_frames - 1) * hop_length + window_length - n
    if pad:
        x = torch.nn.functional.pad(x, (0, pad))
    frames = x.unfold(-1, window_length, hop_length) * _hann(window_length, x.dtype)
    spec = torch.view_as_real(torch.fft.rfft(frames, n=fft_size))
    power = spec.pow(2).sum(-1)
    return torch.sqrt(torch.clamp(power, min=POWER_FLOOR)).transpose(-1, -2)


def stft_mag_cfg(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    return stft_mag(x, cfg.fft_size, cfg.window_length, cfg.hop_length)


def log_mag(H: torch.Tensor) -> torch.Tensor:
    return torch.log(H + LOG_EPS)


def loss_naf(pred_logmag: torch.Tensor, gt_logmag: torch.Tensor) -> torch.Tensor:
    if pred_logmag.shape != gt_logmag.shape:
        raise ValueError(f"shape mismatch {tuple(pred_logmag.shape)} vs {tuple(gt_logmag.shape)}")
    return (pred_logmag - gt_logmag).abs().mean()


def _sc_mag(P: torch.Tensor, G: torch.Tensor):
    """Spectral convergence (per item) and log-magnitude L1 for one resolution."""
    diff = (P - G).flatten(1)
    gnorm = G.flatten(1).norm(dim=1)
    # magnitudes at or below the sqrt power floor carry no energy
    ok = G.flatten(1).amax(1) > 2 * POWER_FLOOR ** 0.5
    if not bool(ok.all()):
        warnings.warn("zero-energy target: spectral convergence skipped", FloorWarning, stacklevel=3)
    sc = diff.norm(dim=1)[ok] / gnorm[ok]
    sc = sc.mean() if sc.numel() else P.new_zeros(())
    mag = (log_mag(P) - log_mag(G)).abs().mean()
    return sc, mag


def multires_mags(x: torch.Tensor, multires=None) -> list[torch.Tensor]:
    return [stft_mag(x, *res) for res in (multires or default_multires())]


def loss_stft_multires(pred: torch.Tensor, gt: torch.Tensor, multires=None,
                       return_terms: bool = False, gt_mags=None):
    """Sum over resolutions of spectral convergence + log-magnitude L1.

    ``gt_mags`` may carry precomputed target magnitudes (from ``multires_mags``).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.dim() == 1:
        pred, gt = pred[None], gt[None]
        gt_mags = None if gt_mags is None else [g[None] for g in gt_mags]
    multires = multires or default_multires()
    if gt_mags is None:
        gt_mags = multires_mags(gt, multires)
    total_sc = pred.new_zeros(())
    total_mag = pred.new_zeros(())
    for res, G in zip(multires, gt_mags):
        sc, mag = _sc_mag(stft_mag(pred, *res), G)
        total_sc = total_sc + sc
        total_mag = total_mag + mag
    if return_terms:
        return total_sc, total_mag
    return total_sc + total_mag


def decay_curve(H, warn: bool = True):
    """D[k] = 1 + E_k / sum_{i>k} E_i for k = 0..K-2, E_k the energy of frame k.

    Accepts a Spectrogram, an (F, K) array or a (..., F, K) tensor. Tail sums are
    floored at 1e-10 of the total energy.
    """
    as_numpy = not isinstance(H, torch.Tensor)
    if isinstance(H, Spectrogram):
        H = H.magnitude
    T = torch.as_tensor(np.asarray(H, dtype=float)) if as_numpy else H
    if T.shape[-1] < 2:
        raise ValueError("decay curve needs at least two frames")
    E = (T ** 2).sum(-2)
    tail = torch.flip(torch.cumsum(torch.flip(E, (-1,)), -1), (-1,))[..., 1:]
    floor = DECAY_TAIL_FLOOR * E.sum(-1, keepdim=True)
    if warn and bool((tail < floor).any()):
        warnings.warn("decay curve tail energy floored", FloorWarning, stacklevel=2)
    D = 1.0 + E[..., :-1] / torch.maximum(tail, floor).clamp_min(torch.finfo(T.dtype).tiny)
    return D.numpy() if as_numpy else D


def loss_decay(pred_H: torch.Tensor, gt_H: torch.Tensor) -> torch.Tensor:
    if pred_H.shape[-1] != gt_H.shape[-1]:
        raise ValueError("decay loss needs equal frame counts")
    return (torch.log(decay_curve(pred_H, warn=False))
            - torch.log(decay_curve(gt_H, warn=False))).abs().mean()


def total_loss(kind: str, pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig,
               pred_points: torch.Tensor | None = None, gt_points: torch.Tensor | None = None,
               gt_mags=None):
    """Combined loss for one batch.

    NAF kinds take (B, F, K) log-magnitudes; the magnitude term uses the sampled
    ``pred_points``/``gt_points`` when given, else the full grids (``pred`` may be
    None for plain naf with points). INRAS kinds take
    (B, T) waveforms; ``gt_mags`` optionally caches the target STFTs, the
    multi-resolution ones followed by the decay-loss one.
    """
    if kind != cfg.kind:
        raise ValueError(f"loss configured for {cfg.kind!r}, called with {kind!r}")
    if cfg.family == "naf":
        if pred is not None and pred.dim() != 3:
            raise ValueError(f"{kind} expects (B, F, K) log-magnitude predictions, got {tuple(pred.shape)}")
        if pred_points is not None:
            loss = loss_naf(pred_points, gt_points)
        else:
            loss = loss_naf(pred, gt)
        if kind == "naf++" and cfg.lam:
            if pred is None:
                raise ValueError("naf++ needs full spectrogram predictions for the decay term")
            loss = loss + cfg.lam * loss_decay(torch.exp(pred), torch.exp(gt))
        return loss
    if pred.dim() != 2:
        raise ValueError(f"{kind} expects (B, T) waveform predictions, got {tuple(pred.shape)}")
    n = len(cfg.multires)
    loss = loss_stft_multires(pred, gt, cfg.multires, gt_mags=None if gt_mags is None else gt_mags[:n])
    if kind == "inras++" and cfg.lam:
        G = stft_mag_cfg(gt, cfg.stft) if gt_mags is None else gt_mags[n]
        loss = loss + cfg.lam * loss_decay(stft_mag_cfg(pred, cfg.stft), G)
    return loss


def target_mags(gt: torch.Tensor, cfg: LossConfig) -> list[torch.Tensor]:
    """Target STFTs in the order ``total_loss`` expects for ``gt_mags``."""
    with torch.no_grad():
        return multires_mags(gt, cfg.multires) + [stft_mag_cfg(gt, cfg.stft)]
