"""Shoebox image-source simulator and dataset generation."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.signal import butter, sosfilt

from .signal import Waveform

SPEED_OF_SOUND = 343.0
SINC_TAPS = 81


_FRAC_STEPS = 64  # sub-sample delay resolution of the sinc interpolator


def _sinc_table():
    # row p: taps -half..half of a Hann-windowed sinc delayed by p / _FRAC_STEPS samples
    half = SINC_TAPS // 2
    x = np.arange(-half, half + 1)[None, :] - np.arange(_FRAC_STEPS)[:, None] / _FRAC_STEPS
    return np.sinc(x) * (0.5 + 0.5 * np.cos(2 * np.pi * x / SINC_TAPS))


_SINC_TABLE = _sinc_table()


class ClampWarning(UserWarning):
    """A value was clamped into its valid range."""


@dataclass(frozen=True)
class ShoeboxRoom:
    dims: tuple[float, float, float]
    # walls at x=0, x=Lx, y=0, y=Ly, z=0 (floor), z=Lz (ceiling)
    absorption: tuple[float, float, float, float, float, float]
    speed_of_sound: float = SPEED_OF_SOUND
    max_order: int | None = None

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"room dims must be three positive lengths, got {self.dims}")
        alpha = self.absorption
        if np.isscalar(alpha):
            alpha = (alpha,) * 6
        alpha = tuple(float(a) for a in alpha)
        if len(alpha) != 6 or not all(0.0 <= a <= 1.0 for a in alpha):
            raise ValueError(f"absorption must be six coefficients in [0, 1], got {self.absorption}")
        if self.max_order is not None and self.max_order < 0:
            raise ValueError("max_order must be nonnegative")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "absorption", alpha)

    @classmethod
    def uniform(cls, dims, alpha: float, **kw) -> "ShoeboxRoom":
        return cls(tuple(dims), (alpha,) * 6, **kw)

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def surface_area(self) -> float:
        lx, ly, lz = self.dims
        return 2 * (lx * ly + lx * lz + ly * lz)

    def sabine_t60(self) -> float:
        lx, ly, lz = self.dims
        areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])
        return 0.161 * self.volume / float(areas @ np.array(self.absorption))

    def contains(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > margin) and np.all(p < np.array(self.dims) - margin))

    def order_for_length(self, rir_length: float) -> int:
        """Smallest reflection order whose images all lie beyond ``c * rir_length``."""
        return int(math.ceil(self.speed_of_sound * rir_length / min(self.dims))) + 2


@dataclass(frozen=True)
class SourcePose:
    position: tuple[float, float, float]
    orientation: tuple[float, float] = (0.0, 0.0)  # yaw, pitch (radians)

    @property
    def boresight(self) -> np.ndarray:
        yaw, pitch = self.orientation
        return np.array([math.cos(pitch) * math.cos(yaw),
                         math.cos(pitch) * math.sin(yaw),
                         math.sin(pitch)])


@dataclass(frozen=True)
class ReceiverPose:
    position: tuple[float, float, float]


@dataclass(frozen=True)
class SimConfig:
    sample_rate: int = 16000
    rir_length: float = 0.32
    directivity: str = "omni"
    fractional_delay: str = "sinc"
    noise_floor_db: float | None = None
    seed: int = 0
    # removes the DC build-up of all-positive image impulses (Allen & Berkley)
    highpass_hz: float | None = 20.0

    def __post_init__(self):
        if self.rir_length <= 0:
            raise ValueError("rir_length must be positive")
        if self.directivity not in ("omni", "cardioid"):
            raise ValueError(f"unknown directivity {self.directivity!r}")
        if self.fractional_delay not in ("nearest", "sinc"):
            raise ValueError(f"unknown fractional_delay {self.fractional_delay!r}")


def absorption_from_t60(dims, t60: float) -> float:
    """Uniform absorption coefficient from Sabine's formula, clamped to (0, 0.99]."""
    if t60 <= 0:
        raise ValueError(f"t60 must be positive, got {t60}")
    lx, ly, lz = dims
    volume = lx * ly * lz
    area = 2 * (lx * ly + lx * lz + ly * lz)
    alpha = 0.161 * volume / (area * t60)
    if alpha > 0.99:
        warnings.warn(f"Sabine absorption {alpha:.3f} clamped to 0.99", ClampWarning, stacklevel=2)
        alpha = 0.99
    return max(alpha, np.finfo(float).tiny)


def directivity_gain(orientation, direction, pattern: str = "cardioid"):
    """Amplitude gain of a source aimed along ``orientation`` towards ``direction``.

    ``orientation`` is either (yaw, pitch) or a boresight unit vector. ``direction``
    may be a single unit vector or an (n, 3) array of them.
    """
    if pattern == "omni":
        d = np.asarray(direction, dtype=float)
        return 1.0 if d.ndim == 1 else np.ones(d.shape[0])
    if pattern != "cardioid":
        raise ValueError(f"unknown directivity pattern {pattern!r}")
    axis = np.asarray(orientation, dtype=float)
    if axis.shape == (2,):
        axis = SourcePose((0, 0, 0), tuple(axis)).boresight
    cos_phi = np.clip(np.asarray(direction, dtype=float) @ axis, -1.0, 1.0)
    return (1.0 + cos_phi) / 2.0


def _axis_images(length, s, r, n_max, log_beta_low, log_beta_high):
    """Per-axis image coordinates: receiver offset, reflection count, log attenuation, sign."""
    n = np.repeat(np.arange(-n_max, n_max + 1), 2)
    q = np.tile([0, 1], 2 * n_max + 1)
    sign = 1 - 2 * q
    hits_low = np.abs(n - q)
    hits_high = np.abs(n)
    # 0 * log(0) counts as no attenuation
    with np.errstate(invalid="ignore"):
        log_att = (np.where(hits_low > 0, hits_low * log_beta_low, 0.0)
                   + np.where(hits_high > 0, hits_high * log_beta_high, 0.0))
    return r - (sign * s + 2 * n * length), hits_low + hits_high, log_att, sign


def image_sources(room: ShoeboxRoom, src: SourcePose, rcv: ReceiverPose,
                  max_order: int, max_distance: float = np.inf, pattern: str = "omni"):
    """Enumerate image sources up to ``max_order``; returns (distances, amplitudes)."""
    L = np.array(room.dims)
    s = np.asarray(src.position, dtype=float)
    r = np.asarray(rcv.position, dtype=float)
    n_max = max_order // 2 + 1
    if np.isfinite(max_distance):
        n_max = min(n_max, int(max_distance / (2 * L.min())) + 2)
    with np.errstate(divide="ignore"):
        log_beta = 0.5 * np.log1p(-np.array(room.absorption))
    ax = [_axis_images(L[i], s[i], r[i], n_max, log_beta[2 * i], log_beta[2 * i + 1])
          for i in range(3)]
    (dx, ox, lx, sx), (dy, oy, ly, sy), (dz, oz, lz, sz) = ax

    order = ox[:, None, None] + oy[None, :, None] + oz[None, None, :]
    d2 = (dx ** 2)[:, None, None] + (dy ** 2)[None, :, None] + (dz ** 2)[None, None, :]
    keep = (order <= max_order) & (d2 <= max_distance ** 2)
    i, j, k = np.nonzero(keep)
    dist = np.sqrt(d2[i, j, k])
    amp = np.exp(lx[i] + ly[j] + lz[k]) / (4 * np.pi * dist)
    if pattern != "omni":
        # boresight mirrored once per reflection axis
        b = src.boresight
        cos_phi = (sx[i] * b[0] * dx[i] + sy[j] * b[1] * dy[j] + sz[k] * b[2] * dz[k]) / dist
        amp = amp * (1.0 + np.clip(cos_phi, -1.0, 1.0)) / 2.0
    return dist, amp


def _check_inside(room: ShoeboxRoom, p, what: str):
    if not room.contains(p):
        raise ValueError(f"{what} position {tuple(p)} is not strictly inside room {room.dims}")


def simulate_rir(room: ShoeboxRoom, src: SourcePose, rcv: ReceiverPose,
                 cfg: SimConfig = SimConfig()) -> Waveform:
    _check_inside(room, src.position, "source")
    _check_inside(room, rcv.position, "receiver")
    sr = cfg.sample_rate
    n_out = int(round(cfg.rir_length * sr))
    max_order = room.max_order if room.max_order is not None else room.order_for_length(cfg.rir_length)
    half = SINC_TAPS // 2
    reach = room.speed_of_sound * (n_out + half + 1) / sr
    dist, amp = image_sources(room, src, rcv, max_order, reach, cfg.directivity)
    delay = dist / room.speed_of_sound * sr

    if cfg.fractional_delay == "nearest":
        idx = np.rint(delay).astype(int)
        ok = idx < n_out
        h = np.bincount(idx[ok], weights=amp[ok], minlength=n_out)[:n_out]
    else:
        q = np.rint(delay * _FRAC_STEPS).astype(np.int64)
        base, phase = np.divmod(q, _FRAC_STEPS)
        ok = base < n_out + half
        n_acc = n_out + half
        acc = np.bincount(phase[ok] * n_acc + base[ok], weights=amp[ok],
                          minlength=_FRAC_STEPS * n_acc).reshape(_FRAC_STEPS, n_acc)
        h = np.zeros(n_acc + SINC_TAPS - 1)
        for p in np.flatnonzero(acc.any(axis=1)):
            h += np.convolve(acc[p], _SINC_TABLE[p])
        h = h[half: half + n_out]

    if cfg.highpass_hz is not None:
        h = sosfilt(butter(2, cfg.highpass_hz, "highpass", fs=sr, output="sos"), h)
    if cfg.noise_floor_db is not None:
        rng = np.random.default_rng(cfg.seed)
        sigma = np.abs(h).max() * 10 ** (cfg.noise_floor_db / 20)
        h = h + sigma * rng.standard_normal(n_out)
    return Waveform(h, sr)


@dataclass
class RirRecord:
    id: str
    source: SourcePose
    receiver: ReceiverPose
    sample_rate: int
    split: str = "train"
    rir_path: str | None = None
    waveform: Waveform | None = field(default=None, repr=False, compare=False)


def orientation_yaws(count: int, yaw0: float = 0.0) -> list[float]:
    return [yaw0 + 2 * np.pi * j / count for j in range(count)]


def generate_dataset(room: ShoeboxRoom, source_grid: Sequence, receiver_grid: Sequence,
                     orientations_per_source: int = 3, cfg: SimConfig = SimConfig(),
                     yaw0: float = 0.0, pitch: float = 0.0, workers: int = 1) -> list[RirRecord]:
    """One record per (source position, orientation, receiver), in that nesting order."""
    if len(source_grid) == 0 or len(receiver_grid) == 0:
        raise ValueError("source and receiver grids must be nonempty")
    jobs = []
    for i, s in enumerate(source_grid):
        for j, yaw in enumerate(orientation_yaws(orientations_per_source, yaw0)):
            src = SourcePose(tuple(float(v) for v in s), (float(yaw), float(pitch)))
            for k, r in enumerate(receiver_grid):
                rcv = ReceiverPose(tuple(float(v) for v in r))
                jobs.append((f"s{i:03d}_o{j}_r{k:04d}", src, rcv))

    def run(indexed):
        index, (rid, src, rcv) = indexed
        # per-record noise seed, independent of worker scheduling
        seed = int(np.random.SeedSequence([cfg.seed, index]).generate_state(1)[0])
        h = simulate_rir(room, src, rcv, replace(cfg, seed=seed))
        return RirRecord(rid, src, rcv, cfg.sample_rate, waveform=h)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(run, enumerate(jobs)))
    return [run(item) for item in enumerate(jobs)]


def grid_positions(room: ShoeboxRoom, spacing: float, height: float | None = None,
                   margin: float = 0.3) -> np.ndarray:
    """Regular receiver grid inside the room, at a fixed height or over all heights."""
    lo = margin
    axes = [np.arange(lo, d - lo + 1e-9, spacing) for d in room.dims]
    if height is not None:
        axes[2] = np.array([height])
    g = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    return g


def random_positions(room: ShoeboxRoom, n: int, seed: int, margin: float = 0.3,
                     z_range: tuple[float, float] | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lo = np.full(3, margin)
    hi = np.array(room.dims) - margin
    if z_range is not None:
        lo[2], hi[2] = z_range
    return lo + (hi - lo) * rng.random((n, 3))


def with_absorption(room: ShoeboxRoom, absorption) -> ShoeboxRoom:
    return replace(room, absorption=absorption)
