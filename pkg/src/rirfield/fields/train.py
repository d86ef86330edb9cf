"""Building, training and querying acoustic fields."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .. import metrics
from ..nn import AdamW, lr_at_epoch, set_lr
from ..roomsim import RirRecord, ShoeboxRoom
from ..signal import Spectrogram, StftConfig, Waveform, istft_random_phase
from .bounce import sample_bounce_points
from .inras import InrasField
from .losses import LOG_EPS, LossConfig, log_mag, stft_mag_cfg, target_mags, total_loss
from .naf import NafField

log = logging.getLogger(__name__)


@dataclass
class RirSet:
    """In-memory training/evaluation arrays."""
    ids: list
    sources: np.ndarray       # (n, 3)
    receivers: np.ndarray     # (n, 3)
    orientations: np.ndarray  # (n, 2) yaw, pitch
    waveforms: np.ndarray     # (n, T) float32
    sample_rate: int

    def __post_init__(self):
        n = len(self.ids)
        for name in ("sources", "receivers", "orientations", "waveforms"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.ids)

    @property
    def n_samples(self) -> int:
        return self.waveforms.shape[1]

    @classmethod
    def from_records(cls, records: Sequence[RirRecord], manifest=None) -> "RirSet":
        if not records:
            return cls([], np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2)),
                       np.zeros((0, 0), np.float32), 0)
        rates = {r.sample_rate for r in records}
        if len(rates) != 1:
            raise ValueError(f"mixed sample rates {sorted(rates)}")
        waves = [r.waveform if r.waveform is not None else manifest.load(r) for r in records]
        n = {len(w) for w in waves}
        if len(n) != 1:
            raise ValueError(f"mixed RIR lengths {sorted(n)}")
        return cls([r.id for r in records],
                   np.array([r.source.position for r in records], dtype=np.float64),
                   np.array([r.receiver.position for r in records], dtype=np.float64),
                   np.array([r.source.orientation for r in records], dtype=np.float64),
                   np.stack([w.samples for w in waves]).astype(np.float32),
                   rates.pop())

    @classmethod
    def from_manifest(cls, manifest, split: str | None = None) -> "RirSet":
        recs = manifest.records if split is None else manifest.split(split)
        return cls.from_records(recs, manifest)

    def subset(self, idx) -> "RirSet":
        idx = np.asarray(idx, dtype=int)
        return RirSet([self.ids[i] for i in idx], self.sources[idx], self.receivers[idx],
                      self.orientations[idx], self.waveforms[idx], self.sample_rate)

    def as_waveforms(self) -> list[Waveform]:
        return [Waveform(w.astype(np.float64), self.sample_rate) for w in self.waveforms]


@dataclass
class FieldConfig:
    kind: str = "inras++"
    lam: float | None = None
    use_orientation: bool = True
    ori_dim: int = 32
    bounce_mode: str = "3d"
    n_bounce: int = 256
    bounce_height: float = 1.5
    bounce_seed: int = 0
    dim: int = 64
    enc_width: int = 128
    enc_depth: int = 2
    dec_width: int = 256
    dec_depth: int = 3
    block: int = 32
    channels: int = 2
    naf_cells: tuple = (16, 16, 8)
    naf_features: int = 64
    naf_hidden: int = 256
    naf_depth: int = 4
    seed: int = 0

    def loss_config(self, sample_rate: int) -> LossConfig:
        return LossConfig(self.kind, self.lam, stft=StftConfig.for_sample_rate(sample_rate))


@dataclass
class TrainSchedule:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    lr_decay: float = 0.98
    weight_decay: float = 1e-2
    seed: int = 0
    early_stop_holdout: float = 0.0
    patience: int | None = None
    points_per_item: int = 256
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.early_stop_holdout < 0.5:
            raise ValueError("early_stop_holdout must lie in [0, 0.5)")


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list = field(default_factory=list)
    best_epoch: int | None = None
    holdout_ids: list = field(default_factory=list)


def build_field(cfg: FieldConfig, room: ShoeboxRoom, train_set: RirSet) -> torch.nn.Module:
    """Construct a seeded field and fit its output scaling to the training data."""
    torch.manual_seed(cfg.seed)
    if len(train_set) == 0:
        raise ValueError("empty training set")
    sr, T = train_set.sample_rate, train_set.n_samples
    if cfg.kind.startswith("inras"):
        bp = sample_bounce_points(room, cfg.n_bounce, cfg.bounce_seed, cfg.bounce_mode,
                                  cfg.bounce_height)
        model = InrasField(bp, T, room_scale=max(room.dims), dim=cfg.dim, enc_width=cfg.enc_width,
                           enc_depth=cfg.enc_depth, dec_width=cfg.dec_width,
                           dec_depth=cfg.dec_depth, block=cfg.block, channels=cfg.channels,
                           use_orientation=cfg.use_orientation, ori_dim=cfg.ori_dim)
        model.output_scale.fill_(float(np.sqrt(np.mean(train_set.waveforms.astype(np.float64) ** 2))))
    else:
        stft = StftConfig.for_sample_rate(sr)
        model = NafField(room.dims, stft.n_bins, stft.n_frames(T), cfg.naf_cells, cfg.naf_features,
                         cfg.naf_hidden, cfg.naf_depth, use_orientation=cfg.use_orientation)
        model.output_bias.fill_(float(naf_targets(train_set, stft).mean()))
    model.kind = cfg.kind
    return model


def naf_targets(data: RirSet, stft: StftConfig) -> torch.Tensor:
    with torch.no_grad():
        return log_mag(stft_mag_cfg(torch.from_numpy(data.waveforms), stft))


def _tensors(data: RirSet, idx):
    return (torch.as_tensor(data.sources[idx], dtype=torch.float32),
            torch.as_tensor(data.receivers[idx], dtype=torch.float32),
            torch.as_tensor(data.orientations[idx], dtype=torch.float32))


def _holdout_split(n: int, frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_hold = int(round(frac * n))
    if frac > 0:
        n_hold = min(max(n_hold, 1), n - 1)
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def stft_error_on(model, data: RirSet, seed: int = 0) -> float:
    pred = predict(model, data, seed=seed)
    cfg = StftConfig.for_sample_rate(data.sample_rate)
    return float(np.mean([metrics.stft_error(Waveform(p, data.sample_rate),
                                             Waveform(g.astype(np.float64), data.sample_rate), cfg)
                          for p, g in zip(pred, data.waveforms)]))


def train(model, data: RirSet, schedule: TrainSchedule, loss_cfg: LossConfig,
          val: RirSet | None = None, init_lr: float | None = None,
          holdout: RirSet | None = None) -> TrainResult:
    """Minibatch AdamW with per-epoch exponential LR decay.

    With ``early_stop_holdout > 0`` that fraction of ``data`` is held out (or an
    explicit ``holdout`` set is used), the holdout STFT error is tracked each
    epoch and the best state is restored at the end, stopping early after
    ``patience`` epochs without improvement.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if loss_cfg.family != ("naf" if isinstance(model, NafField) else "inras"):
        raise ValueError(f"loss kind {loss_cfg.kind!r} does not match model {type(model).__name__}")
    rng = np.random.default_rng(schedule.seed)
    torch.manual_seed(schedule.seed)
    if holdout is None:
        fit_idx, hold_idx = _holdout_split(len(data), schedule.early_stop_holdout, rng)
        fit = data.subset(fit_idx)
        holdout = data.subset(hold_idx) if len(hold_idx) else None
    else:
        fit = data
        holdout = holdout if len(holdout) else None
    base_lr = schedule.lr if init_lr is None else init_lr
    opt = AdamW(model.parameters(), lr=base_lr, weight_decay=schedule.weight_decay,
                require_grads=False)
    naf = isinstance(model, NafField)
    targets = naf_targets(fit, loss_cfg.stft) if naf else None
    result = TrainResult(model, holdout_ids=list(holdout.ids) if holdout else [])
    best, best_state, stale = np.inf, None, 0
    for epoch in range(schedule.epochs):
        lr = lr_at_epoch(base_lr, epoch, schedule.lr_decay)
        set_lr(opt, lr)
        model.train()
        perm = rng.permutation(len(fit))
        total, count = 0.0, 0
        for start in range(0, len(fit), schedule.batch_size):
            idx = perm[start:start + schedule.batch_size]
            s, r, th = _tensors(fit, idx)
            if naf:
                loss = _naf_step(model, s, r, th, targets[idx], loss_cfg, schedule, rng)
            else:
                gt = torch.from_numpy(fit.waveforms[idx])
                loss = total_loss(loss_cfg.kind, model(s, r, th), gt, loss_cfg,
                                  gt_mags=target_mags(gt, loss_cfg))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / count}
        evaluate_now = (epoch + 1) % schedule.eval_every == 0 or epoch == schedule.epochs - 1
        if val is not None and len(val) and evaluate_now:
            row["val_stft_error"] = stft_error_on(model, val)
        if holdout is not None:
            err = stft_error_on(model, holdout)
            row["holdout_stft_error"] = err
            if err < best:
                best, stale, result.best_epoch = err, 0, epoch
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
        result.history.append(row)
        log.info("epoch %d loss %.4f", epoch, row["train_loss"])
        if schedule.patience is not None and holdout is not None and stale >= schedule.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


def _naf_step(model, s, r, th, target, loss_cfg, schedule, rng):
    B, F, K = target.shape
    P = schedule.points_per_item
    k = torch.as_tensor(rng.integers(0, K, (B, P)))
    f = torch.as_tensor(rng.integers(0, F, (B, P)))
    pts = model(s, r, th, k, f)
    gt_pts = target[torch.arange(B)[:, None], f, k]
    full = model(s, r, th) if loss_cfg.kind == "naf++" and loss_cfg.lam else None
    return total_loss(loss_cfg.kind, full, target, loss_cfg, pred_points=pts, gt_points=gt_pts)


@torch.no_grad()
def predict(model, data: RirSet | None = None, sources=None, receivers=None, orientations=None,
            seed: int = 0, batch: int = 64, n_samples: int | None = None,
            sample_rate: int | None = None) -> np.ndarray:
    """Predicted waveforms (n, T). NAF spectrograms are inverted from a seeded random phase."""
    if data is not None:
        sources, receivers, orientations = data.sources, data.receivers, data.orientations
        n_samples, sample_rate = data.n_samples, data.sample_rate
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    receivers = np.atleast_2d(np.asarray(receivers, dtype=float))
    orientations = np.zeros((len(sources), 2)) if orientations is None else \
        np.atleast_2d(np.asarray(orientations, dtype=float))
    model.eval()
    out = []
    for start in range(0, len(sources), batch):
        sl = slice(start, start + batch)
        s = torch.as_tensor(sources[sl], dtype=torch.float32)
        r = torch.as_tensor(receivers[sl], dtype=torch.float32)
        th = torch.as_tensor(orientations[sl], dtype=torch.float32)
        if isinstance(model, NafField):
            if sample_rate is None or n_samples is None:
                raise ValueError("NAF prediction needs sample_rate and n_samples")
            stft = StftConfig.for_sample_rate(sample_rate)
            mags = (torch.exp(model(s, r, th)) - LOG_EPS).clamp_min(0).numpy().astype(np.float64)
            for i, m in enumerate(mags):
                w = istft_random_phase(Spectrogram(m, stft, sample_rate), seed + start + i).samples
                out.append(np.pad(w, (0, max(n_samples - len(w), 0)))[:n_samples])
        else:
            out.extend(model(s, r, th).numpy().astype(np.float64))
    return np.asarray(out)


def evaluate_model(model, data: RirSet, seed: int = 0, per_pair: list | None = None):
    pred = predict(model, data, seed=seed)
    preds = [Waveform(p, data.sample_rate) for p in pred]
    return metrics.evaluate(preds, data.as_waveforms(), StftConfig.for_sample_rate(data.sample_rate),
                            ids=data.ids, per_pair=per_pair)


def write_history(path, history: list[dict]) -> None:
    keys = []
    for row in history:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(history)


def field_meta(cfg: FieldConfig, model) -> dict:
    return {"field_config": asdict(cfg), "model_config": model.config}


def rebuild_field(meta: dict, room: ShoeboxRoom) -> torch.nn.Module:
    """Re-create an untrained field with the architecture recorded in ``field_meta``."""
    fc = dict(meta["field_config"])
    fc["naf_cells"] = tuple(fc["naf_cells"])
    cfg = FieldConfig(**fc)
    mc = meta["model_config"]
    if cfg.kind.startswith("inras"):
        bp = sample_bounce_points(room, cfg.n_bounce, cfg.bounce_seed, cfg.bounce_mode,
                                  cfg.bounce_height)
        model = InrasField(bp, mc["n_samples"], room_scale=mc["room_scale"], dim=mc["dim"],
                           enc_width=mc["enc_width"], enc_depth=mc["enc_depth"],
                           dec_width=mc["dec_width"], dec_depth=mc["dec_depth"], block=mc["block"],
                           channels=mc["channels"], n_octaves=mc["n_octaves"],
                           use_orientation=mc["use_orientation"], ori_dim=mc["ori_dim"],
                           slope=mc["slope"])
    else:
        model = NafField(mc["dims"], mc["n_freq"], mc["n_frames"], mc["cells"], mc["features"],
                         mc["hidden"], mc["depth"], mc["n_octaves"], mc["use_orientation"], mc["slope"])
    model.kind = cfg.kind
    return model
