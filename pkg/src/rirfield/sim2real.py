"""Few-shot RIR synthesis: pretrain on dense simulated data, fine-tune on sparse real data."""

from __future__ import annotations

import copy
import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .baselines import RirIndex, predict_baseline
from .fields.train import (FieldConfig, RirSet, TrainSchedule, build_field, evaluate_model,
                           field_meta, train)
from .nn import save_checkpoint
from .roomsim import ShoeboxRoom, SimConfig, absorption_from_t60
from .signal import StftConfig, Waveform

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.3, 1.0, 5.0, 20.0, 100.0)
FINETUNE_LR = 5e-4
# per-face absorption multipliers of the real-proxy room (x0, x1, y0, y1, z0, z1)
PROXY_FACE_PATTERN = (0.6, 1.4, 0.8, 1.2, 0.5, 1.5)


@dataclass
class FewshotPlan:
    fractions: tuple = DEFAULT_FRACTIONS  # percent of the training split
    early_stop_holdout: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not self.fractions:
            raise ValueError("plan needs at least one fraction")
        for f in self.fractions:
            if not 0 < f <= 100:
                raise ValueError(f"fraction {f}% outside (0, 100]")
        if not 0 <= self.early_stop_holdout < 0.5:
            raise ValueError("early_stop_holdout must lie in [0, 0.5)")


@dataclass
class RoomEstimate:
    dims: tuple
    t60: float
    n_used: int
    n_excluded: int

    def sim_room(self) -> ShoeboxRoom:
        """Uniform-absorption shoebox whose Sabine T60 matches the estimate."""
        return ShoeboxRoom.uniform(self.dims, absorption_from_t60(self.dims, self.t60))


def estimate_room_params(records: Sequence[Waveform], dims) -> RoomEstimate:
    """Bounding box as given, plus the mean T60 over records where it is measurable."""
    vals = []
    for w in records:
        try:
            vals.append(metrics.t60(w))
        except (metrics.DegenerateSignalError, metrics.InsufficientDecayError):
            continue
    if not vals:
        raise ValueError("no record with a measurable T60")
    return RoomEstimate(tuple(float(d) for d in dims), float(np.mean(vals)), len(vals),
                        len(records) - len(vals))


def real_proxy_room(dims, t60: float) -> ShoeboxRoom:
    """Non-uniform absorption with the same mean as a uniform room of Sabine time ``t60``."""
    alpha = absorption_from_t60(dims, t60)
    pattern = np.asarray(PROXY_FACE_PATTERN)
    return ShoeboxRoom(tuple(dims), tuple(np.clip(alpha * pattern, 0.01, 0.99)))


def real_proxy_config(sample_rate: int = 16000, rir_length: float = 0.32, seed: int = 0) -> SimConfig:
    return SimConfig(sample_rate, rir_length, directivity="cardioid", noise_floor_db=-60.0, seed=seed)


def sim_config(sample_rate: int = 16000, rir_length: float = 0.32, seed: int = 0) -> SimConfig:
    return SimConfig(sample_rate, rir_length, directivity="omni", seed=seed)


@dataclass
class FewshotSplit:
    fraction: float
    train_idx: np.ndarray    # indices into the full training split, fitting part
    holdout_idx: np.ndarray  # early-stopping part

    @property
    def n_total(self) -> int:
        return len(self.train_idx) + len(self.holdout_idx)


def make_fewshot_splits(n_train: int, plan: FewshotPlan) -> list[FewshotSplit]:
    """Nested seeded subsets of a training split of size ``n_train``, in plan order.

    Every fraction takes a prefix of one seeded permutation, so smaller subsets
    are contained in larger ones. The early-stop holdout is carved from each
    subset with its own seeded draw.
    """
    order = np.random.default_rng(plan.seed).permutation(n_train)
    out = []
    for frac in plan.fractions:
        m = int(round(frac / 100 * n_train))
        if m == 0:
            raise ValueError(f"fraction {frac}% of {n_train} records is empty")
        subset = order[:m]
        n_hold = int(round(plan.early_stop_holdout * m))
        if plan.early_stop_holdout > 0 and m >= 2:
            n_hold = min(max(n_hold, 1), m - 1)
        else:
            n_hold = 0
        rng = np.random.default_rng([plan.seed, m])
        sub = subset[rng.permutation(m)]
        out.append(FewshotSplit(frac, np.sort(sub[n_hold:]), np.sort(sub[:n_hold])))
    return out


@dataclass
class FinetuneConfig:
    pretrain: TrainSchedule = field(default_factory=TrainSchedule)
    finetune_lr: float = FINETUNE_LR
    finetune_epochs: int = 200
    patience: int = 20
    skip_finetune: bool = False


def pretrain(field_cfg: FieldConfig, sim_room: ShoeboxRoom, sim_train: RirSet, cfg: FinetuneConfig):
    """Stage 1: train from scratch on simulated records."""
    model = build_field(field_cfg, sim_room, sim_train)
    res = train(model, sim_train, cfg.pretrain, field_cfg.loss_config(sim_train.sample_rate))
    return model, res


def finetune(model, field_cfg: FieldConfig, fit: RirSet, holdout: RirSet | None, cfg: FinetuneConfig,
             seed: int = 0):
    """Stage 2: all parameters, lr 5e-4, early stopping on the holdout STFT error."""
    if len(fit) == 0:
        raise ValueError("empty fine-tuning set")
    sched = replace(cfg.pretrain, epochs=cfg.finetune_epochs, lr=cfg.finetune_lr, seed=seed,
                    early_stop_holdout=0.0, patience=cfg.patience)
    return train(model, fit, sched, field_cfg.loss_config(fit.sample_rate), holdout=holdout)


def pretrain_then_finetune(field_cfg: FieldConfig, sim_room: ShoeboxRoom, sim_train: RirSet,
                           fit: RirSet, holdout: RirSet | None, cfg: FinetuneConfig):
    """Both stages; ``cfg.skip_finetune`` returns the simulator-only model."""
    if len(fit) == 0 and not cfg.skip_finetune:
        raise ValueError("empty fine-tuning set")
    model, res1 = pretrain(field_cfg, sim_room, sim_train, cfg)
    report = {"pretrain_epochs": len(res1.history), "finetune_epochs": 0, "best_epoch": None}
    if not cfg.skip_finetune:
        res2 = finetune(model, field_cfg, fit, holdout, cfg, field_cfg.seed)
        report.update(finetune_epochs=len(res2.history), best_epoch=res2.best_epoch)
    return model, report


def train_scratch(field_cfg: FieldConfig, room: ShoeboxRoom, fit: RirSet, holdout: RirSet | None,
                  cfg: FinetuneConfig):
    """Real-data-only training with the same early-stopping protocol as stage 2."""
    model = build_field(field_cfg, room, fit)
    sched = replace(cfg.pretrain, epochs=cfg.finetune_epochs, seed=field_cfg.seed,
                    early_stop_holdout=0.0, patience=cfg.patience)
    res = train(model, fit, sched, field_cfg.loss_config(fit.sample_rate), holdout=holdout)
    return model, {"pretrain_epochs": 0, "finetune_epochs": len(res.history),
                   "best_epoch": res.best_epoch}


@dataclass
class FewshotData:
    room: ShoeboxRoom        # bounding box used for the fields (absorption unused)
    sim_room: ShoeboxRoom
    sim_train: RirSet
    real_train: RirSet
    real_test: RirSet


BENCH_FIELDS = ["model", "fraction", "n_train", "n_holdout", "sim2real", "stft_err", "c50_err",
                "edt_err", "t60_err", "finetune_epochs"]


def _parse_model(name: str):
    """'inras++' (scratch), 'inras++:sim2real', 'inras++:simulator', 'nearest' or 'linear'."""
    base, _, mode = name.partition(":")
    if mode not in ("", "sim2real", "simulator"):
        raise ValueError(f"unknown model mode {mode!r} in {name!r}")
    return base, mode


def run_fewshot_benchmark(models: Sequence[str], plan: FewshotPlan, data: FewshotData,
                          field_cfg: FieldConfig, cfg: FinetuneConfig, out_dir=None,
                          csv_path=None) -> list[dict]:
    """One row per (model, fraction), all evaluated on the shared real test split.

    Pretrained stage-1 models are trained once per model kind and copied for
    every fraction. With ``out_dir`` each cell's checkpoint and config are saved.
    """
    splits = make_fewshot_splits(len(data.real_train), plan)
    pretrained = {}
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    for name in models:
        base, mode = _parse_model(name)
        fc = replace(field_cfg, kind=base) if base not in ("nearest", "linear") else None
        for sp in splits:
            fit = data.real_train.subset(sp.train_idx)
            hold = data.real_train.subset(sp.holdout_idx)
            info = {"finetune_epochs": 0}
            model = None
            if fc is None:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    # baselines have no early stopping, so they index the whole subset
                    index = RirIndex(_concat(fit, hold) if len(hold) else fit)
                    pred = predict_baseline(base, index, data.real_test)
                report = metrics.evaluate([Waveform(p, data.real_test.sample_rate) for p in pred],
                                          data.real_test.as_waveforms(),
                                          StftConfig.for_sample_rate(data.real_test.sample_rate))
            else:
                if mode:
                    if base not in pretrained:
                        pretrained[base] = pretrain(fc, data.sim_room, data.sim_train, cfg)[0]
                    model = copy.deepcopy(pretrained[base])
                    if mode == "sim2real":
                        res = finetune(model, fc, fit, hold, cfg, fc.seed)
                        info["finetune_epochs"] = len(res.history)
                else:
                    model, info = train_scratch(fc, data.room, fit, hold, cfg)
                report = evaluate_model(model, data.real_test)
            row = {"model": name, "fraction": sp.fraction, "n_train": len(fit), "n_holdout": len(hold),
                   "sim2real": ("yes" if mode == "sim2real" else "no") if mode else "",
                   "stft_err": report.stft_err, "c50_err": report.c50_err, "edt_err": report.edt_err,
                   "t60_err": report.t60_err, "finetune_epochs": info["finetune_epochs"]}
            rows.append(row)
            log.info("fewshot %s %.1f%%: %s", name, sp.fraction, row)
            if out is not None and model is not None:
                cell = out / "cells" / f"{name.replace(':', '_')}_{sp.fraction:g}"
                cell.mkdir(parents=True, exist_ok=True)
                save_checkpoint(cell / "model", model, field_meta(fc, model))
                (cell / "config.json").write_text(json.dumps(
                    {"model": name, "fraction": sp.fraction, "plan": asdict(plan),
                     "field_config": asdict(fc),
                     "train_ids": list(fit.ids), "holdout_ids": list(hold.ids)}, indent=2) + "\n")
    if csv_path is None and out is not None:
        csv_path = out / "fewshot.csv"
    if csv_path is not None:
        write_benchmark_csv(csv_path, rows)
    return rows


def _concat(a: RirSet, b: RirSet) -> RirSet:
    return RirSet(list(a.ids) + list(b.ids), np.vstack([a.sources, b.sources]),
                  np.vstack([a.receivers, b.receivers]), np.vstack([a.orientations, b.orientations]),
                  np.vstack([a.waveforms, b.waveforms]), a.sample_rate)


def write_benchmark_csv(path, rows: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        w.writeheader()
        w.writerows(rows)
