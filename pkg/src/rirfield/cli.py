"""Command line entry point: gen, train, eval, loudness, fewshot, replay.

Every command resolves built-in defaults < config file < flags, writes the
resolved config to ``<out>/config.json`` and can be re-run from that file alone
(``rirfield replay <out>``).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import metrics
from .baselines import RirIndex, predict_baseline
from .dataset import ValidationError, assign_splits, read_dataset, write_dataset
from .fields.train import (FieldConfig, RirSet, TrainSchedule, build_field, evaluate_model,
                           field_meta, predict, rebuild_field, train, write_history)
from .nn import load_checkpoint, save_checkpoint
from .roomsim import (ShoeboxRoom, SimConfig, SourcePose, ReceiverPose, absorption_from_t60,
                      generate_dataset, grid_positions, random_positions, simulate_rir)
from .signal import ConfigError, StftConfig, Waveform, resample
from .sim2real import (FewshotData, FewshotPlan, FinetuneConfig, estimate_room_params,
                       run_fewshot_benchmark)

log = logging.getLogger("rirfield")

MODEL_KINDS = ("naf", "naf++", "inras", "inras++")
BASELINES = ("nearest", "linear")

GEN_DEFAULTS = {
    "room": {"dims": [6.0, 4.0, 3.0], "t60": 0.3, "absorption": None, "t60_from": None},
    "sim": {"sample_rate": 16000, "rir_length": 0.32, "directivity": "omni",
            "noise_floor_db": None, "fractional_delay": "sinc", "highpass_hz": 20.0},
    "sources": {"count": 3, "seed": 1, "margin": 1.0, "z_range": [1.2, 1.8], "positions": None},
    "orientations_per_source": 3,
    "receivers": {"spacing": 0.6, "height": None, "margin": 0.3},
    "max_records": 2500,
    "proportions": [0.8, 0.05, 0.15],
    "seed": 0,
    "workers": 1,
}

TRAIN_DEFAULTS = {
    "data": None,
    "sample_rate": None,
    "field": asdict(FieldConfig()),
    "schedule": asdict(TrainSchedule()),
}

EVAL_DEFAULTS = {"data": None, "model": None, "split": "test", "k": 4, "seed": 0, "sample_rate": None}

LOUDNESS_DEFAULTS = {"data": None, "model": None, "emitter": None, "yaw": 0.0, "pitch": 0.0,
                     "height": 1.5, "slice_y": None, "resolution": 0.1, "seed": 0}

FEWSHOT_DEFAULTS = {
    "sim": None, "real": None,
    "models": ["inras++", "inras++:sim2real"],
    "plan": asdict(FewshotPlan()),
    "field": asdict(FieldConfig()),
    "pretrain": asdict(TrainSchedule()),
    "finetune_epochs": 200, "patience": 20, "finetune_lr": 5e-4,
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"{path}{k}: unknown config key")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def _set(cfg: dict, dotted: str, value):
    if value is None:
        return
    node = cfg
    *parents, last = dotted.split(".")
    for p in parents:
        node = node[p]
    node[last] = value


def resolve(command: str, defaults: dict, config_path, overrides: dict) -> dict:
    cfg = copy.deepcopy(defaults)
    if config_path:
        loaded = json.loads(Path(config_path).read_text())
        if "command" in loaded:
            if loaded["command"] != command:
                raise ConfigError(f"config is for command {loaded['command']!r}, not {command!r}")
            loaded = loaded["config"]
        cfg = _merge(cfg, loaded)
    for key, value in overrides.items():
        _set(cfg, key, value)
    return cfg


def _begin(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "INCOMPLETE").write_text("run did not finish\n")
    (out / "config.json").write_text(json.dumps({"command": command, "config": cfg}, indent=2) + "\n")


def _finish(out: Path) -> None:
    (out / "INCOMPLETE").unlink(missing_ok=True)


# ---------------------------------------------------------------- gen

def _room_from_config(cfg: dict) -> ShoeboxRoom:
    rc = cfg["room"]
    dims = rc["dims"]
    if rc.get("t60_from"):
        real = read_dataset(rc["t60_from"])
        est = estimate_room_params(real.waveforms(real.split("train")), dims)
        print(f"estimated T60 {est.t60:.3f} s from {est.n_used} records ({est.n_excluded} excluded)")
        rc["t60"] = est.t60
    try:
        if rc.get("absorption") is not None:
            return ShoeboxRoom(tuple(dims), rc["absorption"])
        return ShoeboxRoom.uniform(tuple(dims), absorption_from_t60(tuple(dims), rc["t60"]))
    except (ValueError, TypeError) as exc:
        field = "room.absorption" if rc.get("absorption") is not None else "room"
        raise ConfigError(f"{field}: {exc}") from exc


def _sim_config(cfg: dict) -> SimConfig:
    try:
        return SimConfig(**cfg["sim"], seed=cfg["seed"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"sim: {exc}") from exc


def cmd_gen(cfg: dict, out: Path) -> int:
    room = _room_from_config(cfg)
    sim = _sim_config(cfg)
    sc, rc = cfg["sources"], cfg["receivers"]
    if sc.get("positions"):
        sources = np.asarray(sc["positions"], dtype=float)
    else:
        sources = random_positions(room, sc["count"], sc["seed"], sc["margin"], tuple(sc["z_range"]))
    receivers = grid_positions(room, rc["spacing"], rc["height"], rc["margin"])
    records = generate_dataset(room, sources, receivers, cfg["orientations_per_source"], sim,
                               workers=cfg["workers"])
    if cfg["max_records"] and len(records) > cfg["max_records"]:
        keep = np.sort(np.random.default_rng(cfg["seed"]).permutation(len(records))[:cfg["max_records"]])
        records = [records[i] for i in keep]
    records = assign_splits(records, tuple(cfg["proportions"]), cfg["seed"])
    t60s = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for r in records[:200]:
            try:
                t60s.append(metrics.t60(r.waveform))
            except ValueError:
                pass
    manifest = write_dataset(records, out, room, sim)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest)} records to {out} {counts}")
    if t60s:
        print(f"T60 over {len(t60s)} records: mean {np.mean(t60s):.3f} s, "
              f"std {np.std(t60s):.3f} s (Sabine {room.sabine_t60():.3f} s)")
    return 0


# ---------------------------------------------------------------- train / eval

def load_set(data_dir, split: str | None, sample_rate: int | None = None) -> tuple[RirSet, ShoeboxRoom]:
    manifest = read_dataset(data_dir)
    if manifest.room is None:
        raise ValidationError(f"{data_dir}: room.cfg has no room description")
    data = RirSet.from_manifest(manifest, split)
    if len(data) == 0:
        raise ValidationError(f"{data_dir}: split {split!r} is empty")
    if sample_rate and sample_rate != data.sample_rate:
        waves = np.stack([resample(Waveform(w.astype(np.float64), data.sample_rate), sample_rate).samples
                          for w in data.waveforms]).astype(np.float32)
        data = RirSet(data.ids, data.sources, data.receivers, data.orientations, waves, sample_rate)
    return data, manifest.room


def cmd_train(cfg: dict, out: Path) -> int:
    if cfg["field"]["kind"] not in MODEL_KINDS:
        raise ConfigError(f"field.kind: unknown model kind {cfg['field']['kind']!r}")
    fc = FieldConfig(**{**cfg["field"], "naf_cells": tuple(cfg["field"]["naf_cells"])})
    sched = TrainSchedule(**cfg["schedule"])
    tr, room = load_set(cfg["data"], "train", cfg["sample_rate"])
    val, _ = load_set(cfg["data"], "val", cfg["sample_rate"])
    model = build_field(fc, room, tr)
    res = train(model, tr, sched, fc.loss_config(tr.sample_rate), val=val)
    save_checkpoint(out / "model", model, field_meta(fc, model) | {"sample_rate": tr.sample_rate,
                                                                    "n_samples": tr.n_samples})
    write_history(out / "history.csv", res.history)
    last = res.history[-1]
    print(f"trained {fc.kind} for {len(res.history)} epochs; final loss {last['train_loss']:.4f}"
          + (f", val STFT error {last['val_stft_error']:.4f}" if "val_stft_error" in last else ""))
    return 0


def load_model(run_dir, room: ShoeboxRoom):
    run_dir = Path(run_dir)
    header = json.loads((run_dir / "model.json").read_text())
    model = rebuild_field(header["meta"], room)
    load_checkpoint(run_dir / "model", model)
    model.eval()
    return model, header["meta"]


def predict_kind(model_ref: str, data: RirSet, room: ShoeboxRoom, data_dir, k: int = 4, seed: int = 0):
    if model_ref in BASELINES:
        train_set, _ = load_set(data_dir, "train", data.sample_rate)
        return predict_baseline(model_ref, RirIndex(train_set), data, k)
    model, _ = load_model(model_ref, room)
    return predict(model, data, seed=seed)


def cmd_eval(cfg: dict, out: Path) -> int:
    if not cfg["model"]:
        raise ConfigError("model: a checkpoint run directory or a baseline kind is required")
    data, room = load_set(cfg["data"], cfg["split"], cfg["sample_rate"])
    pred = predict_kind(cfg["model"], data, room, cfg["data"], cfg["k"], cfg["seed"])
    rows = []
    report = metrics.evaluate([Waveform(p, data.sample_rate) for p in pred], data.as_waveforms(),
                              StftConfig.for_sample_rate(data.sample_rate), data.ids, rows)
    metrics.write_metrics_csv(out / "metrics.csv", rows, report)
    (out / "report.json").write_text(json.dumps(asdict(report), indent=2) + "\n")
    print(json.dumps(report.as_row()))
    return 0


# ---------------------------------------------------------------- loudness

def loudness_grid(predict_fn, dims, emitter, theta, resolution: float, height: float, slice_y: float):
    """Energy maps in dB: top view (ny, nx) at ``height`` and side view (nz, nx) at ``slice_y``."""
    nx, ny, nz = (int(round(d / resolution)) for d in dims)
    xs = (np.arange(nx) + 0.5) * resolution
    ys = (np.arange(ny) + 0.5) * resolution
    zs = (np.arange(nz) + 0.5) * resolution
    top = np.array([[x, y, height] for y in ys for x in xs])
    side = np.array([[x, slice_y, z] for z in zs for x in xs])
    maps = []
    for pts, shape in ((top, (ny, nx)), (side, (nz, nx))):
        h = predict_fn(np.repeat([emitter], len(pts), 0), pts, np.repeat([theta], len(pts), 0))
        energy = np.sum(np.asarray(h, dtype=np.float64) ** 2, axis=1)
        maps.append(10 * np.log10(np.maximum(energy, 1e-30)).reshape(shape))
    return maps[0], maps[1], (xs, ys, zs)


def write_pgm(path, grid: np.ndarray) -> None:
    """8-bit binary graymap; first row of ``grid`` is drawn at the bottom."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    scaled = np.zeros_like(g) if hi == lo else (g - lo) / (hi - lo)
    img = np.flipud(np.round(scaled * 255)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_grid_csv(path, grid: np.ndarray, cols, rows, row_name: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"x,{row_name},energy_db\n")
        for i, rv in enumerate(rows):
            for j, cv in enumerate(cols):
                fh.write(f"{cv:.4f},{rv:.4f},{grid[i, j]:.6f}\n")


def cmd_loudness(cfg: dict, out: Path) -> int:
    manifest = read_dataset(cfg["data"])
    room = manifest.room
    if room is None:
        raise ValidationError("room.cfg has no room description")
    if cfg["emitter"] is None:
        raise ConfigError("emitter: position required")
    emitter = np.asarray(cfg["emitter"], dtype=float)
    if not room.contains(emitter):
        raise ConfigError(f"emitter: {tuple(emitter)} is outside room {room.dims}")
    theta = np.array([cfg["yaw"], cfg["pitch"]], dtype=float)
    slice_y = room.dims[1] / 2 if cfg["slice_y"] is None else cfg["slice_y"]
    if cfg["model"] == "sim":
        sim = SimConfig(**(manifest.sim_config or {}))

        def fn(s, r, th):
            return np.stack([simulate_rir(room, SourcePose(tuple(a), tuple(t)), ReceiverPose(tuple(b)),
                                          sim).samples for a, b, t in zip(s, r, th)])
    else:
        model, meta = load_model(cfg["model"], room)

        def fn(s, r, th):
            return predict(model, sources=s, receivers=r, orientations=th, seed=cfg["seed"],
                           n_samples=meta.get("n_samples"), sample_rate=meta.get("sample_rate"))
    top, side, (xs, ys, zs) = loudness_grid(fn, room.dims, emitter, theta, cfg["resolution"],
                                            cfg["height"], slice_y)
    write_grid_csv(out / "top.csv", top, xs, ys, "y")
    write_grid_csv(out / "side.csv", side, xs, zs, "z")
    write_pgm(out / "top.pgm", top)
    write_pgm(out / "side.pgm", side)
    print(f"top view {top.shape[1]}x{top.shape[0]}, side view {side.shape[1]}x{side.shape[0]}")
    return 0


# ---------------------------------------------------------------- fewshot

def cmd_fewshot(cfg: dict, out: Path) -> int:
    for key in ("sim", "real"):
        if not cfg[key] or not (Path(cfg[key]) / "manifest.txt").exists():
            raise ValidationError(f"{key}: dataset {cfg[key]!r} not found")
    sim_train, sim_room = load_set(cfg["sim"], "train")
    real_train, room = load_set(cfg["real"], "train")
    real_test, _ = load_set(cfg["real"], "test")
    plan = FewshotPlan(tuple(cfg["plan"]["fractions"]), cfg["plan"]["early_stop_holdout"],
                       cfg["plan"]["seed"])
    fc = FieldConfig(**{**cfg["field"], "naf_cells": tuple(cfg["field"]["naf_cells"])})
    ft = FinetuneConfig(TrainSchedule(**cfg["pretrain"]), cfg["finetune_lr"], cfg["finetune_epochs"],
                        cfg["patience"])
    rows = run_fewshot_benchmark(cfg["models"], plan, FewshotData(room, sim_room, sim_train,
                                                                  real_train, real_test),
                                 fc, ft, out_dir=out)
    for r in rows:
        print(f"{r['model']:>20s} {r['fraction']:6.1f}%  stft {r['stft_err']:.3f}  "
              f"c50 {r['c50_err']:.3f}  edt {r['edt_err']:.4f}  t60 {r['t60_err']:.2f}")
    return 0


COMMANDS = {
    "gen": (GEN_DEFAULTS, cmd_gen),
    "train": (TRAIN_DEFAULTS, cmd_train),
    "eval": (EVAL_DEFAULTS, cmd_eval),
    "loudness": (LOUDNESS_DEFAULTS, cmd_loudness),
    "fewshot": (FEWSHOT_DEFAULTS, cmd_fewshot),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rirfield", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (or a persisted run config)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen", help="simulate a dataset")
    common(g)
    g.add_argument("--sr", type=int, choices=(16000, 48000))
    g.add_argument("--t60", type=float)
    g.add_argument("--directivity", choices=("omni", "cardioid"))
    g.add_argument("--t60-from", help="estimate T60 from this dataset's training split")

    t = sub.add_parser("train", help="train an acoustic field")
    common(t)
    t.add_argument("--data")
    t.add_argument("--model", help="naf | naf++ | inras | inras++")
    t.add_argument("--lambda", dest="lam", type=float, help="decay-loss weight")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--sr", type=int, choices=(16000, 48000))
    t.add_argument("--bounce-mode", choices=("2d", "3d"))
    t.add_argument("--no-orientation", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    common(e)
    e.add_argument("--data")
    e.add_argument("--model", help="run directory with a checkpoint, or nearest | linear")
    e.add_argument("--split", choices=("train", "val", "test"))
    e.add_argument("--sr", type=int, choices=(16000, 48000))

    lo = sub.add_parser("loudness", help="render loudness maps on a 0.1 m grid")
    common(lo)
    lo.add_argument("--data")
    lo.add_argument("--model", help="run directory with a checkpoint, or 'sim' for the simulator")
    lo.add_argument("--emitter", type=float, nargs=3)
    lo.add_argument("--yaw", type=float)
    lo.add_argument("--pitch", type=float)
    lo.add_argument("--height", type=float)

    f = sub.add_parser("fewshot", help="few-shot benchmark over training fractions")
    common(f)
    f.add_argument("--sim")
    f.add_argument("--real")
    f.add_argument("--models", help="comma-separated, e.g. inras++,inras++:sim2real,nearest")
    f.add_argument("--fractions", help="comma-separated percentages")
    f.add_argument("--epochs", type=int, help="pretraining epochs")
    f.add_argument("--finetune-epochs", type=int)

    r = sub.add_parser("replay", help="re-run a command from its persisted config")
    r.add_argument("run_dir")
    r.add_argument("--out", required=True)
    return p


def _overrides(args) -> dict:
    c = args.command
    if c == "gen":
        return {"seed": args.seed, "sim.sample_rate": args.sr, "room.t60": args.t60,
                "sim.directivity": args.directivity, "room.t60_from": args.t60_from}
    if c == "train":
        return {"data": args.data, "field.kind": args.model, "field.lam": args.lam,
                "schedule.epochs": args.epochs, "schedule.batch_size": args.batch_size,
                "field.seed": args.seed, "schedule.seed": args.seed, "sample_rate": args.sr,
                "field.bounce_mode": args.bounce_mode,
                "field.use_orientation": False if args.no_orientation else None}
    if c == "eval":
        return {"data": args.data, "model": args.model, "split": args.split, "seed": args.seed,
                "sample_rate": args.sr}
    if c == "loudness":
        return {"data": args.data, "model": args.model, "emitter": args.emitter, "yaw": args.yaw,
                "pitch": args.pitch, "height": args.height, "seed": args.seed}
    if c == "fewshot":
        return {"sim": args.sim, "real": args.real,
                "models": args.models.split(",") if args.models else None,
                "plan.fractions": [float(x) for x in args.fractions.split(",")] if args.fractions else None,
                "plan.seed": args.seed, "field.seed": args.seed, "pretrain.seed": args.seed,
                "pretrain.epochs": args.epochs, "finetune_epochs": args.finetune_epochs}
    return {}


def run(command: str, cfg: dict, out) -> int:
    defaults, fn = COMMANDS[command]
    out = Path(out)
    _begin(out, command, cfg)
    code = fn(cfg, out)
    if code == 0:
        _finish(out)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            saved = json.loads((Path(args.run_dir) / "config.json").read_text())
            return run(saved["command"], saved["config"], args.out)
        defaults, _ = COMMANDS[args.command]
        cfg = resolve(args.command, defaults, args.config, _overrides(args))
        return run(args.command, cfg, args.out)
    except (ConfigError, ValidationError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
