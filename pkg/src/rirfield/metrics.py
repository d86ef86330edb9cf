"""Acoustic evaluation metrics: energy decay curve, C50, T60, EDT, STFT error."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .signal import StftConfig, Waveform, stft_complex

EDC_FLOOR_DB = -100.0
C50_CEILING_DB = 60.0
ONSET_FRACTION = 0.01


class DegenerateSignalError(ValueError):
    pass


class InsufficientDecayError(ValueError):
    pass


class CeilingWarning(UserWarning):
    pass


def _samples(h) -> tuple[np.ndarray, int | None]:
    if isinstance(h, Waveform):
        return np.asarray(h.samples, dtype=float), h.sample_rate
    return np.asarray(h, dtype=float), None


def schroeder_edc(h) -> np.ndarray:
    """Backward-integrated energy decay curve in dB, floored at -100 dB."""
    x, _ = _samples(h)
    energy = x ** 2
    total = energy.sum()
    if x.size == 0 or total <= 0:
        raise DegenerateSignalError("energy decay curve needs a signal with nonzero energy")
    tail = np.cumsum(energy[::-1])[::-1]
    with np.errstate(divide="ignore"):
        edc = 10 * np.log10(tail / total)
    edc[0] = 0.0
    edc = np.maximum(edc, EDC_FLOOR_DB)
    # cumulative sums can wobble by an ulp; enforce the nonincreasing contract
    return np.minimum.accumulate(edc)


def onset_index(h) -> int:
    """First sample reaching 1% of the peak magnitude."""
    x, _ = _samples(h)
    peak = np.abs(x).max()
    if peak <= 0:
        raise DegenerateSignalError("signal has no energy")
    return int(np.argmax(np.abs(x) >= ONSET_FRACTION * peak))


def c50(h: Waveform) -> float:
    x = np.asarray(h.samples, dtype=float)
    start = onset_index(x)
    split = start + int(round(0.05 * h.sample_rate))
    early = float((x[start:split] ** 2).sum())
    late = float((x[split:] ** 2).sum())
    if late <= 0 or 10 * math.log10(early / late) > C50_CEILING_DB:
        warnings.warn("C50 clamped to ceiling (no late energy)", CeilingWarning, stacklevel=2)
        return C50_CEILING_DB
    return 10 * math.log10(early / late)


def _decay_time(edc: np.ndarray, sr: int, top: float, bottom: float, what: str) -> float:
    # fit the contiguous stretch from the first crossing of `top` to the first crossing of `bottom`
    below_bottom = np.flatnonzero(edc <= bottom)
    if below_bottom.size == 0:
        raise InsufficientDecayError(f"{what}: decay curve never reaches {bottom} dB")
    end = below_bottom[0]
    start = int(np.argmax(edc <= top)) if top < 0 else 0
    seg = np.arange(start, end + 1)
    seg = seg[(edc[seg] <= top) & (edc[seg] >= bottom)]
    if seg.size < 2:
        raise InsufficientDecayError(f"{what}: no decay samples between {top} and {bottom} dB")
    slope, _ = np.polyfit(seg / sr, edc[seg], 1)
    if slope >= 0:
        raise InsufficientDecayError(f"{what}: decay curve is not decreasing")
    return -60.0 / slope


def _edc_from_onset(h: Waveform) -> np.ndarray:
    x = np.asarray(h.samples, dtype=float)
    return schroeder_edc(x[onset_index(x):])


def t60(h: Waveform) -> float:
    """Reverberation time from a line fit to the decay curve between -5 and -25 dB."""
    return _decay_time(_edc_from_onset(h), h.sample_rate, -5.0, -25.0, "T60")


def edt(h: Waveform) -> float:
    """Early decay time from a line fit to the decay curve between 0 and -10 dB."""
    return _decay_time(_edc_from_onset(h), h.sample_rate, 0.0, -10.0, "EDT")


def _fallback_decay_time(h: Waveform, top: float) -> float:
    # predictions that never decay far enough: fit whatever range they reach
    edc = _edc_from_onset(h)
    reached = edc[edc > EDC_FLOOR_DB]
    bottom = reached.min() if reached.size else EDC_FLOOR_DB
    if bottom >= top:
        top = 0.0
    try:
        return _decay_time(edc, h.sample_rate, top, max(bottom, EDC_FLOOR_DB), "fallback")
    except InsufficientDecayError:
        return len(h) / h.sample_rate


def stft_error(pred: Waveform, gt: Waveform, cfg: StftConfig | None = None) -> float:
    """Mean absolute difference of log-magnitude spectrograms in dB.

    Magnitudes are floored at 1e-3 of the ground-truth peak magnitude.
    """
    if len(pred) != len(gt) or pred.sample_rate != gt.sample_rate:
        raise ValueError(
            f"pred/gt mismatch: {len(pred)}@{pred.sample_rate} vs {len(gt)}@{gt.sample_rate}")
    cfg = cfg or StftConfig.for_sample_rate(gt.sample_rate)
    P = np.abs(stft_complex(pred.samples, cfg))
    G = np.abs(stft_complex(gt.samples, cfg))
    peak = G.max()
    eps = 1e-3 * peak if peak > 0 else 1e-3
    return float(np.mean(np.abs(20 * np.log10(P + eps) - 20 * np.log10(G + eps))))


@dataclass
class MetricReport:
    stft_err: float
    c50_err: float
    edt_err: float
    t60_err: float
    n_pairs: int = 0
    excluded: dict = field(default_factory=dict)
    pred_fallbacks: int = 0

    def as_row(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "excluded"}


@dataclass
class PairMetrics:
    pair_id: str
    stft_err: float
    c50_err: float
    edt_err: float
    t60_err: float


def _metric_or_none(fn, h):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CeilingWarning)
            return fn(h)
    except (InsufficientDecayError, DegenerateSignalError):
        return None


def pair_metrics(pred: Waveform, gt: Waveform, cfg: StftConfig | None = None,
                 pair_id: str = "") -> tuple[PairMetrics, int]:
    """Per-pair absolute errors; NaN where the ground-truth metric is undefined.

    Returns the metrics and the number of prediction-side fallbacks used.
    """
    fallbacks = 0
    errs = {}
    for name, fn, top in (("c50", c50, None), ("edt", edt, 0.0), ("t60", t60, -5.0)):
        g = _metric_or_none(fn, gt)
        if g is None:
            errs[name] = math.nan
            continue
        p = _metric_or_none(fn, pred)
        if p is None:
            fallbacks += 1
            p = -C50_CEILING_DB if top is None else (
                _fallback_decay_time(pred, top) if np.any(pred.samples) else len(pred) / pred.sample_rate)
        if name == "t60":
            errs[name] = abs(p - g) / g * 100.0
        else:
            errs[name] = abs(p - g)
    return PairMetrics(pair_id, stft_error(pred, gt, cfg), errs["c50"], errs["edt"], errs["t60"]), fallbacks


def evaluate(pred_set: Sequence[Waveform], gt_set: Sequence[Waveform],
             cfg: StftConfig | None = None, ids: Sequence[str] | None = None,
             per_pair: list | None = None) -> MetricReport:
    """Mean metric errors over aligned (prediction, ground truth) pairs.

    Pairs whose ground-truth metric is undefined are left out of that metric's
    mean and counted in ``excluded``. If ``per_pair`` is a list, per-pair rows
    are appended to it.
    """
    if len(pred_set) == 0 or len(pred_set) != len(gt_set):
        raise ValueError(f"need equally sized nonempty sets, got {len(pred_set)} and {len(gt_set)}")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(gt_set))]
    rows, fallbacks = [], 0
    for pid, p, g in zip(ids, pred_set, gt_set):
        row, fb = pair_metrics(p, g, cfg, pid)
        rows.append(row)
        fallbacks += fb
    if per_pair is not None:
        per_pair.extend(rows)
    report = {}
    excluded = {}
    for name in ("stft_err", "c50_err", "edt_err", "t60_err"):
        vals = np.array([getattr(r, name) for r in rows])
        ok = ~np.isnan(vals)
        excluded[name] = int((~ok).sum())
        report[name] = float(vals[ok].mean()) if ok.any() else math.nan
    return MetricReport(**report, n_pairs=len(rows), excluded=excluded, pred_fallbacks=fallbacks)


def write_metrics_csv(path, rows: Iterable[PairMetrics], report: MetricReport | None = None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "stft_err", "c50_err", "edt_err", "t60_err"])
        for r in rows:
            w.writerow([r.pair_id, r.stft_err, r.c50_err, r.edt_err, r.t60_err])
        if report is not None:
            w.writerow(["mean", report.stft_err, report.c50_err, report.edt_err, report.t60_err])
