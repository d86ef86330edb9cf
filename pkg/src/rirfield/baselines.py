"""Nearest-neighbour and inverse-distance interpolation over stored training RIRs.

Both baselines first pick the nearest training emitter, then work over the
receivers recorded for that emitter.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .signal import Waveform

EXACT_HIT = 1e-12


class FallbackWarning(UserWarning):
    pass


def _angle_gap(a, b):
    return np.abs((np.asarray(a) - b + np.pi) % (2 * np.pi) - np.pi)


@dataclass
class InterpInfo:
    ids: list
    weights: np.ndarray
    fallback: bool = False


class RirIndex:
    """Immutable lookup over training records grouped by emitter pose.

    Records are sorted canonically at build time, so construction order does
    not affect any query.
    """

    def __init__(self, data):
        if len(data) == 0:
            raise ValueError("cannot build an index over zero records")
        if len(set(data.ids)) != len(data.ids):
            raise ValueError("duplicate record ids in index")
        order = sorted(range(len(data)), key=lambda i: (
            tuple(data.sources[i]), tuple(data.orientations[i]), tuple(data.receivers[i]), data.ids[i]))
        self.ids = [data.ids[i] for i in order]
        self.sources = np.asarray(data.sources, dtype=float)[order]
        self.orientations = np.asarray(data.orientations, dtype=float)[order]
        self.receivers = np.asarray(data.receivers, dtype=float)[order]
        self.waveforms = np.asarray(data.waveforms)[order]
        self.sample_rate = data.sample_rate
        keys = np.hstack([self.sources, self.orientations])
        self.emitters, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        self.groups = [np.flatnonzero(inverse == g) for g in range(len(self.emitters))]
        self.use_pitch = np.ptp(self.emitters[:, 4]) > 0

    def __len__(self):
        return len(self.ids)

    def nearest_emitter(self, s, theta=None) -> int:
        s = np.asarray(s, dtype=float)
        d = np.linalg.norm(self.emitters[:, :3] - s, axis=1)
        cand = np.flatnonzero(d <= d.min() + EXACT_HIT)
        if len(cand) > 1 and theta is not None:
            gap = _angle_gap(self.emitters[cand, 3], theta[0])
            if self.use_pitch:
                gap = np.hypot(gap, _angle_gap(self.emitters[cand, 4], theta[1]))
            cand = cand[gap <= gap.min() + EXACT_HIT]
        return int(cand[0])  # emitters are sorted, so this is canonical

    def _receivers(self, s, r, theta):
        g = self.groups[self.nearest_emitter(s, theta)]
        d = np.linalg.norm(self.receivers[g] - np.asarray(r, dtype=float), axis=1)
        order = np.lexsort((np.arange(len(g)), d))  # stable: distance, then canonical position
        return g[order], d[order]


def nearest_rir(s, r, theta, index: RirIndex) -> Waveform:
    idx, _ = index._receivers(s, r, theta)
    return Waveform(index.waveforms[idx[0]].astype(np.float64), index.sample_rate)


def nearest_rir_id(s, r, theta, index: RirIndex) -> str:
    idx, _ = index._receivers(s, r, theta)
    return index.ids[idx[0]]


def linear_interp_rir(s, r, theta, index: RirIndex, k: int = 4, power: float = 1.0,
                      return_info: bool = False):
    """Inverse-distance-weighted mean of the ``k`` nearest receivers' RIRs.

    An exact receiver hit returns that RIR unchanged. Fewer than ``k`` receivers
    for the matched emitter falls back to all of them with a FallbackWarning.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    idx, d = index._receivers(s, r, theta)
    fallback = len(idx) < k
    if fallback:
        warnings.warn(f"emitter has only {len(idx)} receivers, wanted {k}", FallbackWarning,
                      stacklevel=2)
    idx, d = idx[:k], d[:k]
    if d[0] <= EXACT_HIT:
        idx, w = idx[:1], np.ones(1)
    else:
        w = 1.0 / d ** power
        w = w / w.sum()
    out = Waveform(w @ index.waveforms[idx].astype(np.float64), index.sample_rate)
    if return_info:
        return out, InterpInfo([index.ids[i] for i in idx], w, fallback)
    return out


def predict_baseline(kind: str, index: RirIndex, data, k: int = 4) -> np.ndarray:
    """Baseline predictions for every query pose in ``data`` (n, T)."""
    if kind not in ("nearest", "linear"):
        raise ValueError(f"unknown baseline {kind!r}")
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FallbackWarning)
        for s, r, th in zip(data.sources, data.receivers, data.orientations):
            if kind == "nearest":
                out.append(nearest_rir(s, r, th, index).samples)
            else:
                out.append(linear_interp_rir(s, r, th, index, k).samples)
    return np.asarray(out)
