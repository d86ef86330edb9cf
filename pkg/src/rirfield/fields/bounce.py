from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..roomsim import ClampWarning, ShoeboxRoom


@dataclass(frozen=True)
class BouncePointSet:
    points: np.ndarray   # (N, 3) metres, room frame
    normals: np.ndarray  # (N, 3) inward unit normals
    radius: float        # achieved Poisson-disk radius
    mode: str = "3d"

    def __len__(self):
        return len(self.points)


def _faces(room: ShoeboxRoom):
    """(origin, u edge, v edge, inward normal) for the six walls."""
    lx, ly, lz = room.dims
    ex, ey, ez = np.eye(3)
    return [
        (np.zeros(3), ly * ey, lz * ez, ex),
        (lx * ex, ly * ey, lz * ez, -ex),
        (np.zeros(3), lx * ex, lz * ez, ey),
        (ly * ey, lx * ex, lz * ez, -ey),
        (np.zeros(3), lx * ex, ly * ey, ez),
        (lz * ez, lx * ex, ly * ey, -ez),
    ]


def _dart_throw(draw, n: int, radius: float, rng, max_trials: int):
    pts, normals = [], []
    shrunk = False
    while True:
        trials = 0
        while len(pts) < n and trials < max_trials:
            cand, normal = draw(rng, 256)
            for c, nm in zip(cand, normal):
                trials += 1
                if not pts or np.min(np.sum((np.asarray(pts) - c) ** 2, axis=1)) >= radius ** 2:
                    pts.append(c)
                    normals.append(nm)
                    if len(pts) == n:
                        break
        if len(pts) == n:
            break
        radius *= 0.9
        shrunk = True
    if shrunk:
        warnings.warn(f"Poisson radius shrunk to {radius:.3f} m to fit {n} points",
                      ClampWarning, stacklevel=3)
    return np.asarray(pts), np.asarray(normals), radius


def sample_bounce_points(room: ShoeboxRoom, n: int = 256, seed: int = 0, mode: str = "3d",
                         height: float = 1.5, radius: float | None = None) -> BouncePointSet:
    """Poisson-disk sample of ``n`` bounce points on the room boundary.

    ``mode="3d"`` samples the six faces area-weighted; ``mode="2d"`` samples the
    wall perimeter at a fixed ``height``. If ``n`` points do not fit at the
    requested radius, the radius shrinks by 10% steps and a ClampWarning is issued.
    """
    if n < 1:
        raise ValueError("need at least one bounce point")
    rng = np.random.default_rng(seed)
    if mode == "3d":
        faces = _faces(room)
        areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v, _ in faces])
        probs = areas / areas.sum()
        if radius is None:
            radius = 0.75 * np.sqrt(areas.sum() / n)

        def draw(rng, m):
            idx = rng.choice(6, size=m, p=probs)
            uv = rng.random((m, 2))
            o = np.stack([faces[i][0] for i in idx])
            u = np.stack([faces[i][1] for i in idx])
            v = np.stack([faces[i][2] for i in idx])
            return o + uv[:, :1] * u + uv[:, 1:] * v, np.stack([faces[i][3] for i in idx])
    elif mode == "2d":
        lx, ly, lz = room.dims
        if not 0 <= height <= lz:
            raise ValueError(f"height {height} outside room height {lz}")
        corners = np.array([[0, 0], [lx, 0], [lx, ly], [0, ly], [0, 0]], dtype=float)
        inward = np.array([[0, 1], [-1, 0], [0, -1], [1, 0]], dtype=float)
        seg_len = np.linalg.norm(np.diff(corners, axis=0), axis=1)
        cum = np.r_[0.0, np.cumsum(seg_len)]
        if radius is None:
            radius = 0.6 * cum[-1] / n

        def draw(rng, m):
            s = rng.random(m) * cum[-1]
            seg = np.minimum(np.searchsorted(cum, s, side="right") - 1, 3)
            frac = (s - cum[seg]) / seg_len[seg]
            xy = corners[seg] + frac[:, None] * (corners[seg + 1] - corners[seg])
            pts = np.column_stack([xy, np.full(m, height)])
            nrm = np.column_stack([inward[seg], np.zeros(m)])
            return pts, nrm
    else:
        raise ValueError(f"unknown bounce sampling mode {mode!r}")
    pts, normals, r = _dart_throw(draw, n, float(radius), rng, max_trials=60 * n)
    return BouncePointSet(pts, normals, r, mode)


def relative_distances(p, bp: BouncePointSet | np.ndarray) -> np.ndarray:
    """Offsets ``p - b_i`` to every bounce point: (N, 3), or (B, N, 3) for batched ``p``."""
    points = bp.points if isinstance(bp, BouncePointSet) else np.asarray(bp)
    p = np.asarray(p, dtype=float)
    return p[..., None, :] - points
