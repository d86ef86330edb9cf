"""INRAS: time-domain acoustic field built on scene bounce points.

Source and receiver enter only through their offsets to fixed bounce points,
scatter/gather/bounce encoders give per-point features S, R, B (N x D), and a
learnable time embedding M (T x D) turns them into per-sample features through
M S^T. A block decoder maps those features (plus an orientation embedding) to
the waveform.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from ..nn import MLP, encoded_size, init_linear, sinusoidal_encoding
from .bounce import BouncePointSet


def orientation_features(theta: torch.Tensor) -> torch.Tensor:
    """(yaw, pitch) -> (cos yaw, sin yaw, cos pitch, sin pitch); no wrap discontinuity."""
    yaw, pitch = theta[..., 0], theta[..., 1]
    return torch.stack([torch.cos(yaw), torch.sin(yaw), torch.cos(pitch), torch.sin(pitch)], -1)


class _PointEncoder(nn.Module):
    """Per-bounce-point MLP whose last linear layer is applied after mixing over points.

    Returns S^T W (D x P) without materialising S; since the last layer is affine,
    (h W_last + b)^T W = W_last^T (h^T W) + b (1^T W).
    """

    def __init__(self, in_dim: int, width: int, depth: int, dim: int, slope: float):
        super().__init__()
        self.body = MLP([in_dim] + [width] * depth, slope)
        self.head = init_linear(nn.Linear(width, dim), slope)
        self.slope = slope

    def features(self, x):
        h = nn.functional.leaky_relu(self.body(x), self.slope)
        return self.head(h)

    def mixed(self, x, mix):
        # x: (..., N, in), mix: (N, P) -> (..., D, P)
        h = nn.functional.leaky_relu(self.body(x), self.slope)
        hm = torch.einsum("...nw,np->...wp", h, mix)
        return torch.einsum("dw,...wp->...dp", self.head.weight, hm) + \
            self.head.bias[:, None] * mix.sum(0)


class InrasField(nn.Module):
    kind = "inras"

    def __init__(self, bounce: BouncePointSet | np.ndarray, n_samples: int, room_origin=(0.0, 0.0, 0.0),
                 room_scale: float = 1.0, dim: int = 64, enc_width: int = 128, enc_depth: int = 2,
                 dec_width: int = 256, dec_depth: int = 3, block: int = 32, channels: int = 2,
                 n_octaves: int = 4, use_orientation: bool = True, ori_dim: int = 32,
                 slope: float = 0.1):
        super().__init__()
        points = bounce.points if isinstance(bounce, BouncePointSet) else np.asarray(bounce)
        if n_samples % block:
            raise ValueError(f"n_samples {n_samples} must be a multiple of block {block}")
        self.n_samples, self.block, self.channels = n_samples, block, channels
        self.n_octaves, self.use_orientation = n_octaves, use_orientation
        self.config = dict(n_samples=n_samples, room_scale=float(room_scale), dim=dim,
                           enc_width=enc_width, enc_depth=enc_depth, dec_width=dec_width,
                           dec_depth=dec_depth, block=block, channels=channels,
                           n_octaves=n_octaves, use_orientation=use_orientation, ori_dim=ori_dim,
                           slope=slope)
        self.register_buffer("points", torch.as_tensor(points, dtype=torch.float32))
        self.register_buffer("origin", torch.as_tensor(room_origin, dtype=torch.float32))
        self.register_buffer("output_scale", torch.ones(()))
        self.room_scale = float(room_scale)
        n = len(points)
        in_dim = encoded_size(3, n_octaves)
        self.scatter = _PointEncoder(in_dim, enc_width, enc_depth, dim, slope)
        self.gather = _PointEncoder(in_dim, enc_width, enc_depth, dim, slope)
        self.bounce = _PointEncoder(in_dim, enc_width, enc_depth, dim, slope)
        # bounce-axis mixing (N -> P channels) for each of S, R, B
        self.mix = nn.Parameter(torch.randn(3, n, channels) / math.sqrt(n))
        self.time_embedding = nn.Parameter(torch.randn(n_samples, dim) / math.sqrt(dim))
        # orientation embedding, appended to every decoder block
        self.orientation = MLP([4, ori_dim, ori_dim], slope) if use_orientation else None
        ori = ori_dim if use_orientation else 0
        self.decoder = MLP([block * 3 * channels + ori] + [dec_width] * dec_depth + [block], slope)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def _encode(self, d):
        return sinusoidal_encoding(d / self.room_scale, self.n_octaves)

    def forward(self, s: torch.Tensor, r: torch.Tensor, theta: torch.Tensor | None = None,
                points: torch.Tensor | None = None) -> torch.Tensor:
        """(B,3), (B,3), (B,2) -> (B, T) waveforms."""
        if points is not None and points.shape != self.points.shape:
            raise ValueError(f"bounce set has {points.shape[0]} points, field was built with {self.n_points}")
        bp = self.points if points is None else points
        s = torch.as_tensor(s, dtype=bp.dtype)
        r = torch.as_tensor(r, dtype=bp.dtype)
        squeeze = s.dim() == 1
        if squeeze:
            s, r = s[None], r[None]
            theta = None if theta is None else torch.as_tensor(theta)[None]
        ds = s[:, None, :] - bp
        dr = r[:, None, :] - bp
        Ws, Wr, Wb = self.mix[0], self.mix[1], self.mix[2]
        S = self.scatter.mixed(self._encode(ds), Ws)                    # (B, D, P)
        R = self.gather.mixed(self._encode(dr), Wr)
        Bf = self.bounce.mixed(self._encode(bp - self.origin), Wb)      # (D, P)
        M = self.time_embedding
        feats = torch.cat([M @ S, M @ R, (M @ Bf).expand(S.shape[0], -1, -1)], -1)  # (B, T, 3P)
        nb = self.n_samples // self.block
        x = feats.reshape(S.shape[0], nb, self.block * 3 * self.channels)
        if self.use_orientation:
            if theta is None:
                raise ValueError("orientation-aware field needs theta")
            o = orientation_features(torch.as_tensor(theta, dtype=x.dtype))
            o = nn.functional.leaky_relu(self.orientation(o), self.orientation.negative_slope)
            x = torch.cat([x, o[:, None, :].expand(-1, nb, -1)], -1)
        y = self.decoder(x).reshape(S.shape[0], self.n_samples) * self.output_scale
        return y[0] if squeeze else y

    def per_point_features(self, s, r):
        """Full S, R, B (N x D) for inspection; not used on the training path."""
        bp = self.points
        s = torch.as_tensor(s, dtype=bp.dtype)
        r = torch.as_tensor(r, dtype=bp.dtype)
        return (self.scatter.features(self._encode(s - bp)),
                self.gather.features(self._encode(r - bp)),
                self.bounce.features(self._encode(bp - self.origin)))
