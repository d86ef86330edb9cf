"""NAF: log-magnitude spectrogram field with a learnable grid of local features."""

from __future__ import annotations

import warnings

import torch
from torch import nn

from ..nn import MLP, encoded_size, init_linear, sinusoidal_encoding
from ..roomsim import ClampWarning
from .inras import orientation_features


def trilinear_weights(u: torch.Tensor, cells):
    """Corner indices (..., 8, 3) and weights (..., 8) for lattice coordinates ``u``.

    ``u`` is in cell units, already clamped to [0, cells].
    """
    cells_t = torch.as_tensor(cells, device=u.device)
    i0 = torch.minimum(torch.floor(u).long(), cells_t - 1).clamp_min(0)
    t = u - i0.to(u.dtype)
    idx, wts = [], []
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                c = torch.tensor([cx, cy, cz], device=u.device)
                idx.append(i0 + c)
                w = torch.where(c.bool(), t, 1 - t)
                wts.append(w.prod(-1))
    return torch.stack(idx, -2), torch.stack(wts, -1)


class NafField(nn.Module):
    kind = "naf"

    def __init__(self, dims, n_freq: int, n_frames: int, cells=(16, 16, 8), features: int = 64,
                 hidden: int = 256, depth: int = 4, n_octaves: int = 8, use_orientation: bool = True,
                 slope: float = 0.1):
        super().__init__()
        self.n_freq, self.n_frames = n_freq, n_frames
        self.cells = tuple(int(c) for c in cells)
        self.n_octaves, self.use_orientation = n_octaves, use_orientation
        self.config = dict(dims=[float(d) for d in dims], n_freq=n_freq, n_frames=n_frames,
                           cells=list(self.cells), features=features, hidden=hidden, depth=depth,
                           n_octaves=n_octaves, use_orientation=use_orientation, slope=slope)
        self.register_buffer("dims", torch.as_tensor(dims, dtype=torch.float32))
        self.register_buffer("output_bias", torch.zeros(()))
        nx, ny, nz = self.cells
        self.grid = nn.Parameter(torch.randn(nx + 1, ny + 1, nz + 1, features) * 0.1)
        pos = encoded_size(3, n_octaves)
        ctx = 2 * features + 2 * pos + (4 if use_orientation else 0)
        enc1 = encoded_size(1, n_octaves)
        self.ctx_in = init_linear(nn.Linear(ctx, hidden), slope)
        self.k_in = nn.Linear(enc1, hidden, bias=False)
        self.f_in = nn.Linear(enc1, hidden, bias=False)
        init_linear(self.k_in, slope)
        init_linear(self.f_in, slope)
        self.trunk = MLP([hidden] * depth + [1], slope)
        self.slope = slope
        self.clamped = False

    def lattice_coords(self, p: torch.Tensor) -> torch.Tensor:
        u = p / self.dims * torch.as_tensor(self.cells, dtype=p.dtype)
        hi = torch.as_tensor(self.cells, dtype=p.dtype)
        if bool(((u < 0) | (u > hi)).any()):
            self.clamped = True
            warnings.warn("query outside the feature grid; clamped to the boundary",
                          ClampWarning, stacklevel=3)
        return torch.minimum(u.clamp_min(0), hi)

    def grid_features(self, p: torch.Tensor) -> torch.Tensor:
        idx, w = trilinear_weights(self.lattice_coords(p), self.cells)
        g = self.grid[idx[..., 0], idx[..., 1], idx[..., 2]]  # (..., 8, C)
        return (w[..., None] * g).sum(-2)

    def _context(self, s, r, theta):
        s = torch.as_tensor(s, dtype=self.grid.dtype)
        r = torch.as_tensor(r, dtype=self.grid.dtype)
        scale = self.dims.max()
        parts = [self.grid_features(s), self.grid_features(r),
                 sinusoidal_encoding(s / scale, self.n_octaves),
                 sinusoidal_encoding(r / scale, self.n_octaves)]
        if self.use_orientation:
            if theta is None:
                raise ValueError("orientation-aware field needs theta")
            parts.append(orientation_features(torch.as_tensor(theta, dtype=s.dtype)))
        return self.ctx_in(torch.cat(parts, -1))

    def _axis(self, idx, n, layer):
        x = idx.to(self.grid.dtype) / max(n - 1, 1)
        return layer(sinusoidal_encoding(x[..., None], self.n_octaves))

    def forward(self, s, r, theta=None, k=None, f=None) -> torch.Tensor:
        """Log-magnitudes at (k, f) index pairs of shape (B, P), or the full (B, F, K) grid."""
        a = self._context(s, r, theta)  # (B, H)
        if k is None:
            hk = self._axis(torch.arange(self.n_frames), self.n_frames, self.k_in)  # (K, H)
            hf = self._axis(torch.arange(self.n_freq), self.n_freq, self.f_in)     # (F, H)
            h = a[:, None, None, :] + hf[None, :, None, :] + hk[None, None, :, :]
        else:
            h = a[:, None, :] + self._axis(k, self.n_frames, self.k_in) + \
                self._axis(f, self.n_freq, self.f_in)
        h = nn.functional.leaky_relu(h, self.slope)
        return self.trunk(h)[..., 0] + self.output_bias
