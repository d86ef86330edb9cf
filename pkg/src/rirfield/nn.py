"""Training plumbing on top of torch autograd: AdamW, the exponential LR schedule,
finite-difference gradient checks, initialisation and checkpoints."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from torch.optim.optimizer import Optimizer

LR_DECAY = 0.98


class AdamW(Optimizer):
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2,
                 require_grads=True):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)
        self.require_grads = require_grads

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            lr, eps, wd = group["lr"], group["eps"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    if self.require_grads:
                        raise RuntimeError(
                            f"parameter of shape {tuple(p.shape)} has no gradient; call backward() first")
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["exp_avg"], state["exp_avg_sq"]
                m.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)
                m_hat = m / (1 - beta1 ** t)
                v_hat = v / (1 - beta2 ** t)
                if wd:
                    p.mul_(1 - lr * wd)
                p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
        return loss


def lr_at_epoch(base_lr: float, epoch: int, gamma: float = LR_DECAY) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return base_lr * gamma ** epoch


def set_lr(optimizer: Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def grad_check(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
               eps: float = 1e-4, atol: float = 1e-8, probes: int | None = None,
               seed: int = 0, kink_tol: float | None = None) -> float:
    """Largest elementwise relative gap between autograd and central differences.

    ``fn`` must return a scalar and read ``params`` (float64 leaves with
    ``requires_grad``). Entries where both gradients are below ``atol`` count as 0.
    With ``probes`` only that many seeded entries per tensor are perturbed.
    With ``kink_tol`` an entry is skipped when its forward and backward one-sided
    slopes differ by more than ``kink_tol`` relative, i.e. a non-differentiable
    point (an L1 or ReLU kink) lies inside the finite-difference stencil.
    """
    for p in params:
        p.grad = None
    out = fn()
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued computation")
    base = out.item()
    grads = torch.autograd.grad(out, list(params), allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            entries = range(flat.numel())
            if probes is not None and probes < flat.numel():
                entries = np.random.default_rng(seed).choice(flat.numel(), probes, replace=False)
            for i in entries:
                i = int(i)
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                ana = g.reshape(-1)[i].item()
                scale = max(abs(num), abs(ana))
                if kink_tol is not None:
                    fwd, bwd = (up - base) / eps, (base - down) / eps
                    if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), atol):
                        continue
                if scale > atol:
                    worst = max(worst, abs(num - ana) / scale)
    return worst


def init_linear(layer: nn.Linear, negative_slope: float = 0.0) -> nn.Linear:
    """Kaiming-uniform weights scaled by fan-in; zero bias."""
    nn.init.kaiming_uniform_(layer.weight, a=negative_slope, nonlinearity="leaky_relu")
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


class MLP(nn.Module):
    """Linear layers with leaky-ReLU between them (none after the last)."""

    def __init__(self, sizes: Sequence[int], negative_slope: float = 0.1):
        super().__init__()
        self.negative_slope = negative_slope
        self.layers = nn.ModuleList(
            init_linear(nn.Linear(a, b), negative_slope) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nn.functional.leaky_relu(x, self.negative_slope)
        return x


def sinusoidal_encoding(x: torch.Tensor, n_octaves: int, include_input: bool = True) -> torch.Tensor:
    """[x, sin(2^j pi x), cos(2^j pi x)] for j < n_octaves, over the last axis."""
    freqs = (2.0 ** torch.arange(n_octaves, dtype=x.dtype, device=x.device)) * math.pi
    ang = x[..., None] * freqs
    parts = [torch.sin(ang).flatten(-2), torch.cos(ang).flatten(-2)]
    if include_input:
        parts.insert(0, x)
    return torch.cat(parts, dim=-1)


def encoded_size(dim: int, n_octaves: int, include_input: bool = True) -> int:
    return dim * (2 * n_octaves + int(include_input))


def save_checkpoint(path, model: nn.Module, meta: dict | None = None) -> None:
    """Write ``<path>.bin`` (concatenated little-endian tensors) and ``<path>.json`` (header)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset, blobs = [], 0, []
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    path.with_suffix(".bin").write_bytes(b"".join(blobs))
    header = {"tensors": entries, "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    state = {}
    for e in header["tensors"]:
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(np.dtype(e["dtype"])))
    return state, header["meta"]


def load_checkpoint(path, model: nn.Module) -> dict:
    state, meta = read_checkpoint(path)
    model.load_state_dict(state)
    return meta
