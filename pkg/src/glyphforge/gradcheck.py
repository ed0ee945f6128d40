"""Finite-difference gradient check for the denoiser.

Perturbing one scalar only changes activations downstream of the module that
owns it, so the forward pass is split into resumable stages and every probe
restarts from the cached state just before its module.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .denoiser import Denoiser


@dataclass
class GradCheckResult:
    names: list[str]
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    total_params: int

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def fraction_checked(self) -> float:
        return len(self.indices) / self.total_params


def relative_error(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


class _StagedForward:
    """The denoiser forward pass as a list of resumable ops."""

    def __init__(self, net: Denoiser, x_t, reference, t, style_id: int):
        self.net = net
        self.x_t, self.reference = x_t, reference
        self.t = torch.as_tensor([t])
        self.style_id = torch.as_tensor([style_id])
        k = net.config.depth
        ops = [("input_conv", None)]
        for i in range(k):
            ops += [("encoder", i), ("down", i)]
        ops.append(("bottleneck", None))
        for j in range(k):
            ops += [("up", j), ("decoder", j)]
        ops.append(("out", None))
        self.ops = ops
        self.owner = {"input_conv": 0, "bottleneck": ops.index(("bottleneck", None)),
                      "out_norm": len(ops) - 1, "out_conv": len(ops) - 1}
        for pos, (name, idx) in enumerate(ops):
            if idx is not None:
                self.owner[f"{name}.{idx}"] = pos

    def start_of(self, param_name: str) -> int | None:
        """Op index to resume from, or None when the conditioning vector changes."""
        parts = param_name.split(".")
        if parts[0] in ("time_mlp", "style_table", "style_proj"):
            return None
        key = parts[0] if parts[0] in self.owner else ".".join(parts[:2])
        return self.owner[key]

    def cond(self) -> torch.Tensor:
        return self.net.condition(self.t, self.net.style_table(self.style_id))

    def run(self, cond, start: int = 0, state=None, cache: list | None = None) -> torch.Tensor:
        net = self.net
        k = net.config.depth
        h, skips = state if state is not None else (None, ())
        skips = list(skips)
        for pos in range(start, len(self.ops)):
            if cache is not None:
                cache.append((h, tuple(skips)))
            name, idx = self.ops[pos]
            if name == "input_conv":
                h = net.input_conv(torch.cat([self.x_t, self.reference], dim=1))
            elif name == "encoder":
                h = net.encoder[idx](h, cond)
                skips.append(h)
            elif name == "down":
                h = net.down[idx](h)
            elif name == "bottleneck":
                h = net.bottleneck(h, cond)
            elif name == "up":
                h = net.up[idx](h)
            elif name == "decoder":
                h = net.decoder[idx](torch.cat([h, skips[k - 1 - idx]], dim=1), cond)
            else:
                h = net.out_conv(F.silu(net.out_norm(h)))
        return h


def _loss(out: torch.Tensor) -> float:
    return float((out * out).sum())


def gradient_check(
    net: Denoiser,
    x_t: torch.Tensor,
    reference: torch.Tensor,
    t: int,
    style_id: int,
    fraction: float = 0.01,
    step: float = 1e-4,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autograd with central differences on a random subset of scalars.

    The scalar objective is the squared norm of the network output. The
    network is converted to float64 in place. ``floor`` bounds the
    denominator of the relative error so that vanishing gradients compare in
    absolute terms.

    The default ``step`` keeps the roundoff of a difference of two losses
    (about one ulp of the loss, divided by ``2 * step``) well under the
    floor. Smaller steps turn structurally zero gradients, such as the key
    bias of attention, into pure rounding noise.
    """
    net.double().eval()
    x_t = x_t.double().reshape(1, 1, *x_t.shape[-2:])
    reference = reference.double().reshape(1, 1, *reference.shape[-2:])
    staged = _StagedForward(net, x_t, reference, t, style_id)

    net.zero_grad()
    out = staged.run(staged.cond())
    (out * out).sum().backward()

    named = list(net.named_parameters())
    sizes = np.array([p.numel() for _, p in named])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    count = max(1, int(np.ceil(fraction * total)))
    flat = np.sort(np.random.default_rng(seed).choice(total, size=count, replace=False))

    names, analytic, numeric = [], [], []
    with torch.no_grad():
        cond = staged.cond()
        cache: list = []
        staged.run(cond, cache=cache)
        for f in flat:
            which = int(np.searchsorted(offsets, f, side="right") - 1)
            name, p = named[which]
            local = int(f - offsets[which])
            start = staged.start_of(name)
            view = p.data.view(-1)
            base = view[local].item()
            values = []
            for sign in (1.0, -1.0):
                view[local] = base + sign * step
                if start is None:
                    values.append(_loss(staged.run(staged.cond())))
                else:
                    values.append(_loss(staged.run(cond, start, cache[start])))
            view[local] = base
            names.append(name)
            analytic.append(p.grad.view(-1)[local].item())
            numeric.append((values[0] - values[1]) / (2 * step))
    analytic, numeric = np.array(analytic), np.array(numeric)
    return GradCheckResult(names, flat, analytic, numeric, relative_error(analytic, numeric, floor), total)
