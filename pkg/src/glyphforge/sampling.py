"""Ancestral reverse diffusion conditioned on a reference glyph and a style vector.

Fewer steps than the training discretization are supported by planning a
descending subset of timesteps and deriving the posterior between each pair
of consecutive planned steps from the cumulative ``alpha_bar`` values.

Noise is coupled across step budgets. Each seed defines one noise map per
training timestep, and a jump over several timesteps uses a unit-variance
weighted sum of the maps it skips. A full-length plan therefore reproduces
the baseline chain exactly, and shorter plans follow the same noise path at
a coarser resolution.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch

from .dataset import GlyphBitmap, denormalize
from .denoiser import lookup_style, mix_styles
from .diffusion import VARIANCE_MODES, NoiseSchedule, p_step, posterior_coefficients, step_sigma
from .errors import InvalidConfig, InvalidSteps, ShapeMismatch


class NoisePredictor(Protocol):
    def __call__(self, x_t: torch.Tensor, reference: torch.Tensor, t: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        ...


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    variance_mode: str = "beta_tilde"
    clamp_x0: bool = True
    seed: int = 0

    def validate(self, T: int | None = None) -> "SamplerConfig":
        if int(self.steps) != self.steps or self.steps < 1 or (T is not None and self.steps > T):
            raise InvalidSteps(f"steps must be an integer in [1, {T if T is not None else 'T'}], got {self.steps!r}")
        if self.variance_mode not in VARIANCE_MODES:
            raise InvalidConfig(f"variance_mode must be one of {VARIANCE_MODES}")
        return self


def plan_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced, strictly decreasing steps from ``T`` down to 1.

    A single-step budget is the plan ``[1]``.
    """
    if int(steps) != steps or not (1 <= steps <= T):
        raise InvalidSteps(f"steps must be an integer in [1, {T}], got {steps!r}")
    if steps == 1:
        return [1]
    raw = np.rint(np.linspace(T, 1, int(steps))).astype(int)
    plan = sorted(set(raw.tolist()), reverse=True)
    return plan


def _noise_like(shape, generators: Sequence[torch.Generator]) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=g) for g in generators])


def jump_noise_weights(t: int, s: int, schedule: NoiseSchedule, variance_mode: str = "beta_tilde") -> np.ndarray:
    """Unit-norm weights of the per-timestep noise maps ``u = t, t-1, ..., s+1``.

    The weight of map ``u`` is its one-step standard deviation carried down to
    step ``s`` through the ``x_t`` coefficients of the later one-step
    posteriors. For ``s = t - 1`` the result is ``[1.0]``.
    """
    if not (1 <= s < t <= schedule.T):
        raise InvalidSteps(f"need 1 <= s < t <= T, got t={t}, s={s}")
    weights = []
    carry = 1.0
    for u in range(s + 1, t + 1):
        weights.append(carry * step_sigma(u, schedule, variance_mode, s=u - 1))
        carry *= posterior_coefficients(u, schedule, s=u - 1)[1]
    w = np.array(weights[::-1])
    return w / np.sqrt(np.sum(w * w))


def _jump_noise(shape, generators: Sequence[torch.Generator], weights: np.ndarray) -> torch.Tensor:
    """Draw one map per skipped timestep (newest first) and combine them."""
    total = None
    for w in weights:
        z = float(w) * _noise_like(shape, generators)
        total = z if total is None else total + z
    return total


@torch.no_grad()
def sample_array(
    net: NoisePredictor,
    references: torch.Tensor | np.ndarray,
    styles: torch.Tensor,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    seeds: Sequence[int] | None = None,
) -> torch.Tensor:
    """Batched sampler returning normalized ``(B, 1, S, S)`` float tensors.

    Every item draws from its own generator seeded with ``seeds[i]`` (default
    ``config.seed`` for all), so a glyph's noise does not depend on its batch
    neighbours.
    """
    config.validate(schedule.T)
    refs = torch.as_tensor(np.asarray(references) if isinstance(references, np.ndarray) else references,
                           dtype=torch.float32)
    if refs.dim() == 2:
        refs = refs[None, None]
    elif refs.dim() == 3:
        refs = refs[:, None]
    B = refs.shape[0]
    side = getattr(getattr(net, "config", None), "input_side", refs.shape[-1])
    if tuple(refs.shape[1:]) != (1, side, side):
        raise ShapeMismatch(f"reference must be {side}x{side}, got {tuple(refs.shape[1:])}")
    styles = torch.as_tensor(styles, dtype=torch.float32)
    if styles.dim() == 1:
        styles = styles[None].expand(B, -1)
    seeds = [config.seed] * B if seeds is None else list(seeds)
    if len(seeds) != B:
        raise ShapeMismatch(f"{len(seeds)} seeds for {B} references")
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]

    item_shape = tuple(refs.shape[1:])
    x = _noise_like(item_shape, gens)
    plan = plan_timesteps(schedule.T, config.steps)
    for i, t in enumerate(plan):
        s = plan[i + 1] if i + 1 < len(plan) else 0
        eps = net(x, refs, torch.full((B,), t, dtype=torch.long), styles)
        if s > 0:
            noise = _jump_noise(item_shape, gens, jump_noise_weights(t, s, schedule, config.variance_mode))
        else:
            noise = torch.zeros_like(x)
        x = p_step(x, eps, t, noise, schedule, config.variance_mode, config.clamp_x0, s=s)
    return x


def _net_eval(net):
    if isinstance(net, torch.nn.Module):
        net.eval()
    return net


def sample(
    net: NoisePredictor,
    reference,
    style: torch.Tensor,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    codepoint: int = -1,
) -> GlyphBitmap:
    """Generate one glyph; deterministic in ``config.seed``."""
    if isinstance(reference, GlyphBitmap):
        codepoint = reference.codepoint if codepoint == -1 else codepoint
        reference = 1.0 - 2.0 * reference.pixels
    x = sample_array(_net_eval(net), np.asarray(reference, dtype=np.float32), style, config, schedule)
    return denormalize(x[0, 0].numpy(), codepoint)


def sample_many(net, references: Sequence, style: torch.Tensor, config: SamplerConfig, schedule: NoiseSchedule,
                seeds: Sequence[int] | None = None, codepoints: Sequence[int] | None = None) -> list[GlyphBitmap]:
    """Batched :func:`sample` over several references sharing one style."""
    arrs = []
    cps = []
    for ref in references:
        if isinstance(ref, GlyphBitmap):
            cps.append(ref.codepoint)
            ref = 1.0 - 2.0 * ref.pixels
        else:
            cps.append(-1)
        arrs.append(np.asarray(ref, dtype=np.float32).reshape(ref.shape[-2:]))
    if codepoints is not None:
        cps = list(codepoints)
    x = sample_array(_net_eval(net), np.stack(arrs), style, config, schedule, seeds)
    return [denormalize(x[i, 0].numpy(), cps[i]) for i in range(len(arrs))]


def sample_interpolated(
    net,
    reference,
    style_ids: Sequence[int],
    weights: Sequence[float],
    config: SamplerConfig,
    schedule: NoiseSchedule,
) -> GlyphBitmap:
    """Sample with the convex mixture of the listed style embeddings."""
    style = mix_styles([lookup_style(net, i) for i in style_ids], weights)
    return sample(net, reference, style, config, schedule)


def sample_zero_shot(net, reference, style_id: int, config: SamplerConfig, schedule: NoiseSchedule) -> GlyphBitmap:
    """:func:`sample` for references from scripts never seen in training.

    No membership check is made; the name exists so evaluation code can say
    what it is doing.
    """
    return sample(net, reference, lookup_style(net, style_id), config, schedule)
