"""Closed-form DDPM algebra: variance schedule, forward corruption, posterior.

Nothing here knows about neural networks. Every array-valued function works
on numpy arrays and torch tensors alike: per-step coefficients are computed
in float64 as Python floats and then broadcast onto whatever array type the
caller passes in.

Step indices are 1-based, ``t in [1, T]``, and ``alpha_bar(0) == 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import InvalidRange, NoiseAtFinalStep, ShapeMismatch

VARIANCE_MODES = ("beta", "beta_tilde")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_variance: np.ndarray
    form: str = "linear"

    def abar(self, t: int) -> float:
        """``alpha_bar`` at 1-based step ``t``; step 0 is the clean data."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def params(self) -> dict:
        # derived arrays are never serialized; they are recomputed on load
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "form": self.form}

    @classmethod
    def from_params(cls, params: dict) -> "NoiseSchedule":
        form = params.get("form", "linear")
        if form != "linear":
            raise InvalidRange(f"unsupported schedule form {form!r}")
        return make_schedule(int(params["T"]), float(params["beta_start"]), float(params["beta_end"]))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, NoiseSchedule) and self.params() == other.params()

    def __hash__(self) -> int:
        return hash(tuple(sorted(self.params().items())))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise InvalidRange(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidRange(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    if T == 1:
        beta[0] = beta_start
    alpha = 1.0 - beta
    # sequential product so that alpha_bar[t] == alpha_bar[t-1] * alpha[t] bit for bit
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_variance = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    for arr in (beta, alpha, alpha_bar, posterior_variance):
        arr.setflags(write=False)
    return NoiseSchedule(
        T=T,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_variance=posterior_variance,
    )


def _check_step(t: int, schedule: NoiseSchedule) -> int:
    if int(t) != t or not (1 <= t <= schedule.T):
        raise InvalidRange(f"step {t!r} outside [1, {schedule.T}]")
    return int(t)


def _check_shapes(*arrays: Any) -> None:
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) > 1:
        raise ShapeMismatch(f"shape mismatch: {sorted(shapes)}")


def q_sample(x0, t: int, eps, schedule: NoiseSchedule):
    """Draw ``x_t ~ q(x_t | x_0)`` given the standard-normal draw ``eps``."""
    _check_shapes(x0, eps)
    t = _check_step(t, schedule)
    ab = schedule.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0_from_eps(x_t, eps_hat, t: int, schedule: NoiseSchedule):
    """Exact inverse of :func:`q_sample` in ``x_0``."""
    _check_shapes(x_t, eps_hat)
    t = _check_step(t, schedule)
    ab = schedule.abar(t)
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def posterior_coefficients(t: int, schedule: NoiseSchedule, s: int | None = None) -> tuple[float, float, float]:
    """Coefficients of ``q(x_s | x_t, x_0)`` for ``0 <= s < t``.

    Returns ``(coef_x0, coef_xt, beta_tilde)``. With ``s = t - 1`` (the
    default) these are the one-step DDPM posterior; for larger gaps the
    effective step variance ``1 - abar_t / abar_s`` replaces ``beta_t``.
    """
    t = _check_step(t, schedule)
    if s is None:
        s = t - 1
    if not (0 <= s < t):
        raise InvalidRange(f"posterior target step {s} must lie in [0, {t})")
    ab_t = schedule.abar(t)
    ab_s = schedule.abar(s)
    if s == 0:
        # abar_0 = 1: the posterior collapses onto x_0 (exactly, not up to rounding)
        return 1.0, 0.0, 0.0
    if s == t - 1:
        alpha_eff = float(schedule.alpha[t - 1])
        beta_eff = float(schedule.beta[t - 1])
    else:
        alpha_eff = ab_t / ab_s
        beta_eff = 1.0 - alpha_eff
    coef_x0 = math.sqrt(ab_s) * beta_eff / (1.0 - ab_t)
    coef_xt = math.sqrt(alpha_eff) * (1.0 - ab_s) / (1.0 - ab_t)
    beta_tilde = (1.0 - ab_s) / (1.0 - ab_t) * beta_eff
    return coef_x0, coef_xt, beta_tilde


def posterior_mean(x_t, x0, t: int, schedule: NoiseSchedule, s: int | None = None):
    _check_shapes(x_t, x0)
    coef_x0, coef_xt, _ = posterior_coefficients(t, schedule, s)
    return coef_x0 * x0 + coef_xt * x_t


def step_sigma(t: int, schedule: NoiseSchedule, variance_mode: str = "beta_tilde", s: int | None = None) -> float:
    """Standard deviation of the reverse transition ``t -> s``."""
    if variance_mode not in VARIANCE_MODES:
        raise InvalidRange(f"variance_mode must be one of {VARIANCE_MODES}, got {variance_mode!r}")
    t = _check_step(t, schedule)
    s = t - 1 if s is None else s
    _, _, beta_tilde = posterior_coefficients(t, schedule, s)
    if variance_mode == "beta_tilde":
        return math.sqrt(beta_tilde)
    if s == t - 1:
        return math.sqrt(float(schedule.beta[t - 1]))
    return math.sqrt(1.0 - schedule.abar(t) / schedule.abar(s))


def _clip(x):
    return x.clip(-1.0, 1.0)


def _any_nonzero(x) -> bool:
    return bool((x != 0).any())


def p_step(
    x_t,
    eps_hat,
    t: int,
    noise,
    schedule: NoiseSchedule,
    variance_mode: str = "beta_tilde",
    clamp_x0: bool = True,
    s: int | None = None,
):
    """One reverse transition ``x_t -> x_s`` (``s = t - 1`` unless given).

    The ``x_0`` estimate is clamped to ``[-1, 1]`` before forming the
    posterior mean when ``clamp_x0`` is set. The transition into step 0 is
    deterministic, so ``noise`` must be all zeros there.
    """
    _check_shapes(x_t, eps_hat, noise)
    t = _check_step(t, schedule)
    s = t - 1 if s is None else s
    if s == 0 and _any_nonzero(noise):
        raise NoiseAtFinalStep("the final reverse step is deterministic; pass zero noise")
    x0_hat = predict_x0_from_eps(x_t, eps_hat, t, schedule)
    if clamp_x0:
        x0_hat = _clip(x0_hat)
    mean = posterior_mean(x_t, x0_hat, t, schedule, s)
    if s == 0:
        return mean
    return mean + step_sigma(t, schedule, variance_mode, s) * noise
