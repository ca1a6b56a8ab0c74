"""
Noise schedules, forward noising and x0-parameterized DDPM / DDIM sampling.

Time steps are 1-based: t in {1..T}; alpha_bar(0) = 1 is the clean signal.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Literal, Optional, Sequence, Union

import numpy as np

from services.errors import InvalidArgument, NonFiniteValue, ShapeMismatch

logger = logging.getLogger(__name__)

SQRT_FLOOR = 1e-6
BETA_MAX = 0.999
LINEAR_RANGE = (1e-4, 2e-2)

DenoiseFn = Callable[[np.ndarray, np.ndarray, object], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    beta: np.ndarray  # (T,) beta_1..beta_T

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(1.0 - self.beta)

    def alpha_bar_at(self, t) -> np.ndarray:
        """alpha_bar for 1-based steps, with alpha_bar_at(0) == 1."""
        t = np.asarray(t)
        ab = np.concatenate([[1.0], self.alpha_bar])
        return ab[t]


@dataclass(frozen=True)
class DdimPlan:
    sub_steps: tuple
    eta: float = 0.0
    T: Optional[int] = None

    def __post_init__(self):
        steps = list(self.sub_steps)
        if not steps:
            raise InvalidArgument("DDIM plan needs at least one step")
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise InvalidArgument(f"DDIM steps must be strictly decreasing, got {steps}")
        if steps[-1] < 1:
            raise InvalidArgument("DDIM steps are 1-based")
        if self.T is not None and steps[0] > self.T:
            raise InvalidArgument(f"DDIM plan starts at step {steps[0]} beyond T={self.T}")


def schedule_from_beta(beta: Sequence[float], kind: str = "custom") -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise InvalidArgument("beta table must be a non-empty vector")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise InvalidArgument("every beta must lie in (0, 1)")
    return NoiseSchedule(kind=kind, beta=beta)


def make_schedule(T: int = 1000, kind: Literal["cosine", "linear"] = "cosine") -> NoiseSchedule:
    """
    Build a variance schedule.

    linear: beta evenly spaced from 1e-4 to 2e-2.
    cosine: alpha_bar from the squared-cosine profile (offset s = 0.008),
    betas clipped to at most 0.999.
    """
    if T < 1:
        raise InvalidArgument(f"T must be >= 1, got {T}")
    if kind == "linear":
        beta = np.linspace(*LINEAR_RANGE, T) if T > 1 else np.array([LINEAR_RANGE[0]])
    elif kind == "cosine":
        s = 0.008
        f = lambda t: math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
        beta = np.array([min(1.0 - f(t) / f(t - 1), BETA_MAX) for t in range(1, T + 1)])
    else:
        raise InvalidArgument(f"unknown schedule kind '{kind}'")
    return NoiseSchedule(kind=kind, beta=beta)


def make_plan(T: int, steps: int = 4, eta: float = 0.0) -> DdimPlan:
    """`steps` sub-steps uniformly spaced in {1..T}, starting at T."""
    if steps < 1 or steps > T:
        raise InvalidArgument(f"plan length must be in [1, {T}], got {steps}")
    stride = T / steps
    sub = tuple(int(round(T - i * stride)) for i in range(steps))
    return DdimPlan(sub_steps=sub, eta=eta, T=T)


def _per_item(values: np.ndarray, ndim: int) -> np.ndarray:
    """Broadcast per-batch-item coefficients over the trailing axes of x."""
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def q_sample(x0: np.ndarray, t, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """
    Closed-form forward noising sqrt(ab_t) x0 + sqrt(1 - ab_t) noise.

    `t` may be a scalar or one step per leading batch item.
    """
    if np.shape(noise) != np.shape(x0):
        raise ShapeMismatch(f"noise shape {np.shape(noise)} differs from x0 shape {np.shape(x0)}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise InvalidArgument(f"t must lie in [1, {sched.T}]")
    ab = _per_item(sched.alpha_bar_at(t), np.ndim(x0))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def x0_to_eps(x_t: np.ndarray, x0_hat: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """Noise implied by an x0 estimate; the sqrt(1 - ab) denominator is floored at 1e-6."""
    ab = _per_item(sched.alpha_bar_at(np.asarray(t)), np.ndim(x_t))
    return (x_t - np.sqrt(ab) * x0_hat) / np.maximum(np.sqrt(1.0 - ab), SQRT_FLOOR)


def ddpm_step(
    x_t: np.ndarray,
    x0_hat: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    noise: Optional[np.ndarray] = None,
    variance: Literal["beta", "posterior"] = "beta",
) -> np.ndarray:
    """
    One ancestral step x_t -> x_{t-1} given an x0 estimate.

    mu = (x_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t); noise is
    added for t > 1 only, scaled by sqrt(beta_t) (or the posterior std).
    """
    if t < 1:
        raise InvalidArgument("t must be >= 1")
    beta = sched.beta[t - 1]
    ab = sched.alpha_bar_at(t)
    eps = x0_to_eps(x_t, x0_hat, t, sched)
    mu = (x_t - beta / max(math.sqrt(1.0 - ab), SQRT_FLOOR) * eps) / math.sqrt(1.0 - beta)
    if t == 1 or noise is None:
        return mu
    if variance == "posterior":
        var = beta * (1.0 - sched.alpha_bar_at(t - 1)) / (1.0 - ab)
    else:
        var = beta
    return mu + math.sqrt(var) * noise


def ddpm_sample(
    denoise_fn: DenoiseFn,
    cond,
    sched: NoiseSchedule,
    init_noise: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    variance: Literal["beta", "posterior"] = "beta",
) -> np.ndarray:
    """Full T-step ancestral chain; returns x_0. Without rng the chain is noise-free."""
    x = np.asarray(init_noise, dtype=np.float64)
    batch = x.shape[:1]
    for t in range(sched.T, 0, -1):
        x0_hat = denoise_fn(x, np.full(batch, t), cond)
        noise = rng.standard_normal(x.shape) if (rng is not None and t > 1) else None
        x = ddpm_step(x, x0_hat, t, sched, noise, variance)
        _guard(x, "ddpm_sample")
    return x


def ddim_sample(
    denoise_fn: DenoiseFn,
    cond,
    plan: DdimPlan,
    sched: NoiseSchedule,
    init_noise: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    DDIM recursion over the plan's sub-steps.

    x_t' = sqrt(ab_t') x0_hat + sqrt(1 - ab_t' - sigma^2) eps_hat + sigma z,
    sigma = eta * sqrt((1 - ab_t') / (1 - ab_t) * (1 - ab_t / ab_t')).
    The result is the x0 estimate at the last sub-step.
    """
    x = np.asarray(init_noise, dtype=np.float64)
    batch = x.shape[:1]
    steps = list(plan.sub_steps)
    if steps[0] > sched.T:
        raise InvalidArgument(f"DDIM plan starts at step {steps[0]} but the schedule has T={sched.T}")
    x0_hat = x
    for i, t in enumerate(steps):
        x0_hat = np.asarray(denoise_fn(x, np.full(batch, t), cond), dtype=np.float64)
        _guard(x0_hat, "ddim_sample")
        if i == len(steps) - 1:
            break
        t_next = steps[i + 1]
        ab = float(sched.alpha_bar_at(t))
        ab_next = float(sched.alpha_bar_at(t_next))
        eps = x0_to_eps(x, x0_hat, t, sched)
        sigma = 0.0
        if plan.eta > 0:
            sigma = plan.eta * math.sqrt((1 - ab_next) / (1 - ab) * (1 - ab / ab_next))
        x = math.sqrt(ab_next) * x0_hat + math.sqrt(max(1.0 - ab_next - sigma**2, 0.0)) * eps
        if sigma > 0:
            if rng is None:
                raise InvalidArgument("eta > 0 needs a random generator")
            x = x + sigma * rng.standard_normal(x.shape)
        _guard(x, "ddim_sample")
    return x0_hat


def _guard(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue(f"{where} produced non-finite values")
