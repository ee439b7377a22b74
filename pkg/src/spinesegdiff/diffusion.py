"""Noise schedules, forward diffusion, and deterministic DDIM stepping.

Shared stochastic-process math for both the direct-mask model and the
noise-predicting baseline. Everything here is pure and stateless: noise
arrays are always passed in by the caller, so determinism is entirely
in the caller's hands.

Conventions:
    - timesteps are 0-based; t = 0 is the least-noised step
    - mask states live in [-1, 1] (one-hot {0,1} maps to {-1,+1})
    - q(x_t | x_0) = N(sqrt(abar_t) x_0, (1 - abar_t) I)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Offset for the squared-cosine abar curve and the per-step beta clamp.
COSINE_S = 0.008
BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha/abar tables for T diffusion steps."""

    kind: str
    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.T,):
            raise ValueError(f"expected {self.T} betas, got shape {betas.shape}")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal retention at step t; t = -1 means clean data."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T})")
        return float(self.alpha_bars[t])


def make_schedule(kind: str, T: int, beta1: float = 1e-4, betaT: float = 0.02) -> NoiseSchedule:
    """Build a linear or cosine noise schedule.

    Linear: betas affine from beta1 to betaT. Cosine: squared-cosine
    abar curve with offset s, per-step beta clamped to BETA_MAX.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear":
        if not (0.0 < beta1 <= betaT < 1.0):
            raise ValueError(f"need 0 < beta1 <= betaT < 1, got {beta1}, {betaT}")
        betas = np.linspace(beta1, betaT, T, dtype=np.float64)
    elif kind == "cosine":
        def f(u):
            return math.cos((u + COSINE_S) / (1.0 + COSINE_S) * math.pi / 2.0) ** 2

        f0 = f(0.0)
        abar = np.array([f((t + 1) / T) / f0 for t in range(T)])
        abar_prev = np.concatenate([[1.0], abar[:-1]])
        betas = np.minimum(1.0 - abar / abar_prev, BETA_MAX)
        # clamp can only raise abar above the analytic curve, never to >= 1
        betas = np.maximum(betas, 1e-12)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(kind=kind, T=T, betas=betas)


def forward_noise(x0, t: int, eps, schedule: NoiseSchedule):
    """Closed-form forward process: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    Works on numpy arrays and torch tensors alike (coefficients are
    python floats). Shapes of x0 and eps must match.
    """
    if getattr(x0, "shape", None) != getattr(eps, "shape", None):
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ddim_step(x_t, x0_pred, t: int, t_prev: int, schedule: NoiseSchedule):
    """Deterministic DDIM update given the model's clean-state prediction.

    Recovers eps_hat = (x_t - sqrt(abar_t) x0_pred) / sqrt(1 - abar_t)
    and re-noises to t_prev. t_prev = -1 is the terminal sentinel and
    emits x0_pred directly. t_prev == t is an exact no-op.
    """
    if t_prev > t:
        raise ValueError(f"t_prev {t_prev} must not exceed t {t}")
    if t_prev < 0:
        return x0_pred
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    eps_hat = (x_t - math.sqrt(ab_t) * x0_pred) / math.sqrt(1.0 - ab_t)
    return math.sqrt(ab_prev) * x0_pred + math.sqrt(1.0 - ab_prev) * eps_hat


@dataclass(frozen=True)
class TimestepSubsequence:
    """Strictly decreasing reverse-step indices, last one 0."""

    steps: tuple
    count: int

    def __post_init__(self):
        if len(self.steps) != self.count:
            raise ValueError("count does not match number of steps")
        if any(b >= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("steps must be strictly decreasing")
        if self.steps[-1] < 0:
            raise ValueError("last step must be >= 0")


def make_timestep_subsequence(T: int, count: int, t_start: int | None = None) -> TimestepSubsequence:
    """Uniformly spaced reverse-step indices from t_start (default T-1) down to 0.

    Spacing >= 1 is guaranteed by count <= t_start + 1, so rounding never
    collapses two indices.
    """
    if t_start is None:
        t_start = T - 1
    if not 0 <= t_start < T:
        raise ValueError(f"t_start {t_start} outside [0, {T})")
    if not 1 <= count <= t_start + 1:
        raise ValueError(f"count {count} outside [1, {t_start + 1}]")
    if count == 1:
        steps = (int(t_start),)
    else:
        steps = tuple(int(round(v)) for v in np.linspace(t_start, 0, count))
    return TimestepSubsequence(steps=steps, count=count)


def scale_mask(onehot):
    """Map a {0,1} one-hot mask into the [-1, 1] diffusion state space."""
    return 2.0 * onehot - 1.0


def unscale_mask(state):
    """Map a [-1, 1] state back to the [0, 1] mask value range."""
    return (state + 1.0) / 2.0
