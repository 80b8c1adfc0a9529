"""Reverse-process simulation: exponential-integrator predictor and Langevin corrector."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffusion import DEFAULT_SCHEDULE, schedule_coefficients

log = logging.getLogger(__name__)


class SamplingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 256
    corrections: int = 0
    tau: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.corrections < 0:
            raise ValueError("corrections must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def time_grid(steps: int) -> np.ndarray:
    """Evenly spaced ``t_i = i / N`` for ``i = 0..N``; ``t_0 = 0`` exactly."""
    return np.arange(steps + 1) / steps


def ei_predictor_step(x_t, t, t_prev, score, schedule=DEFAULT_SCHEDULE) -> np.ndarray:
    """Move ``x(t)`` to ``x(t_prev)`` with the exponential integrator."""
    if t_prev > t:
        raise ValueError("t_prev must not exceed t")
    mu, sigma = schedule_coefficients(t, schedule)
    if sigma == 0.0:
        raise ValueError("cannot take a predictor step from t = 0")
    mu_p, sigma_p = schedule_coefficients(t_prev, schedule)
    return (mu_p / mu) * x_t + (mu_p / mu - sigma_p / sigma) * sigma ** 2 * score


def _event_axes(ndim, event_ndim):
    if event_ndim is None:
        return tuple(range(ndim))
    return tuple(range(ndim - event_ndim, ndim))


def lmc_corrector_step(x_t, t, score_fn, tau, rng, event_ndim=None) -> np.ndarray:
    """One Langevin step ``x + delta s + sqrt(2 delta) eps``, ``delta = tau dim(s) / |s|^2``.

    The norm runs over the last ``event_ndim`` axes (the whole tensor when
    ``None``), so each event gets its own step size. Events with a zero score
    are left untouched.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    s = np.asarray(score_fn(x_t, t), dtype=np.float64)
    axes = _event_axes(s.ndim, event_ndim)
    dim = int(np.prod([s.shape[a] for a in axes])) if axes else 1
    sq = np.sum(s * s, axis=axes, keepdims=True)
    safe = sq > 0
    delta = np.where(safe, tau * dim / np.where(safe, sq, 1.0), 0.0)
    eps = rng.standard_normal(x_t.shape)
    return x_t + delta * s + np.sqrt(2.0 * delta) * eps


def sample(score_fn, config: SamplerConfig, shape, rng=None, event_ndim=None,
           schedule=DEFAULT_SCHEDULE) -> np.ndarray:
    """Draw ``x(1) ~ N(0, sigma(1)^2 I)`` and integrate back to ``t = 0``.

    Each of the ``N`` predictor steps is followed by ``C`` corrector steps at
    the new time, including the final time ``t = 0``.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    grid = time_grid(config.steps)
    _, sigma1 = schedule_coefficients(1.0, schedule)
    x = sigma1 * rng.standard_normal(shape)
    for i in range(config.steps, 0, -1):
        t, t_prev = grid[i], grid[i - 1]
        x = ei_predictor_step(x, t, t_prev, score_fn(x, t), schedule)
        for _ in range(config.corrections):
            x = lmc_corrector_step(x, t_prev, score_fn, config.tau, rng, event_ndim)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state after step {config.steps - i + 1} (t={t_prev})")
        if i % 32 == 0:
            log.debug("sampler step %d/%d", config.steps - i + 1, config.steps)
    return x
