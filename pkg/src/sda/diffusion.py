"""Variance-preserving diffusion with a cosine schedule.

The forward process perturbs a clean sample ``x`` into
``x(t) = mu(t) x + sigma(t) eps`` with ``mu(t) = cos(omega t)^2`` and
``mu(t)^2 + sigma(t)^2 = 1``. Drift and diffusion coefficients are never
needed explicitly, every consumer works with ``(mu, sigma)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

OMEGA = math.acos(math.sqrt(1e-3))


@dataclass(frozen=True)
class DiffusionSchedule:
    """VP cosine schedule. ``mu(1) = cos(omega)^2`` (1e-3 by default)."""

    omega: float = OMEGA
    kind: str = "vp-cosine"

    def __post_init__(self):
        if self.kind != "vp-cosine":
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 < self.omega < math.pi / 2:
            raise ValueError("omega must lie in (0, pi/2)")

    def __call__(self, t):
        return schedule_coefficients(t, self)

    def mu(self, t):
        return self(t)[0]

    def sigma(self, t):
        return self(t)[1]


DEFAULT_SCHEDULE = DiffusionSchedule()


def _check_time(t) -> None:
    t = np.asarray(t)
    if not np.all(np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"diffusion time must lie in [0, 1], got {t}")


def schedule_coefficients(t, schedule: DiffusionSchedule = DEFAULT_SCHEDULE):
    """Return ``(mu(t), sigma(t))`` for scalar or array ``t`` in ``[0, 1]``.

    ``sigma`` is evaluated as ``sin(wt) sqrt(1 + cos(wt)^2)``, which equals
    ``sqrt(1 - cos(wt)^4)`` but keeps full relative precision near ``t = 0``.
    """
    _check_time(t)
    angle = schedule.omega * np.asarray(t, dtype=np.float64)
    c = np.cos(angle)
    mu = c * c
    sigma = np.sin(angle) * np.sqrt(1.0 + c * c)
    if mu.ndim == 0:
        return float(mu), float(sigma)
    return mu, sigma


@dataclass(frozen=True)
class PerturbedState:
    value: np.ndarray
    t: float

    def __post_init__(self):
        _check_time(self.t)


def perturb(x, t, eps, schedule: DiffusionSchedule = DEFAULT_SCHEDULE) -> PerturbedState:
    """Apply the perturbation kernel: ``mu(t) x + sigma(t) eps``."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs eps {eps.shape}")
    mu, sigma = schedule_coefficients(t, schedule)
    return PerturbedState(mu * x + sigma * eps, float(t))
