"""Exact perturbed scores of Gaussian priors, used as oracles and test targets."""

from __future__ import annotations

import numpy as np

from .diffusion import DEFAULT_SCHEDULE, schedule_coefficients


class GaussianScore:
    """Score of ``x(t)`` when ``x ~ N(mean, cov)``.

    ``cov`` is either elementwise variances broadcasting against the event
    shape, or a dense matrix over the flattened event (``dense=True``).
    Leading axes of ``x_t`` beyond the event shape are independent samples.
    """

    def __init__(self, mean, cov, dense: bool = False, schedule=DEFAULT_SCHEDULE):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        self.dense = dense
        self.schedule = schedule
        if dense and self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("dense covariance must be (n, n) with n = mean.size")

    def precision(self, t):
        mu, sigma = schedule_coefficients(t, self.schedule)
        if self.dense:
            return np.linalg.inv(mu ** 2 * self.cov + sigma ** 2 * np.eye(self.mean.size))
        return 1.0 / (mu ** 2 * self.cov + sigma ** 2)

    def _apply(self, prec, v):
        if not self.dense:
            return prec * v
        shape = v.shape
        flat = v.reshape(shape[:v.ndim - self.mean.ndim] + (-1,))
        return (flat @ prec).reshape(shape)

    def __call__(self, x_t, t):
        mu, _ = schedule_coefficients(t, self.schedule)
        return -self._apply(self.precision(t), np.asarray(x_t, dtype=np.float64) - mu * self.mean)

    def vjp(self, x_t, t):
        prec = self.precision(t)
        return self(x_t, t), lambda cot: -self._apply(prec, np.asarray(cot, dtype=np.float64))
