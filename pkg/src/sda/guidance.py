"""Zero-shot likelihood guidance for score-based posterior sampling.

The likelihood ``p(y | x(t))`` is approximated by a Gaussian centered on the
observed Tweedie estimate ``A(x_hat(x(t)))``. The SDA variant inflates the
observation covariance by ``(sigma/mu)^2 Gamma_eff``; the DPS variant uses
``Sigma_y`` alone. Gradients are taken through ``x_hat``, prior score
included, via vector-Jacobian products of the prior and of the operator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import DEFAULT_SCHEDULE, schedule_coefficients
from .observation import ObservationProcess


def tweedie_denoise(score, x_t, t, schedule=DEFAULT_SCHEDULE) -> np.ndarray:
    """Posterior mean ``(x(t) + sigma^2 s) / mu`` of the clean sample."""
    mu, sigma = schedule_coefficients(t, schedule)
    if mu < 1e-12:
        raise ZeroDivisionError(f"mu({t}) = {mu} is too small for Tweedie denoising")
    return (np.asarray(x_t) + sigma ** 2 * np.asarray(score)) / mu


@dataclass(frozen=True)
class GammaMatrix:
    """Surrogate for the denoising covariance shape.

    ``scalar`` and ``diagonal`` values live in observation space and stand in
    for ``A Gamma A^T`` directly. A ``dense`` value is a matrix over the
    flattened state and is projected through the operator Jacobian.
    """

    kind: str
    value: object

    def __post_init__(self):
        if self.kind not in ("scalar", "diagonal", "dense"):
            raise ValueError(f"unknown Gamma kind {self.kind!r}")
        if self.kind == "dense":
            v = np.asarray(self.value)
            eig = np.linalg.eigvalsh((v + v.T) / 2)
            if eig.min() < -1e-10 or eig.max() >= 1.0 + 1e-12:
                raise ValueError("dense Gamma must have eigenvalues in [0, 1)")

    @classmethod
    def scalar(cls, gamma: float = 1e-2) -> "GammaMatrix":
        return cls("scalar", float(gamma))

    def observation_covariance(self, operator, x_hat) -> np.ndarray:
        """``A Gamma A^T`` for one trajectory ``x_hat`` (diagonal or matrix)."""
        if self.kind == "scalar":
            return np.asarray(self.value)
        if self.kind == "diagonal":
            return np.asarray(self.value, dtype=np.float64)
        jac = operator_jacobian(operator, x_hat)
        return jac @ np.asarray(self.value) @ jac.T


DEFAULT_GAMMA = GammaMatrix.scalar(1e-2)


def gamma_from_prior_cov(sigma_x) -> GammaMatrix:
    """``Q L (L + I)^-1 Q^T`` from the eigendecomposition ``Sigma_x = Q L Q^T``."""
    sigma_x = np.atleast_2d(np.asarray(sigma_x, dtype=np.float64))
    if sigma_x.shape[0] != sigma_x.shape[1] or not np.allclose(sigma_x, sigma_x.T, rtol=1e-10, atol=1e-12):
        raise ValueError("prior covariance must be a symmetric matrix")
    lam, q = np.linalg.eigh(sigma_x)
    if lam.min() < -1e-10 * max(1.0, abs(lam).max()):
        raise ValueError("prior covariance must be positive semi-definite")
    lam = np.clip(lam, 0.0, None)
    return GammaMatrix("dense", (q * (lam / (lam + 1.0))) @ q.T)


def operator_jacobian(operator, x) -> np.ndarray:
    """Dense Jacobian ``(M, L*D)`` of ``operator`` at a single trajectory ``x``."""
    x = np.asarray(x, dtype=np.float64)
    m = operator(x).shape[-1]
    rows = [operator.vjp(x, np.eye(m)[j]).ravel() for j in range(m)]
    return np.stack(rows) if rows else np.zeros((0, x.size))


def _prior_and_likelihood(x_t, t, obs: ObservationProcess, prior, gamma, schedule):
    """Return ``(prior score, likelihood score)``; ``gamma=None`` means no inflation."""
    mu, sigma = schedule_coefficients(t, schedule)
    if mu < 1e-12:
        raise ZeroDivisionError(f"mu({t}) = {mu} is too small for Tweedie denoising")
    x_t = np.asarray(x_t, dtype=np.float64)
    s, s_vjp = prior.vjp(x_t, t)
    x_hat = (x_t + sigma ** 2 * s) / mu
    residual = obs.y - obs.operator(x_hat)
    if gamma is None:
        weighted = residual / obs.noise_var
    elif gamma.kind == "dense":
        weighted = _dense_solve(x_hat, residual, obs, gamma, (sigma / mu) ** 2)
    else:
        inflation = (sigma / mu) ** 2 * gamma.observation_covariance(None, None)
        weighted = residual / (obs.noise_var + inflation)
    g_hat = obs.operator.vjp(x_hat, weighted)
    g = (g_hat + sigma ** 2 * s_vjp(g_hat)) / mu
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite likelihood score at t={t}")
    return s, g


def _dense_solve(x_hat, residual, obs, gamma, scale):
    # The operator Jacobian inside the covariance is held fixed (no second derivatives).
    batch = x_hat.shape[:-2]
    out = np.empty_like(residual)
    for idx in np.ndindex(*batch):
        cov = np.diag(obs.noise_var) + scale * gamma.observation_covariance(obs.operator, x_hat[idx])
        out[idx] = np.linalg.solve(cov, residual[idx])
    return out


def sda_likelihood_score(x_t, t, obs: ObservationProcess, prior, gamma: GammaMatrix = DEFAULT_GAMMA,
                         schedule=DEFAULT_SCHEDULE) -> np.ndarray:
    """Gradient of ``log N(y | A(x_hat), Sigma_y + (sigma/mu)^2 Gamma_eff)`` w.r.t. ``x(t)``.

    ``prior`` must provide ``vjp(x_t, t) -> (score, vjp_fn)``.
    """
    return _prior_and_likelihood(x_t, t, obs, prior, gamma, schedule)[1]


def dps_likelihood_score(x_t, t, obs: ObservationProcess, prior, schedule=DEFAULT_SCHEDULE) -> np.ndarray:
    """Same as :func:`sda_likelihood_score` without covariance inflation."""
    return _prior_and_likelihood(x_t, t, obs, prior, None, schedule)[1]


def posterior_score(x_t, t, obs: ObservationProcess, prior, gamma: GammaMatrix = DEFAULT_GAMMA,
                    variant: str = "sda", schedule=DEFAULT_SCHEDULE) -> np.ndarray:
    return PosteriorScore(prior, obs, gamma, variant, schedule)(x_t, t)


class PosteriorScore:
    """Prior score plus the selected likelihood score, as a sampler score function."""

    def __init__(self, prior, obs: ObservationProcess, gamma: GammaMatrix = DEFAULT_GAMMA,
                 variant: str = "sda", schedule=DEFAULT_SCHEDULE):
        if variant not in ("sda", "dps"):
            raise ValueError(f"unknown guidance variant {variant!r}")
        self.prior = prior
        self.obs = obs
        self.gamma = gamma if variant == "sda" else None
        self.variant = variant
        self.schedule = schedule

    def __call__(self, x_t, t):
        s, g = _prior_and_likelihood(x_t, t, self.obs, self.prior, self.gamma, self.schedule)
        return s + g
