"""Reference posteriors: a bootstrap particle filter with genealogy tracing and
an exact Kalman / Rauch-Tung-Striebel smoother for linear-Gaussian models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.special import logsumexp

from .observation import ObservationProcess


class ParticleCollapse(FloatingPointError):
    """Every particle weight underflowed at some step."""

    def __init__(self, step: int):
        super().__init__(f"particle collapse: all weights vanished at step {step}")
        self.step = step


class StateSpaceModel(Protocol):
    def sample_initial(self, n: int, rng) -> np.ndarray: ...

    def sample_transition(self, x, rng) -> np.ndarray: ...

    def transition_logpdf(self, x_next, x) -> np.ndarray: ...


def _check_psd(name, mat, tol=1e-10):
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if not np.allclose(mat, mat.T, rtol=1e-9, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    eig = np.linalg.eigvalsh(mat)
    if eig.min() < -tol * max(1.0, abs(eig).max()):
        raise np.linalg.LinAlgError(f"{name} is not positive semi-definite")
    return mat


@dataclass
class LinearGaussianSSM:
    """``x_1 ~ N(m0, P0)``, ``x_{i+1} = F x_i + N(0, Q)``, ``y_i = H x_i + N(0, R)``."""

    F: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    m0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        self.F = np.atleast_2d(np.asarray(self.F, dtype=np.float64))
        self.H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        self.m0 = np.atleast_1d(np.asarray(self.m0, dtype=np.float64))
        self.Q = _check_psd("Q", np.atleast_2d(self.Q))
        self.R = _check_psd("R", np.atleast_2d(self.R))
        self.P0 = _check_psd("P0", np.atleast_2d(self.P0))
        d = self.m0.size
        if self.F.shape != (d, d) or self.Q.shape != (d, d) or self.P0.shape != (d, d):
            raise ValueError("state dimensions are inconsistent")
        if self.H.shape[1] != d or self.R.shape != (self.H.shape[0],) * 2:
            raise ValueError("observation dimensions are inconsistent")

    @classmethod
    def scalar(cls, a: float, q: float, r: float, m0: float = 0.0, p0: float | None = None):
        """1D model; ``p0`` defaults to the stationary variance ``q / (1 - a^2)``."""
        if p0 is None:
            if abs(a) >= 1:
                raise ValueError("stationary variance needs |a| < 1")
            p0 = q / (1 - a * a)
        return cls([[a]], [[q]], [[1.0]], [[r]], [m0], [[p0]])

    @property
    def dim(self) -> int:
        return self.m0.size

    def sample_initial(self, n, rng):
        return rng.multivariate_normal(self.m0, self.P0, size=n, method="cholesky")

    def sample_transition(self, x, rng):
        x = np.asarray(x)
        noise = rng.multivariate_normal(np.zeros(self.dim), self.Q, size=x.shape[:-1], method="cholesky")
        return x @ self.F.T + noise

    def transition_logpdf(self, x_next, x):
        r = np.asarray(x_next) - np.asarray(x) @ self.F.T
        sign, logdet = np.linalg.slogdet(2 * np.pi * self.Q)
        return -0.5 * (np.einsum("...i,ij,...j->...", r, np.linalg.inv(self.Q), r) + logdet)

    def simulate(self, length: int, rng):
        """One trajectory ``(L, D)`` and its observations ``(L, M)``."""
        x = np.empty((length, self.dim))
        x[0] = self.sample_initial(1, rng)[0]
        for i in range(1, length):
            x[i] = self.sample_transition(x[i - 1], rng)
        noise = rng.multivariate_normal(np.zeros(self.R.shape[0]), self.R, size=length, method="cholesky")
        return x, x @ self.H.T + noise

    def joint_covariance(self, length: int):
        """Mean ``(L*D,)`` and covariance of the stacked states (dense, small ``L`` only)."""
        d = self.dim
        mean = np.empty((length, d))
        mean[0] = self.m0
        marg = [self.P0]
        for i in range(1, length):
            mean[i] = self.F @ mean[i - 1]
            marg.append(self.F @ marg[-1] @ self.F.T + self.Q)
        cov = np.empty((length * d, length * d))
        for i in range(length):
            block = marg[i]
            for j in range(i, length):
                cov[j * d:(j + 1) * d, i * d:(i + 1) * d] = block
                cov[i * d:(i + 1) * d, j * d:(j + 1) * d] = block.T
                block = self.F @ block
        return mean.ravel(), cov


@dataclass
class SmootherResult:
    means: np.ndarray        # (L, D)
    covariances: np.ndarray  # (L, D, D)
    log_evidence: float


def kalman_smoother(model: LinearGaussianSSM, y) -> SmootherResult:
    """Exact smoothing marginals ``p(x_i | y_{1:L})`` and ``log p(y_{1:L})``.

    ``y`` has shape ``(L, M)``; rows containing NaN are treated as missing.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    length, d = y.shape[0], model.dim
    F, Q, H, R = model.F, model.Q, model.H, model.R
    m_pred = np.empty((length, d))
    p_pred = np.empty((length, d, d))
    m_filt = np.empty((length, d))
    p_filt = np.empty((length, d, d))
    m, p = model.m0, model.P0
    log_ev = 0.0
    eye = np.eye(d)
    for i in range(length):
        m_pred[i], p_pred[i] = m, p
        if not np.any(np.isnan(y[i])):
            s = H @ p @ H.T + R
            gain = np.linalg.solve(s, H @ p).T
            resid = y[i] - H @ m
            sign, logdet = np.linalg.slogdet(2 * np.pi * s)
            if sign <= 0:
                raise np.linalg.LinAlgError(f"innovation covariance is not positive definite at step {i}")
            log_ev += -0.5 * (resid @ np.linalg.solve(s, resid) + logdet)
            m = m + gain @ resid
            a = eye - gain @ H
            p = a @ p @ a.T + gain @ R @ gain.T  # Joseph form
        m_filt[i], p_filt[i] = m, p
        m, p = F @ m, F @ p @ F.T + Q
    means = m_filt.copy()
    covs = p_filt.copy()
    for i in range(length - 2, -1, -1):
        cross = p_filt[i] @ F.T
        try:
            smoother_gain = np.linalg.solve(p_pred[i + 1], cross.T).T
        except np.linalg.LinAlgError:
            smoother_gain = cross @ np.linalg.pinv(p_pred[i + 1])
        means[i] = m_filt[i] + smoother_gain @ (means[i + 1] - m_pred[i + 1])
        covs[i] = p_filt[i] + smoother_gain @ (covs[i + 1] - p_pred[i + 1]) @ smoother_gain.T
        covs[i] = 0.5 * (covs[i] + covs[i].T)
    return SmootherResult(means, covs, float(log_ev))


def systematic_resample(log_weights, rng) -> np.ndarray:
    """Ancestor indices for one systematic resampling pass (same count as input)."""
    log_weights = np.asarray(log_weights, dtype=np.float64)
    n = log_weights.size
    w = np.exp(log_weights - logsumexp(log_weights))
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    u = (rng.uniform() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)


@dataclass
class ParticleEnsemble:
    """Particle history of one filter run.

    ``ancestors[i, j]`` is the index, at step ``i``, of the parent of
    particle ``j`` at step ``i + 1``.
    """

    particles: np.ndarray    # (L, P, D)
    ancestors: np.ndarray    # (L-1, P)
    log_weights: np.ndarray  # (P,) final-step weights
    log_evidence: float

    @property
    def size(self) -> int:
        return self.particles.shape[1]

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    def lineage(self, final) -> np.ndarray:
        """Ancestor index at every step ``(len(final), L)`` of final particles ``final``."""
        final = np.asarray(final)
        length = self.particles.shape[0]
        idx = np.empty(final.shape + (length,), dtype=np.int64)
        idx[..., -1] = final
        for i in range(length - 2, -1, -1):
            idx[..., i] = self.ancestors[i, idx[..., i + 1]]
        return idx

    def paths(self, final=None) -> np.ndarray:
        """Trajectories ``(n, L, D)`` traced back from final particles ``final``."""
        final = np.arange(self.size) if final is None else np.asarray(final)
        idx = self.lineage(final)
        steps = np.arange(self.particles.shape[0])
        return self.particles[steps, idx]

    def draw(self, n: int, rng) -> np.ndarray:
        """``n`` trajectories: final particles picked by weight, then traced back."""
        final = rng.choice(self.size, size=n, p=self.weights())
        return self.paths(final)

    def smoothed_mean(self) -> np.ndarray:
        return np.einsum("p,pld->ld", self.weights(), self.paths())

    def bootstrap_se(self, n_boot: int, rng) -> np.ndarray:
        """Standard error of :meth:`smoothed_mean` from a cluster bootstrap.

        Final particles sharing a root ancestor are correlated, so whole
        root lineages are resampled together.
        """
        w = self.weights()
        roots = self.lineage(np.arange(self.size))[:, 0]
        labels, cluster = np.unique(roots, return_inverse=True)
        n_clusters = labels.size
        if n_clusters < 2:
            raise ValueError("a single surviving lineage leaves no spread to bootstrap")
        paths = self.paths().reshape(self.size, -1)
        cluster_w = np.bincount(cluster, weights=w, minlength=n_clusters)
        cluster_s = np.zeros((n_clusters, paths.shape[1]))
        np.add.at(cluster_s, cluster, w[:, None] * paths)
        counts = rng.multinomial(n_clusters, np.full(n_clusters, 1.0 / n_clusters), size=n_boot)
        est = (counts @ cluster_s) / (counts @ cluster_w)[:, None]
        return est.std(axis=0, ddof=1).reshape(self.particles.shape[0], -1)


def bpf_filter(model: StateSpaceModel, obs: ObservationProcess, n_particles: int, length: int,
               rng, dim: int | None = None) -> ParticleEnsemble:
    """Bootstrap particle filter with systematic resampling at every step."""
    if n_particles < 2:
        raise ValueError("the particle filter needs at least 2 particles")
    x = np.asarray(model.sample_initial(n_particles, rng), dtype=np.float64)
    dim = x.shape[-1] if dim is None else dim
    step_ll, constant = obs.step_log_likelihoods(length, dim)
    particles = np.empty((length, n_particles, dim))
    ancestors = np.empty((max(length - 1, 0), n_particles), dtype=np.int64)
    log_ev = float(constant)
    log_w = None
    log_n = np.log(n_particles)
    for i in range(length):
        if i > 0:
            parents = systematic_resample(log_w, rng)
            ancestors[i - 1] = parents
            x = model.sample_transition(particles[i - 1, parents], rng)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite particle state at step {i}")
        particles[i] = x
        log_w = np.asarray(step_ll[i](x), dtype=np.float64)
        if log_w.ndim == 0:
            log_w = np.full(n_particles, float(log_w))
        total = logsumexp(log_w)
        if not np.isfinite(total):
            raise ParticleCollapse(i)
        log_ev += total - log_n
    return ParticleEnsemble(particles, ancestors, log_w, float(log_ev))


def bpf_sample(model: StateSpaceModel, obs: ObservationProcess, n_particles: int, n_draws: int,
               rng, length: int, dim: int | None = None) -> np.ndarray:
    """``n_draws`` posterior trajectories ``(n_draws, L, D)`` by genealogy tracing."""
    ensemble = bpf_filter(model, obs, n_particles, length, rng, dim)
    return ensemble.draw(n_draws, rng)
