"""Global trajectory scores assembled from local window scores.

A local score maps windows of shape ``(..., n_windows, 2k+1, D)`` to scores of
the same shape; the window axis is explicit so position-aware (analytic)
local scores can be plugged in next to the stationary network.

Also home to the Gaussian AR(1) chain, whose exact perturbed scores serve as
oracles for the composition and for the unbiasedness of windowed scores.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .diffusion import DEFAULT_SCHEDULE, schedule_coefficients


class LocalScore(Protocol):
    k: int

    def __call__(self, windows: np.ndarray, t: float) -> np.ndarray: ...


@dataclass
class LocalScoreFn:
    """Wrap a plain callable (and optionally its VJP) as a local score."""

    fn: Callable
    k: int
    vjp_fn: Callable | None = None

    def __call__(self, windows, t):
        return self.fn(windows, t)

    def vjp(self, windows, t):
        if self.vjp_fn is None:
            raise NotImplementedError("this local score has no VJP")
        return self.vjp_fn(windows, t)


def unfold(x, k: int) -> np.ndarray:
    """All windows of ``x`` (``(..., L, D)``) as ``(..., L-2k, 2k+1, D)``."""
    x = np.asarray(x)
    length = x.shape[-2]
    if length < 2 * k + 1:
        raise ValueError(f"trajectory of length {length} is shorter than a window of radius {k}")
    w = sliding_window_view(x, 2 * k + 1, axis=-2)  # (..., L-2k, D, 2k+1)
    return np.swapaxes(w, -1, -2)


def fold_rows(window_scores, k: int) -> np.ndarray:
    """Pick the output rows of each window, exactly one source per row.

    First ``k+1`` rows come from the first window, the last ``k+1`` from the
    last window and every row in between from the center of its own window.
    """
    n_windows = window_scores.shape[-3]
    if n_windows == 1:
        return window_scores[..., 0, :, :].copy()
    head = window_scores[..., 0, :k + 1, :]
    middle = window_scores[..., 1:n_windows - 1, k, :]
    tail = window_scores[..., n_windows - 1, k:, :]
    return np.concatenate([head, middle, tail], axis=-2)


def unfold_rows(cot, k: int) -> np.ndarray:
    """Adjoint of :func:`fold_rows`: scatter row cotangents back onto windows."""
    cot = np.asarray(cot)
    length = cot.shape[-2]
    n_windows = length - 2 * k
    out = np.zeros(cot.shape[:-2] + (n_windows, 2 * k + 1, cot.shape[-1]), dtype=cot.dtype)
    if n_windows == 1:
        out[..., 0, :, :] = cot
        return out
    out[..., 0, :k + 1, :] = cot[..., :k + 1, :]
    out[..., 1:n_windows - 1, k, :] = cot[..., k + 1:length - k - 1, :]
    out[..., n_windows - 1, k:, :] = cot[..., length - k - 1:, :]
    return out


def fold_windows(window_cot, k: int) -> np.ndarray:
    """Adjoint of :func:`unfold`: sum window cotangents onto trajectory rows."""
    n_windows = window_cot.shape[-3]
    length = n_windows + 2 * k
    out = np.zeros(window_cot.shape[:-3] + (length, window_cot.shape[-1]), dtype=window_cot.dtype)
    for j in range(2 * k + 1):
        out[..., j:j + n_windows, :] += window_cot[..., :, j, :]
    return out


def compose_score(local: LocalScore, x_t, t, workers: int | None = None) -> np.ndarray:
    """Score of a whole trajectory ``(..., L, D)`` from local window scores.

    By default all windows go through ``local`` in one batched call. With
    ``workers`` set, each window is evaluated on its own in a thread pool;
    the result is then bitwise independent of the worker count, but only
    suits stationary local scores (the window index is not visible).
    """
    windows = unfold(x_t, local.k)
    if workers is None:
        return fold_rows(local(windows, t), local.k)
    n_windows = windows.shape[-3]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda j: local(windows[..., j:j + 1, :, :], t), range(n_windows)))
    return fold_rows(np.concatenate(parts, axis=-3), local.k)


def compose_score_vjp(local, x_t, t):
    """Composed score and its vector-Jacobian product with respect to ``x_t``."""
    k = local.k
    scores, window_vjp = local.vjp(unfold(x_t, k), t)

    def vjp(cot):
        return fold_windows(window_vjp(unfold_rows(cot, k)), k)

    return fold_rows(scores, k), vjp


class ComposedScore:
    """Trajectory-level prior score built from a local score, with VJP support."""

    def __init__(self, local):
        self.local = local

    @property
    def k(self):
        return self.local.k

    def __call__(self, x_t, t):
        return compose_score(self.local, x_t, t)

    def vjp(self, x_t, t):
        return compose_score_vjp(self.local, x_t, t)


# ---------------------------------------------------------------------------
# Gaussian AR(1) chain oracle


@dataclass(frozen=True)
class GaussianChainSpec:
    """``x_1 ~ N(0, p0)``, ``x_{i+1} = a x_i + N(0, q)``, scalar states."""

    length: int
    a: float
    q: float
    p0: float

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("length must be positive")
        if self.q <= 0 or self.p0 <= 0:
            raise ValueError("q and p0 must be positive")
        if abs(self.a) > 2:
            raise ValueError("|a| must not exceed 2")

    def covariance(self) -> np.ndarray:
        var = np.empty(self.length)
        var[0] = self.p0
        for i in range(1, self.length):
            var[i] = self.a ** 2 * var[i - 1] + self.q
        idx = np.arange(self.length)
        lo = np.minimum.outer(idx, idx)
        gap = np.abs(np.subtract.outer(idx, idx))
        return var[lo] * float(self.a) ** gap

    def perturbed_covariance(self, t, window=None, schedule=DEFAULT_SCHEDULE) -> np.ndarray:
        mu, sigma = schedule_coefficients(t, schedule)
        cov = self.covariance()
        if window is not None:
            cov = cov[np.ix_(_indices(window, self.length), _indices(window, self.length))]
        return mu ** 2 * cov + sigma ** 2 * np.eye(cov.shape[0])

    def sample(self, n: int, rng) -> np.ndarray:
        x = np.empty((n, self.length))
        x[:, 0] = rng.normal(0.0, np.sqrt(self.p0), n)
        for i in range(1, self.length):
            x[:, i] = self.a * x[:, i - 1] + rng.normal(0.0, np.sqrt(self.q), n)
        return x


def _indices(window, length) -> np.ndarray:
    if window is None:
        return np.arange(length)
    if isinstance(window, slice):
        return np.arange(length)[window]
    return np.asarray(window, dtype=int)


def gaussian_chain_score(spec: GaussianChainSpec, x_t, t, window=None,
                         schedule=DEFAULT_SCHEDULE) -> np.ndarray:
    """Exact score of the perturbed chain marginal restricted to ``window``.

    ``x_t`` holds the perturbed values of the window states, shape
    ``(..., len(window))``.
    """
    cov = spec.perturbed_covariance(t, window, schedule)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[-1] != cov.shape[0]:
        raise ValueError(f"x_t has {x_t.shape[-1]} entries, window has {cov.shape[0]}")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError("singular perturbed covariance") from err
    precision = np.linalg.inv(chol).T @ np.linalg.inv(chol)
    return -x_t @ precision


def gaussian_chain_logpdf(spec: GaussianChainSpec, x_t, t, window=None,
                          schedule=DEFAULT_SCHEDULE) -> np.ndarray:
    cov = spec.perturbed_covariance(t, window, schedule)
    x_t = np.asarray(x_t, dtype=np.float64)
    sign, logdet = np.linalg.slogdet(cov)
    quad = np.einsum("...i,ij,...j->...", x_t, np.linalg.inv(cov), x_t)
    return -0.5 * (quad + logdet + cov.shape[0] * np.log(2 * np.pi))


class GaussianChainLocalScore:
    """Exact local scores of the chain: window ``j`` covers states ``j .. j+2k``."""

    def __init__(self, spec: GaussianChainSpec, k: int, schedule=DEFAULT_SCHEDULE):
        self.spec = spec
        self.k = k
        self.schedule = schedule

    def _precisions(self, n_windows, t):
        size = 2 * self.k + 1
        return np.stack([
            np.linalg.inv(self.spec.perturbed_covariance(t, slice(j, j + size), self.schedule))
            for j in range(n_windows)
        ])

    def __call__(self, windows, t):
        windows = np.asarray(windows, dtype=np.float64)
        prec = self._precisions(windows.shape[-3], t)
        # windows (..., n, 2k+1, 1)
        return -np.einsum("nij,...njd->...nid", prec, windows)

    def vjp(self, windows, t):
        windows = np.asarray(windows, dtype=np.float64)
        prec = self._precisions(windows.shape[-3], t)
        score = -np.einsum("nij,...njd->...nid", prec, windows)
        return score, lambda cot: -np.einsum("nji,...njd->...nid", prec, cot)


def composition_error(spec: GaussianChainSpec, k: int, t, n_samples: int, rng,
                      schedule=DEFAULT_SCHEDULE) -> float:
    """Relative L2 error of the composed windowed score vs the exact chain score.

    Errors are pooled over ``n_samples`` draws of the perturbed chain.
    """
    cov = spec.perturbed_covariance(t, schedule=schedule)
    x_t = rng.multivariate_normal(np.zeros(spec.length), cov, size=n_samples)
    exact = gaussian_chain_score(spec, x_t, t, schedule=schedule)
    local = GaussianChainLocalScore(spec, k, schedule)
    composed = compose_score(local, x_t[..., None], t)[..., 0]
    return float(np.linalg.norm(composed - exact) / np.linalg.norm(exact))


def mc_unbiasedness_check(spec: GaussianChainSpec, i: int, window, t, n_samples: int, rng,
                          x_window=None, schedule=DEFAULT_SCHEDULE):
    """Monte Carlo gap between the windowed score and the expected full score.

    The windowed score of state ``i`` equals the expectation of the full
    score over the states outside ``window``, conditioned on the window.
    A perturbed window ``x_window`` is drawn from its marginal when omitted.

    Returns:
        ``(gap, stderr)``: absolute difference between the Monte Carlo mean
        of the full score row ``i`` and the windowed score, and the standard
        error of that mean.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    inside = _indices(window, spec.length)
    if i not in inside:
        raise ValueError("window must contain i")
    outside = np.setdiff1d(np.arange(spec.length), inside)
    cov = spec.perturbed_covariance(t, schedule=schedule)
    c_ww = cov[np.ix_(inside, inside)]
    if x_window is None:
        x_window = rng.multivariate_normal(np.zeros(len(inside)), c_ww)
    x_window = np.asarray(x_window, dtype=np.float64)
    pos = int(np.flatnonzero(inside == i)[0])
    windowed = gaussian_chain_score(spec, x_window, t, window=inside, schedule=schedule)[pos]
    if outside.size == 0:
        return 0.0, 0.0
    c_ow = cov[np.ix_(outside, inside)]
    c_oo = cov[np.ix_(outside, outside)]
    gain = np.linalg.solve(c_ww, c_ow.T).T
    cond_mean = gain @ x_window
    cond_cov = c_oo - gain @ c_ow.T
    x_out = rng.multivariate_normal(cond_mean, cond_cov, size=n_samples, method="cholesky")
    full = np.empty((n_samples, spec.length))
    full[:, inside] = x_window
    full[:, outside] = x_out
    rows = gaussian_chain_score(spec, full, t, schedule=schedule)[:, i]
    gap = abs(rows.mean() - windowed)
    return float(gap), float(rows.std(ddof=1) / np.sqrt(n_samples))
