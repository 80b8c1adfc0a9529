"""Denoising score matching on random trajectory windows."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import DEFAULT_SCHEDULE, schedule_coefficients
from .scorenet import (
    NetworkConfig,
    OptimizerState,
    Parameters,
    adamw_step,
    build_network,
    eps_eval,
    network_output,
    value_and_grad,
)

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 256
    batches_per_epoch: int = 64
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    k: int = 2
    seed: int = 0
    valid_size: int = 1024
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("epochs", "batches_per_epoch", "batch_size", "valid_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.k < 1:
            raise ValueError("k must be at least 1")


@dataclass
class TrainResult:
    params: Parameters
    state: OptimizerState
    history: list = field(default_factory=list)


def sample_segment(trajectory, k: int, rng) -> np.ndarray:
    """Window ``x[i-k : i+k]`` with ``i`` uniform over the valid centers."""
    trajectory = np.asarray(trajectory)
    length = trajectory.shape[0]
    if length < 2 * k + 1:
        raise ValueError(f"trajectory of length {length} is shorter than a window of radius {k}")
    start = rng.integers(0, length - 2 * k)
    return trajectory[start:start + 2 * k + 1]


def sample_segments(states, k: int, size: int, rng) -> np.ndarray:
    """Batch of ``size`` windows from an ``(n, L, D)`` array of trajectories."""
    states = np.asarray(states)
    n, length = states.shape[:2]
    if length < 2 * k + 1:
        raise ValueError(f"trajectories of length {length} are shorter than a window of radius {k}")
    which = rng.integers(0, n, size=size)
    start = rng.integers(0, length - 2 * k, size=size)
    offsets = start[:, None] + np.arange(2 * k + 1)
    return states[which[:, None], offsets]


def dsm_loss(params: Parameters, segment, t, eps, schedule=DEFAULT_SCHEDULE) -> float:
    """``||eps_phi(mu x + sigma eps, t) - eps||^2``, averaged over leading batch axes.

    ``segment`` and ``eps`` have shape ``(..., 2k+1, D)``; ``t`` is a scalar
    or one time per batch element.
    """
    segment, eps = np.asarray(segment, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if segment.shape != eps.shape:
        raise ValueError("segment and eps shapes differ")
    batch = segment.shape[:-2]
    mu, sigma = schedule_coefficients(np.broadcast_to(t, batch) if batch else t, schedule)
    mu = np.asarray(mu)[..., None, None]
    sigma = np.asarray(sigma)[..., None, None]
    x_t = (mu * segment + sigma * eps).reshape(batch + (-1,))
    out = eps_eval(params, x_t, t)
    return float(np.mean(np.sum((out - eps.reshape(batch + (-1,))) ** 2, axis=-1)))


def _batch_loss(weights, x_t, t, eps_flat, emb_dim):
    out = network_output(weights, x_t, t, emb_dim)
    return ad.mean_square(ad.add(out, -eps_flat), scale=eps_flat.shape[-1])


def _noisy_batch(windows, rng, schedule, dtype):
    size = windows.shape[0]
    t = rng.uniform(0.0, 1.0, size=size)
    eps = rng.standard_normal(windows.shape)
    mu, sigma = schedule_coefficients(t, schedule)
    x_t = mu[:, None, None] * windows + sigma[:, None, None] * eps
    return x_t.reshape(size, -1).astype(dtype), t, eps.reshape(size, -1).astype(dtype)


def train(dataset, net_config: NetworkConfig, config: TrainConfig, *, params=None, state=None,
          log_path=None, schedule=DEFAULT_SCHEDULE) -> TrainResult:
    """Fit ``eps_phi`` on windows of the training split of ``dataset``.

    ``dataset`` is a :class:`~sda.lorenz.TrajectoryStore` (or anything with a
    ``split(name)`` method returning ``(n, L, D)`` arrays). Passing ``params``
    and ``state`` resumes a run: epochs already covered by ``state.step`` are
    skipped and the per-epoch random streams are the same as in an
    uninterrupted run.
    """
    if net_config.window_radius != config.k:
        raise ValueError(f"network radius {net_config.window_radius} != training k {config.k}")
    train_states = np.asarray(dataset.split("train"))
    valid_states = np.asarray(dataset.split("valid"))
    if train_states.size == 0:
        raise ValueError("empty training split")
    if train_states.shape[-1] != net_config.state_dim:
        raise ValueError("state dimension of the dataset does not match the network")
    dtype = np.dtype(config.dtype)
    total_steps = config.epochs * config.batches_per_epoch
    if params is None:
        params = build_network(net_config, dtype=dtype)
    params = params.astype(dtype)
    if state is None:
        state = OptimizerState.zeros_like(params, learning_rate=config.learning_rate,
                                          weight_decay=config.weight_decay, total_steps=total_steps)
    else:
        state.total_steps = total_steps

    valid_rng = np.random.default_rng([config.seed, 1, 0])
    valid_src = valid_states if valid_states.size else train_states
    valid_windows = sample_segments(valid_src, config.k, config.valid_size, valid_rng)
    valid_batch = _noisy_batch(valid_windows, valid_rng, schedule, dtype)

    def valid_loss(p):
        x_t, t, eps = valid_batch
        out = eps_eval(p, x_t, t)
        return float(np.mean(np.sum((out - eps) ** 2, axis=-1, dtype=np.float64)))

    emb_dim = net_config.time_embedding_dim
    history = []
    log_file = None
    if log_path is not None:
        resuming = state.step > 0
        log_file = open(log_path, "a" if resuming else "w")
        if not resuming:
            log_file.write("epoch,mean_train_loss,mean_valid_loss\n")
    try:
        for epoch in range(state.step // config.batches_per_epoch, config.epochs):
            rng = np.random.default_rng([config.seed, 0, epoch])
            losses = []
            for b in range(config.batches_per_epoch):
                windows = sample_segments(train_states, config.k, config.batch_size, rng)
                x_t, t, eps = _noisy_batch(windows, rng, schedule, dtype)
                loss, g = value_and_grad(params, _batch_loss, x_t, t, eps, emb_dim)
                if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {b} (step {state.step}); "
                        f"last losses {losses[-5:]}")
                params, state = adamw_step(params, g, state)
                losses.append(loss)
            row = (epoch, float(np.mean(losses)), valid_loss(params))
            history.append(row)
            log.info("epoch %d train %.5f valid %.5f", *row)
            if log_file is not None:
                log_file.write(f"{row[0]},{row[1]:.8g},{row[2]:.8g}\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(params, state, history)
