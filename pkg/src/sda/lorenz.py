"""Stochastic Lorenz 1963 system, trajectory stores and the SDAT file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

TRAJECTORY_MAGIC = b"SDAT"
TRAJECTORY_VERSION = 1

INITIAL_LOW = np.array([-20.0, -20.0, 0.0])
INITIAL_HIGH = np.array([20.0, 30.0, 50.0])


@dataclass(frozen=True)
class LorenzParams:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.025
    substeps: int = 32

    def __post_init__(self):
        if self.dt <= 0 or self.substeps < 1:
            raise ValueError("dt must be positive and substeps at least 1")

    @property
    def noise_var(self) -> float:
        return self.dt


def lorenz_drift(state, params: LorenzParams = LorenzParams()) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    a, b, c = state[..., 0], state[..., 1], state[..., 2]
    return np.stack([
        params.sigma * (b - a),
        a * (params.rho - c) - b,
        a * b - params.beta * c,
    ], axis=-1)


def integrate(state, params: LorenzParams = LorenzParams(), substeps: int | None = None) -> np.ndarray:
    """Deterministic map: RK4 over ``params.dt`` time units."""
    n = params.substeps if substeps is None else substeps
    h = params.dt / n
    x = np.asarray(state, dtype=np.float64)
    for _ in range(n):
        k1 = lorenz_drift(x, params)
        k2 = lorenz_drift(x + 0.5 * h * k1, params)
        k3 = lorenz_drift(x + 0.5 * h * k2, params)
        k4 = lorenz_drift(x + h * k3, params)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def transition(state, rng, params: LorenzParams = LorenzParams()) -> np.ndarray:
    """``M(x) + eta`` with ``eta ~ N(0, dt I)``."""
    out = integrate(state, params)
    out = out + np.sqrt(params.noise_var) * rng.standard_normal(out.shape)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite Lorenz state")
    return out


def transition_logpdf(x_next, x, params: LorenzParams = LorenzParams()) -> np.ndarray:
    # far-off-attractor states may overflow; that is a legitimate -inf density
    with np.errstate(over="ignore", invalid="ignore"):
        r = np.asarray(x_next) - integrate(x, params)
        quad = np.sum(r * r, axis=-1) / params.noise_var
    return -0.5 * (quad + r.shape[-1] * np.log(2 * np.pi * params.noise_var))


def simulate(n: int, length: int, rng, burn_in: int = 1024,
             params: LorenzParams = LorenzParams()) -> np.ndarray:
    """``n`` trajectories of ``length`` states after ``burn_in`` discarded steps."""
    if burn_in < 1:
        raise ValueError("burn_in must be at least 1")
    x = rng.uniform(INITIAL_LOW, INITIAL_HIGH, size=(n, 3))
    for _ in range(burn_in):
        x = transition(x, rng, params)
    out = np.empty((n, length, 3))
    for i in range(length):
        out[:, i] = x
        if i + 1 < length:
            x = transition(x, rng, params)
    return out


def split_sizes(n: int) -> dict[str, int]:
    """80/10/10 split by whole trajectories."""
    n_valid = int(round(0.1 * n))
    n_eval = int(round(0.1 * n))
    return {"train": n - n_valid - n_eval, "valid": n_valid, "eval": n_eval}


@dataclass
class TrajectoryStore:
    """Trajectories ``(n, L, D)`` with a per-channel affine standardization.

    Stored ``states`` relate to raw coordinates through
    ``raw = states * stds + means``; a non-standardized store has zero means
    and unit stds.
    """

    states: np.ndarray
    means: np.ndarray = None
    stds: np.ndarray = None
    splits: dict = field(default_factory=dict)
    dt: float = LorenzParams().dt

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 3:
            raise ValueError("states must have shape (n, L, D)")
        d = self.states.shape[-1]
        self.means = np.zeros(d) if self.means is None else np.asarray(self.means, dtype=np.float64)
        self.stds = np.ones(d) if self.stds is None else np.asarray(self.stds, dtype=np.float64)
        if not self.splits:
            self.splits = split_sizes(self.states.shape[0])

    @property
    def standardized(self) -> bool:
        return not (np.all(self.means == 0) and np.all(self.stds == 1))

    def split(self, name: str) -> np.ndarray:
        order = ["train", "valid", "eval"]
        if name not in order:
            raise KeyError(name)
        start = sum(self.splits[k] for k in order[:order.index(name)])
        return self.states[start:start + self.splits[name]]

    def raw(self, states=None) -> np.ndarray:
        states = self.states if states is None else np.asarray(states)
        return states * self.stds + self.means

    def to_standard(self, raw) -> np.ndarray:
        return (np.asarray(raw) - self.means) / self.stds


def generate_dataset(n_traj: int, length: int, rng, burn_in: int = 1024,
                     params: LorenzParams = LorenzParams()) -> TrajectoryStore:
    return TrajectoryStore(simulate(n_traj, length, rng, burn_in, params), dt=params.dt)


def standardize(store: TrajectoryStore) -> TrajectoryStore:
    """Standardize every split with training-split channel statistics."""
    raw = store.raw()
    train = TrajectoryStore(raw, splits=store.splits).split("train")
    if train.size == 0:
        raise ValueError("training split is empty")
    flat = train.reshape(-1, train.shape[-1])
    means = flat.mean(axis=0)
    stds = flat.std(axis=0)
    if np.any(stds == 0):
        raise ValueError("zero-variance channel in the training split")
    return replace(store, states=(raw - means) / stds, means=means, stds=stds)


def destandardize(store: TrajectoryStore) -> TrajectoryStore:
    d = store.states.shape[-1]
    return replace(store, states=store.raw(), means=np.zeros(d), stds=np.ones(d))


class LorenzModel:
    """Lorenz transition model acting on standardized coordinates.

    Sampling happens in standardized coordinates; ``transition_logpdf``
    reports densities of the raw-coordinate model.
    """

    def __init__(self, means, stds, params: LorenzParams = LorenzParams(), background=None):
        self.means = np.asarray(means, dtype=np.float64)
        self.stds = np.asarray(stds, dtype=np.float64)
        self.params = params
        self.background = None if background is None else np.asarray(background).reshape(-1, 3)

    @classmethod
    def from_store(cls, store: TrajectoryStore, params: LorenzParams = LorenzParams()) -> "LorenzModel":
        return cls(store.means, store.stds, params, background=store.split("train"))

    def sample_initial(self, n: int, rng) -> np.ndarray:
        """Draw from the stationary regime: random training states."""
        if self.background is None:
            raise ValueError("no background states available")
        return self.background[rng.integers(0, len(self.background), size=n)].copy()

    def sample_transition(self, x, rng) -> np.ndarray:
        raw = x * self.stds + self.means
        return (transition(raw, rng, self.params) - self.means) / self.stds

    def transition_logpdf(self, x_next, x) -> np.ndarray:
        return transition_logpdf(np.asarray(x_next) * self.stds + self.means,
                                 np.asarray(x) * self.stds + self.means, self.params)


def save_trajectories(path, states, means=None, stds=None) -> None:
    states = np.asarray(states)
    n, length, d = states.shape
    means = np.zeros(d) if means is None else np.asarray(means)
    stds = np.ones(d) if stds is None else np.asarray(stds)
    with open(path, "wb") as f:
        f.write(TRAJECTORY_MAGIC)
        f.write(struct.pack("<I", TRAJECTORY_VERSION))
        f.write(struct.pack("<QQQ", n, length, d))
        f.write(means.astype("<f8").tobytes())
        f.write(stds.astype("<f8").tobytes())
        f.write(states.astype("<f4").tobytes())


def load_trajectories(path):
    """Return ``(states, means, stds)`` from an SDAT file."""
    data = Path(path).read_bytes()
    if data[:4] != TRAJECTORY_MAGIC:
        raise ValueError(f"{path}: not a trajectory file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != TRAJECTORY_VERSION:
        raise ValueError(f"{path}: unsupported trajectory file version {version}")
    n, length, d = struct.unpack_from("<QQQ", data, 8)
    offset = 32
    means = np.frombuffer(data, "<f8", d, offset).copy()
    stds = np.frombuffer(data, "<f8", d, offset + 8 * d).copy()
    offset += 16 * d
    expected = offset + 4 * n * length * d
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    states = np.frombuffer(data, "<f4", n * length * d, offset).astype(np.float64)
    return states.reshape(n, length, d), means, stds


def save_store(path, store: TrajectoryStore) -> None:
    save_trajectories(path, store.states, store.means, store.stds)


def load_store(path, splits=None) -> TrajectoryStore:
    states, means, stds = load_trajectories(path)
    return TrajectoryStore(states, means, stds, splits=dict(splits or {}))
