"""Observation operators, Gaussian observation processes and the SDAO file format.

Operators act on trajectories of shape ``(..., L, D)`` and return flat
observations ``(..., M)``. Each one provides a vector-Jacobian product and a
JSON-able descriptor. Operators whose outputs each depend on a single time
step also expose ``time_index`` / ``apply_step`` so that sequential methods
(the particle filter) can evaluate the likelihood step by step.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

OBSERVATION_MAGIC = b"SDAO"


class NotFactorizable(ValueError):
    """The operator mixes several time steps into one observed entry."""


class Operator:
    name = "operator"

    def __call__(self, x) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, x, cot) -> np.ndarray:
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError

    def time_index(self, length: int, dim: int) -> np.ndarray:
        raise NotFactorizable(f"{self.name} does not factorize over time")

    def apply_step(self, x_i, i: int, length: int) -> np.ndarray:
        raise NotFactorizable(f"{self.name} does not factorize over time")

    def output_size(self, length: int, dim: int) -> int:
        return int(self(np.zeros((length, dim))).shape[-1])


class Subsample(Operator):
    """Every ``stride``-th state starting at ``start``, restricted to ``coords``.

    With the defaults this is the identity (flattened).
    """

    name = "subsample"

    def __init__(self, stride: int = 1, start: int = 0, coords=None):
        if stride < 1 or start < 0:
            raise ValueError("stride must be >= 1 and start >= 0")
        self.stride = int(stride)
        self.start = int(start)
        self.coords = None if coords is None else [int(c) for c in coords]

    def _coords(self, dim):
        return list(range(dim)) if self.coords is None else self.coords

    def __call__(self, x):
        x = np.asarray(x)
        sel = x[..., self.start::self.stride, :][..., self._coords(x.shape[-1])]
        return sel.reshape(x.shape[:-2] + (-1,))

    def vjp(self, x, cot):
        x = np.asarray(x)
        out = np.zeros(np.broadcast_shapes(x.shape, np.shape(cot)[:-1] + x.shape[-2:]))
        coords = self._coords(x.shape[-1])
        n_steps = len(range(self.start, x.shape[-2], self.stride))
        block = np.asarray(cot).reshape(np.shape(cot)[:-1] + (n_steps, len(coords)))
        view = out[..., self.start::self.stride, :]
        view[..., coords] = block
        return out

    def time_index(self, length, dim):
        steps = np.arange(self.start, length, self.stride)
        return np.repeat(steps, len(self._coords(dim)))

    def apply_step(self, x_i, i, length):
        x_i = np.asarray(x_i)
        if i < self.start or (i - self.start) % self.stride:
            return x_i[..., :0]
        return x_i[..., self._coords(x_i.shape[-1])]

    def descriptor(self):
        return {"name": self.name, "stride": self.stride, "start": self.start, "coords": self.coords}


class Mask(Operator):
    """Entries of the trajectory selected by a boolean ``(L, D)`` mask."""

    name = "mask"

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValueError("mask must have shape (L, D)")

    def __call__(self, x):
        return np.asarray(x)[..., self.mask]

    def vjp(self, x, cot):
        x = np.asarray(x)
        out = np.zeros(np.shape(cot)[:-1] + x.shape[-2:])
        out[..., self.mask] = cot
        return out

    def time_index(self, length, dim):
        return np.nonzero(self.mask)[0]

    def apply_step(self, x_i, i, length):
        return np.asarray(x_i)[..., self.mask[i]]

    def descriptor(self):
        return {"name": self.name, "mask": self.mask.astype(int).tolist()}


class Average(Operator):
    """Mean over the state coordinates (``axis="state"``) or over blocks of
    ``size`` consecutive time steps (``axis="time"``)."""

    name = "average"

    def __init__(self, axis: str = "state", size: int = 1):
        if axis not in ("state", "time"):
            raise ValueError("axis must be 'state' or 'time'")
        if size < 1:
            raise ValueError("size must be positive")
        self.axis = axis
        self.size = int(size)

    def __call__(self, x):
        x = np.asarray(x)
        if self.axis == "state":
            return x.mean(axis=-1)
        n = x.shape[-2] // self.size
        blocks = x[..., :n * self.size, :].reshape(x.shape[:-2] + (n, self.size, x.shape[-1]))
        return blocks.mean(axis=-2).reshape(x.shape[:-2] + (-1,))

    def vjp(self, x, cot):
        x = np.asarray(x)
        cot = np.asarray(cot)
        batch = cot.shape[:-1]
        length, dim = x.shape[-2:]
        out = np.zeros(batch + (length, dim))
        if self.axis == "state":
            out += cot[..., :, None] / dim
            return out
        n = length // self.size
        per = cot.reshape(batch + (n, 1, dim)) / self.size
        out[..., :n * self.size, :] = np.broadcast_to(per, batch + (n, self.size, dim)).reshape(
            batch + (n * self.size, dim))
        return out

    def time_index(self, length, dim):
        if self.axis == "time" and self.size > 1:
            return super().time_index(length, dim)
        if self.axis == "time":
            return np.repeat(np.arange(length), dim)
        return np.arange(length)

    def apply_step(self, x_i, i, length):
        x_i = np.asarray(x_i)
        if self.axis == "time" and self.size > 1:
            return super().apply_step(x_i, i, length)
        if self.axis == "time":
            return x_i
        return x_i.mean(axis=-1, keepdims=True)

    def descriptor(self):
        return {"name": self.name, "axis": self.axis, "size": self.size}


class Saturate(Operator):
    """``u / (1 + |u|)`` applied to the output of an inner operator."""

    name = "saturate"

    def __init__(self, inner: Operator | None = None):
        self.inner = Subsample() if inner is None else inner

    @staticmethod
    def _sat(u):
        return u / (1.0 + np.abs(u))

    def __call__(self, x):
        return self._sat(self.inner(x))

    def vjp(self, x, cot):
        u = self.inner(x)
        return self.inner.vjp(x, np.asarray(cot) / (1.0 + np.abs(u)) ** 2)

    def time_index(self, length, dim):
        return self.inner.time_index(length, dim)

    def apply_step(self, x_i, i, length):
        return self._sat(self.inner.apply_step(x_i, i, length))

    def descriptor(self):
        return {"name": self.name, "inner": self.inner.descriptor()}


class Constant(Operator):
    """``m`` zeros, whatever the state: an uninformative observation."""

    name = "constant"

    def __init__(self, size: int = 1):
        self.size = int(size)

    def __call__(self, x):
        x = np.asarray(x)
        return np.zeros(x.shape[:-2] + (self.size,))

    def vjp(self, x, cot):
        return np.zeros(np.shape(cot)[:-1] + np.shape(x)[-2:])

    def time_index(self, length, dim):
        return np.full(self.size, -1)

    def apply_step(self, x_i, i, length):
        return np.asarray(x_i)[..., :0]

    def descriptor(self):
        return {"name": self.name, "size": self.size}


def operator_from_descriptor(desc: dict) -> Operator:
    desc = dict(desc)
    name = desc.pop("name")
    if name == "subsample":
        return Subsample(**desc)
    if name == "mask":
        return Mask(np.asarray(desc["mask"], dtype=bool))
    if name == "average":
        return Average(**desc)
    if name == "saturate":
        return Saturate(operator_from_descriptor(desc["inner"]))
    if name == "constant":
        return Constant(**desc)
    raise ValueError(f"unknown observation operator {name!r}")


@dataclass
class ObservationProcess:
    """``y = A(x) + eta`` with ``eta ~ N(0, diag(noise_var))``."""

    operator: Operator
    noise_var: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.noise_var = np.broadcast_to(np.asarray(self.noise_var, dtype=np.float64),
                                         self.y.shape).copy()
        if self.y.ndim != 1:
            raise ValueError("y must be a vector")
        if np.any(self.noise_var <= 0):
            raise ValueError("observation noise variances must be positive")

    @property
    def size(self) -> int:
        return self.y.size

    @classmethod
    def simulate(cls, operator: Operator, noise_var, x, rng) -> "ObservationProcess":
        clean = operator(x)
        noise_var = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), clean.shape)
        return cls(operator, noise_var, clean + np.sqrt(noise_var) * rng.standard_normal(clean.shape))

    def log_likelihood(self, x) -> np.ndarray:
        """``log N(y | A(x), Sigma_y)`` for each trajectory in ``x``."""
        r = self.y - self.operator(x)
        return -0.5 * (np.sum(r * r / self.noise_var, axis=-1)
                       + np.sum(np.log(2 * np.pi * self.noise_var)))

    def step_log_likelihoods(self, length: int, dim: int):
        """Per-step log-likelihood functions ``f_i(x_i) -> (...)`` and a constant.

        The constant collects entries that depend on no time step. Raises
        :class:`NotFactorizable` for operators mixing time steps.
        """
        index = self.operator.time_index(length, dim)
        if index.shape != self.y.shape:
            raise ValueError("operator output size does not match the observation")
        free = index < 0
        r0 = self.y[free] - self.operator(np.zeros((length, dim)))[free]
        constant = -0.5 * float(np.sum(r0 * r0 / self.noise_var[free])
                                + np.sum(np.log(2 * np.pi * self.noise_var[free])))
        funcs = []
        for i in range(length):
            sel = index == i
            y_i, v_i = self.y[sel], self.noise_var[sel]
            const = -0.5 * np.sum(np.log(2 * np.pi * v_i))

            def f(x_i, i=i, y_i=y_i, v_i=v_i, const=const):
                r = y_i - self.operator.apply_step(x_i, i, length)
                return const - 0.5 * np.sum(r * r / v_i, axis=-1)

            funcs.append(f)
        return funcs, constant


def save_observation(path, obs: ObservationProcess) -> None:
    descriptor = json.dumps(obs.operator.descriptor(), sort_keys=True)
    with open(path, "wb") as f:
        f.write(OBSERVATION_MAGIC)
        f.write(struct.pack("<Q", obs.size))
        f.write(obs.y.astype("<f4").tobytes())
        f.write(obs.noise_var.astype("<f4").tobytes())
        f.write(descriptor.encode("utf-8"))


def load_observation(path) -> ObservationProcess:
    data = Path(path).read_bytes()
    if data[:4] != OBSERVATION_MAGIC:
        raise ValueError(f"{path}: not an observation file")
    (m,) = struct.unpack_from("<Q", data, 4)
    y = np.frombuffer(data, "<f4", m, 12).astype(np.float64)
    var = np.frombuffer(data, "<f4", m, 12 + 4 * m).astype(np.float64)
    desc = json.loads(data[12 + 8 * m:].decode("utf-8"))
    return ObservationProcess(operator_from_descriptor(desc), var, y)
