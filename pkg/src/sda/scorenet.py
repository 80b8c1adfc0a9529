"""Local denoiser ``eps_phi`` over flattened windows of ``2k+1`` states.

The network is a residual MLP: the flattened window is concatenated with a
sinusoidal embedding of the diffusion time, lifted to ``hidden_features``,
passed through ``residual_blocks`` blocks of
``h + fc2(silu(fc1(layer_norm(h))))`` and projected back by a final
``layer_norm -> silu -> affine`` head whose affine map starts at zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .diffusion import DEFAULT_SCHEDULE, DiffusionSchedule, schedule_coefficients

CHECKPOINT_MAGIC = b"SDCK"
CHECKPOINT_VERSION = 1
OPTIMIZER_MAGIC = b"SDOS"

# s = -eps / sigma is undefined at t = 0, where correctors may still query it.
SIGMA_MIN = 1e-3


@dataclass(frozen=True)
class NetworkConfig:
    window_radius: int
    state_dim: int
    hidden_features: int = 256
    residual_blocks: int = 5
    time_embedding_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("window_radius", "state_dim", "hidden_features", "residual_blocks",
                     "time_embedding_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.time_embedding_dim % 2:
            raise ValueError("time_embedding_dim must be even")

    @property
    def window_size(self) -> int:
        return 2 * self.window_radius + 1

    @property
    def window_features(self) -> int:
        return self.window_size * self.state_dim

    @property
    def input_features(self) -> int:
        return self.window_features + self.time_embedding_dim

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered ``(name, shape)`` registry of every parameter tensor."""
        h, n_in, n_out = self.hidden_features, self.input_features, self.window_features
        entries = [("in.w", (n_in, h)), ("in.b", (h,))]
        for j in range(self.residual_blocks):
            entries += [
                (f"block{j}.ln.g", (h,)), (f"block{j}.ln.b", (h,)),
                (f"block{j}.fc1.w", (h, h)), (f"block{j}.fc1.b", (h,)),
                (f"block{j}.fc2.w", (h, h)), (f"block{j}.fc2.b", (h,)),
            ]
        entries += [("out.ln.g", (h,)), ("out.ln.b", (h,)), ("out.w", (h, n_out)), ("out.b", (n_out,))]
        return entries


@dataclass
class Parameters:
    config: NetworkConfig
    flat: np.ndarray

    def __post_init__(self):
        size = sum(int(np.prod(shape)) for _, shape in self.config.layout())
        if self.flat.ndim != 1 or self.flat.size != size:
            raise ValueError(f"expected {size} parameters, got shape {self.flat.shape}")

    def views(self) -> dict[str, np.ndarray]:
        out, offset = {}, 0
        for name, shape in self.config.layout():
            n = int(np.prod(shape))
            out[name] = self.flat[offset:offset + n].reshape(shape)
            offset += n
        return out

    def astype(self, dtype) -> "Parameters":
        return Parameters(self.config, self.flat.astype(dtype))

    def copy(self) -> "Parameters":
        return Parameters(self.config, self.flat.copy())


def build_network(config: NetworkConfig, dtype=np.float64) -> Parameters:
    """Deterministically initialize parameters from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    chunks = []
    for name, shape in config.layout():
        if name == "out.w" or name.endswith(".b"):
            value = np.zeros(shape)
        elif name.endswith(".g"):
            value = np.ones(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        chunks.append(value.ravel())
    return Parameters(config, np.concatenate(chunks).astype(dtype))


def time_embedding(t, dim: int, batch_shape=()) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), batch_shape)
    freqs = np.pi * np.geomspace(1.0, 100.0, dim // 2)
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def _forward(weights: dict, z):
    h = ad.affine(z, weights["in.w"], weights["in.b"])
    j = 0
    while f"block{j}.ln.g" in weights:
        u = ad.layer_norm(h, weights[f"block{j}.ln.g"], weights[f"block{j}.ln.b"])
        u = ad.silu(ad.affine(u, weights[f"block{j}.fc1.w"], weights[f"block{j}.fc1.b"]))
        u = ad.affine(u, weights[f"block{j}.fc2.w"], weights[f"block{j}.fc2.b"])
        h = ad.add(h, u)
        j += 1
    h = ad.silu(ad.layer_norm(h, weights["out.ln.g"], weights["out.ln.b"]))
    return ad.affine(h, weights["out.w"], weights["out.b"])


def _network_input(params: Parameters, window, t):
    cfg = params.config
    window = np.asarray(window)
    if window.shape[-1] != cfg.window_features:
        raise ValueError(f"window has {window.shape[-1]} features, expected {cfg.window_features}")
    if not np.all(np.isfinite(window)):
        raise FloatingPointError("non-finite network input")
    batch = window.shape[:-1]
    emb = time_embedding(t, cfg.time_embedding_dim, batch)
    dtype = params.flat.dtype
    return window.astype(dtype, copy=False), emb.astype(dtype)


def eps_eval(params: Parameters, window, t) -> np.ndarray:
    """Evaluate the denoiser on flattened windows of shape ``(..., (2k+1) D)``.

    ``t`` is a scalar or broadcasts against the batch shape.
    """
    x, emb = _network_input(params, window, t)
    weights = {k: ad.leaf(v) for k, v in params.views().items()}
    return _forward(weights, ad.concat(x, emb)).value


def eps_vjp(params: Parameters, window, t):
    """Return ``(eps, vjp)`` where ``vjp(cot)`` is the cotangent w.r.t. ``window``."""
    x, emb = _network_input(params, window, t)
    weights = {k: ad.leaf(v) for k, v in params.views().items()}
    xin = ad.leaf(x, requires_grad=True)
    out = _forward(weights, ad.concat(xin, emb))

    def vjp(cot):
        xin.grad = None
        ad.backward(out, np.asarray(cot, dtype=out.value.dtype))
        return xin.grad

    return out.value, vjp


def value_and_grad(params: Parameters, loss_fn, *args):
    """Evaluate ``loss_fn(weights, *args)`` and its gradient w.r.t. every parameter.

    ``weights`` maps registry names to graph leaves; the loss must be a scalar
    built from the supported primitives.
    """
    views = params.views()
    weights = {k: ad.leaf(v, requires_grad=True) for k, v in views.items()}
    loss = loss_fn(weights, *args)
    if not isinstance(loss, ad.Var) or loss.value.size != 1:
        raise ValueError("loss_fn must return a scalar graph node")
    ad.backward(loss)
    grads = [np.zeros(views[k].size, dtype=params.flat.dtype) if w.grad is None else w.grad.ravel()
             for k, w in weights.items()]
    return float(loss.value), np.concatenate(grads)


def grad(params: Parameters, loss_fn, *args) -> np.ndarray:
    return value_and_grad(params, loss_fn, *args)[1]


def network_output(weights: dict, window, t, time_embedding_dim: int):
    """Graph-level forward pass, for use inside ``loss_fn`` of :func:`value_and_grad`."""
    window = np.asarray(window)
    dtype = weights["in.w"].value.dtype
    emb = time_embedding(t, time_embedding_dim, window.shape[:-1]).astype(dtype)
    return _forward(weights, ad.concat(window.astype(dtype, copy=False), emb))


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    total_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Parameters, **kwargs) -> "OptimizerState":
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat), **kwargs)

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.learning_rate
        return self.learning_rate * max(0.0, 1.0 - self.step / self.total_steps)


def adamw_step(params: Parameters, grads: np.ndarray, state: OptimizerState):
    """One AdamW update with decoupled weight decay and a linear learning-rate decay."""
    if grads.shape != params.flat.shape or state.m.shape != params.flat.shape:
        raise ValueError("gradient / optimizer state shape mismatch")
    lr = state.current_lr()
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    flat = params.flat * (1.0 - lr * state.weight_decay)
    flat = flat - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return Parameters(params.config, flat.astype(params.flat.dtype)), replace(state, m=m, v=v, step=step)


class NetworkScore:
    """Local score ``s = -eps_phi / sigma(t)`` on windows ``(..., 2k+1, D)``."""

    def __init__(self, params: Parameters, schedule: DiffusionSchedule = DEFAULT_SCHEDULE,
                 sigma_min: float = SIGMA_MIN, dtype=np.float32):
        self.params = params.astype(dtype) if dtype is not None else params
        self.schedule = schedule
        self.sigma_min = sigma_min

    @property
    def k(self) -> int:
        return self.params.config.window_radius

    def _sigma(self, t):
        return max(schedule_coefficients(t, self.schedule)[1], self.sigma_min)

    def __call__(self, windows, t):
        windows = np.asarray(windows)
        flat = windows.reshape(windows.shape[:-2] + (-1,))
        eps = eps_eval(self.params, flat, t)
        return (-eps / self._sigma(t)).astype(np.float64).reshape(windows.shape)

    def vjp(self, windows, t):
        windows = np.asarray(windows)
        shape = windows.shape
        eps, eps_cot = eps_vjp(self.params, windows.reshape(shape[:-2] + (-1,)), t)
        sigma = self._sigma(t)

        def vjp(cot):
            cot = np.asarray(cot).reshape(shape[:-2] + (-1,))
            return (-eps_cot(cot) / sigma).astype(np.float64).reshape(shape)

        return (-eps / sigma).astype(np.float64).reshape(shape), vjp


def save_checkpoint(path, params: Parameters) -> None:
    header = json.dumps(asdict(params.config), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<Q", params.flat.size))
        f.write(params.flat.astype("<f4").tobytes())


def load_checkpoint(path) -> Parameters:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n_header,) = struct.unpack_from("<I", data, 8)
    config = NetworkConfig(**json.loads(data[12:12 + n_header]))
    offset = 12 + n_header
    (n,) = struct.unpack_from("<Q", data, offset)
    flat = np.frombuffer(data, dtype="<f4", count=n, offset=offset + 8).astype(np.float32)
    return Parameters(config, flat)


def save_optimizer(path, state: OptimizerState) -> None:
    with open(path, "wb") as f:
        f.write(OPTIMIZER_MAGIC)
        f.write(struct.pack("<QQ", state.step, state.total_steps or 0))
        f.write(struct.pack("<5d", state.learning_rate, state.weight_decay,
                            state.beta1, state.beta2, state.eps))
        f.write(struct.pack("<Q", state.m.size))
        f.write(state.m.astype("<f8").tobytes())
        f.write(state.v.astype("<f8").tobytes())


def load_optimizer(path, dtype=np.float32) -> OptimizerState:
    data = Path(path).read_bytes()
    if data[:4] != OPTIMIZER_MAGIC:
        raise ValueError(f"{path}: not an optimizer state file")
    step, total = struct.unpack_from("<QQ", data, 4)
    lr, wd, b1, b2, eps = struct.unpack_from("<5d", data, 20)
    (n,) = struct.unpack_from("<Q", data, 60)
    m = np.frombuffer(data, "<f8", n, 68).astype(dtype)
    v = np.frombuffer(data, "<f8", n, 68 + 8 * n).astype(dtype)
    return OptimizerState(m, v, step, lr, wd, total or None, b1, b2, eps)
