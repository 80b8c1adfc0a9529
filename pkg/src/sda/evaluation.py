"""Posterior quality statistics and report writers."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

DEFAULT_W1_CAP = 512


@dataclass
class PosteriorEnsemble:
    trajectories: np.ndarray  # (n, L, D)
    provenance: str = "SDA"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        if self.trajectories.ndim != 3 or self.trajectories.shape[0] < 1:
            raise ValueError("an ensemble needs shape (n, L, D) with n >= 1")
        if self.provenance not in ("SDA", "DPS", "BPF", "PRIOR", "DATA"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return self.trajectories.shape[0]


def _trajectories(ens) -> np.ndarray:
    x = ens.trajectories if isinstance(ens, PosteriorEnsemble) else np.asarray(ens, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] < 1:
        raise ValueError("expected trajectories of shape (n, L, D)")
    return x


def log_prior_terms(ens, model) -> np.ndarray:
    """``sum_i log p(x_{i+1} | x_i)`` for each trajectory, shape ``(n,)``."""
    x = _trajectories(ens)
    return np.sum(model.transition_logpdf(x[:, 1:], x[:, :-1]), axis=-1)


def expected_log_prior(ens, model) -> float:
    return float(np.mean(log_prior_terms(ens, model)))


def log_likelihood_terms(ens, obs) -> np.ndarray:
    return obs.log_likelihood(_trajectories(ens))


def expected_log_likelihood(ens, obs) -> float:
    return float(np.mean(log_likelihood_terms(ens, obs)))


def standard_error(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float("nan")
    return float(values.std(ddof=1) / np.sqrt(values.size))


def wasserstein1(p, q, cap: int = DEFAULT_W1_CAP, rng=None) -> float:
    """Exact W1 between two empirical trajectory ensembles.

    Trajectories are flattened and compared with the Euclidean distance. The
    larger ensemble is subsampled without replacement to the size of the
    smaller one (``rng`` defaults to a fixed seed so results are repeatable).
    """
    x = _trajectories(p).reshape(len(_trajectories(p)), -1)
    z = _trajectories(q).reshape(len(_trajectories(q)), -1)
    if x.shape[1] != z.shape[1]:
        raise ValueError(f"trajectory sizes differ: {x.shape[1]} vs {z.shape[1]}")
    n = min(len(x), len(z))
    if n > cap:
        raise ValueError(f"{n} samples exceed the W1 cap of {cap}; subsample the ensembles first")
    if len(x) != len(z):
        rng = np.random.default_rng(0) if rng is None else rng
        if len(x) > n:
            x = x[np.sort(rng.choice(len(x), n, replace=False))]
        else:
            z = z[np.sort(rng.choice(len(z), n, replace=False))]
    cost = cdist(x, z)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def config_hash(config) -> str:
    """SHA-256 of the canonical JSON encoding of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_report(stats: dict, csv_path, json_path=None, meta: dict | None = None) -> None:
    """``stat,value`` CSV plus an optional JSON summary carrying ``meta``."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["stat", "value"])
        for key, value in stats.items():
            writer.writerow([key, _fmt(value)])
    if json_path is not None:
        summary = {"stats": stats, **(meta or {})}
        Path(json_path).write_text(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)
