import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sda.evaluation import (
    PosteriorEnsemble,
    config_hash,
    expected_log_likelihood,
    expected_log_prior,
    log_likelihood_terms,
    log_prior_terms,
    standard_error,
    wasserstein1,
    write_report,
)
from sda.lorenz import LorenzModel, LorenzParams, integrate, simulate
from sda.observation import ObservationProcess, Subsample
from sda.oracle import LinearGaussianSSM, bpf_sample


def brute_force_w1(p, q):
    x, z = p.reshape(len(p), -1), q.reshape(len(q), -1)
    d = np.linalg.norm(x[:, None] - z[None], axis=-1)
    return min(d[np.arange(len(x)), list(perm)].mean() for perm in itertools.permutations(range(len(x))))


def ensembles(n, length=3, dim=2):
    shape = (n, length, dim)
    return st.lists(st.floats(-5, 5), min_size=n * length * dim, max_size=n * length * dim).map(
        lambda v: np.array(v).reshape(shape))


def test_w1_examples():
    assert wasserstein1(np.array([0.0, 1.0]).reshape(2, 1, 1), np.array([1.0, 2.0]).reshape(2, 1, 1)) == 1.0
    a, b = np.array([[[0.0, 3.0]]]), np.array([[[4.0, 0.0]]])
    assert wasserstein1(a, b) == pytest.approx(5.0)
    x = np.random.default_rng(0).normal(size=(16, 4, 3))
    assert wasserstein1(x, x) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(ensembles(n), ensembles(n))))
def test_w1_matches_exhaustive_assignment(pair):
    p, q = pair
    assert wasserstein1(p, q) == pytest.approx(brute_force_w1(p, q), rel=1e-9, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16).flatmap(lambda n: st.tuples(ensembles(n), ensembles(n), ensembles(n))))
def test_w1_is_a_metric(triple):
    p, q, r = triple
    pq, qp = wasserstein1(p, q), wasserstein1(q, p)
    assert pq == pytest.approx(qp, rel=1e-12, abs=1e-12)
    assert pq <= wasserstein1(p, r) + wasserstein1(r, q) + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12).flatmap(lambda n: st.tuples(ensembles(n), ensembles(n), st.randoms(use_true_random=False))))
def test_statistics_invariant_to_order(args):
    p, q, rnd = args
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    assert wasserstein1(p[perm], q) == pytest.approx(wasserstein1(p, q), rel=1e-12, abs=1e-12)
    obs = ObservationProcess(Subsample(stride=2), 0.3, np.linspace(-1, 1, 4))
    assert expected_log_likelihood(p[perm], obs) == pytest.approx(expected_log_likelihood(p, obs), rel=1e-12)
    model = LinearGaussianSSM([[0.9, 0.0], [0.1, 0.8]], np.eye(2) * 0.2, np.eye(2), np.eye(2), [0, 0], np.eye(2))
    assert expected_log_prior(p[perm], model) == pytest.approx(expected_log_prior(p, model), rel=1e-12)


def test_w1_cap_and_shape_checks():
    x = np.zeros((20, 2, 1))
    with pytest.raises(ValueError, match="subsample"):
        wasserstein1(x, x, cap=10)
    with pytest.raises(ValueError):
        wasserstein1(np.zeros((4, 2, 1)), np.zeros((4, 3, 1)))


def test_w1_subsamples_larger_ensemble_repeatably():
    rng = np.random.default_rng(1)
    big, small = rng.normal(size=(40, 3, 1)), rng.normal(size=(10, 3, 1))
    assert wasserstein1(big, small) == wasserstein1(big, small)
    assert wasserstein1(big, small) == pytest.approx(wasserstein1(small, big))


def test_w1_self_distance_of_independent_draws_is_positive():
    rng = np.random.default_rng(2)
    assert wasserstein1(rng.normal(size=(64, 5, 3)), rng.normal(size=(64, 5, 3))) > 0


def test_log_prior_on_noise_free_trajectory():
    params = LorenzParams()
    x = np.empty((4, 3))
    x[0] = [1.0, 2.0, 20.0]
    for i in range(1, 4):
        x[i] = integrate(x[i - 1], params)
    model = LorenzModel(np.zeros(3), np.ones(3), params)
    terms = model.transition_logpdf(x[1:], x[:-1])
    np.testing.assert_allclose(terms, -1.5 * np.log(2 * np.pi * params.dt), rtol=1e-9)
    same = np.stack([x] * 5)
    assert expected_log_prior(same, model) == pytest.approx(log_prior_terms(x[None], model)[0], rel=1e-12)


def test_log_prior_of_simulated_trajectories_matches_expectation():
    """Each term of a model-drawn path is log N(eta; 0, dt I) with eta ~ N(0, dt I)."""
    params = LorenzParams()
    x = simulate(200, 6, np.random.default_rng(3), burn_in=50)
    model = LorenzModel(np.zeros(3), np.ones(3), params)
    terms = log_prior_terms(x, model)
    expected = 5 * (-1.5 * np.log(2 * np.pi * params.dt) - 1.5)
    assert np.all(np.isfinite(terms))
    assert abs(terms.mean() - expected) < 3 * standard_error(terms)


def test_log_likelihood_examples():
    var = np.array([0.1, 0.2, 0.4])
    obs = ObservationProcess(Subsample(), var, np.array([1.0, 2.0, 3.0]))
    exact = np.array([[[1.0], [2.0], [3.0]]])
    normalizer = -1.5 * np.log(2 * np.pi) - 0.5 * np.sum(np.log(var))
    assert expected_log_likelihood(exact, obs) == pytest.approx(normalizer, rel=1e-12)
    shifted = exact.copy()
    shifted[0, 1, 0] += 0.3
    assert log_likelihood_terms(shifted, obs)[0] == pytest.approx(normalizer - 0.09 / (2 * 0.2), rel=1e-12)


def test_posterior_ensemble_beats_prior_on_likelihood():
    model = LinearGaussianSSM.scalar(0.9, 0.1, 0.25)
    _, y = model.simulate(20, np.random.default_rng(4))
    obs = ObservationProcess(Subsample(), 0.25, y.ravel())
    post = bpf_sample(model, obs, 4096, 256, np.random.default_rng(5), length=20)
    prior = np.stack([model.simulate(20, np.random.default_rng(100 + i))[0] for i in range(256)])
    lp, lq = log_likelihood_terms(post, obs), log_likelihood_terms(prior, obs)
    assert lp.mean() - lq.mean() > 3 * np.hypot(standard_error(lp), standard_error(lq))


def test_posterior_ensemble_validation():
    ens = PosteriorEnsemble(np.zeros((2, 3, 1)), "BPF", {"seed": 1})
    assert len(ens) == 2
    with pytest.raises(ValueError):
        PosteriorEnsemble(np.zeros((3, 1)))
    with pytest.raises(ValueError):
        PosteriorEnsemble(np.zeros((1, 3, 1)), "EnKF")


def test_standard_error():
    assert standard_error([1.0, 3.0]) == pytest.approx(1.0)
    assert np.isnan(standard_error([1.0]))


def test_config_hash_is_canonical():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 64


def test_report_files(tmp_path):
    stats = {"w1.sda.bpf": np.float64(0.25), "log_prior.sda": -3.5, "w1_coordinates": "standardized"}
    write_report(stats, tmp_path / "out" / "r.csv", tmp_path / "r.json", meta={"seed": 3})
    lines = (tmp_path / "out" / "r.csv").read_text().splitlines()
    assert lines[0] == "stat,value"
    assert lines[1] == "w1.sda.bpf,0.25"
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["seed"] == 3 and summary["stats"]["log_prior.sda"] == -3.5
