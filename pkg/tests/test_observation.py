import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sda.observation import (
    OBSERVATION_MAGIC,
    Average,
    Constant,
    Mask,
    NotFactorizable,
    ObservationProcess,
    Saturate,
    Subsample,
    load_observation,
    operator_from_descriptor,
    save_observation,
)

L, D = 9, 3


def operators():
    mask = np.zeros((L, D), dtype=bool)
    mask[[0, 3, 3, 8], [1, 0, 2, 2]] = True
    return [Subsample(), Subsample(stride=4, coords=[0]), Subsample(stride=3, start=1, coords=[2, 0]),
            Mask(mask), Average("state"), Average("time", 1), Average("time", 3),
            Saturate(Subsample(stride=2)), Saturate(Average("state")), Constant(4)]


@pytest.mark.parametrize("op", operators(), ids=lambda op: op.name)
def test_vjp_is_the_jacobian_transpose(op):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, L, D))
    m = op(x).shape[-1]
    cot = rng.standard_normal((2, m))
    g = op.vjp(x, cot)
    assert g.shape == x.shape
    h = 1e-6
    direction = rng.standard_normal(x.shape)
    fd = np.sum(cot * (op(x + h * direction) - op(x - h * direction))) / (2 * h)
    assert np.sum(g * direction) == pytest.approx(fd, rel=1e-6, abs=1e-9)


@pytest.mark.parametrize("op", operators(), ids=lambda op: op.name)
def test_descriptor_roundtrip(op):
    x = np.random.default_rng(1).standard_normal((L, D))
    again = operator_from_descriptor(op.descriptor())
    assert np.array_equal(again(x), op(x))


def test_subsample_selects_strided_coordinates():
    x = np.arange(L * D, dtype=float).reshape(L, D)
    np.testing.assert_array_equal(Subsample(stride=4, coords=[0])(x), x[0::4, 0])
    np.testing.assert_array_equal(Subsample()(x), x.ravel())
    np.testing.assert_array_equal(Average("time", 3)(x), x.reshape(3, 3, D).mean(1).ravel())
    np.testing.assert_allclose(Saturate()(x), x.ravel() / (1 + np.abs(x.ravel())))
    with pytest.raises(ValueError):
        Subsample(stride=0)


@pytest.mark.parametrize("op", [o for o in operators() if not (o.name == "average" and o.size > 1)],
                         ids=lambda op: op.name)
def test_step_decomposition_reassembles_operator(op):
    x = np.random.default_rng(2).standard_normal((L, D))
    index = op.time_index(L, D)
    full = op(x)
    assert index.shape == full.shape
    for i in range(L):
        np.testing.assert_allclose(op.apply_step(x[i], i, L), full[index == i])


def test_time_averages_do_not_factorize():
    with pytest.raises(NotFactorizable):
        Average("time", 3).time_index(L, D)
    obs = ObservationProcess(Average("time", 3), 0.1, np.zeros(9))
    with pytest.raises(NotFactorizable):
        obs.step_log_likelihoods(L, D)


@pytest.mark.parametrize("op", [Subsample(stride=4, coords=[0]), Mask(np.eye(L, D, dtype=bool)),
                                Saturate(Subsample(stride=2)), Constant(3), Average("state")],
                         ids=lambda op: op.name)
def test_step_log_likelihoods_sum_to_total(op):
    rng = np.random.default_rng(3)
    truth = rng.standard_normal((L, D))
    obs = ObservationProcess.simulate(op, 0.3, truth, rng)
    funcs, constant = obs.step_log_likelihoods(L, D)
    xs = rng.standard_normal((5, L, D))
    total = constant + sum(f(xs[:, i]) for i, f in enumerate(funcs))
    np.testing.assert_allclose(total, obs.log_likelihood(xs), rtol=1e-12)


def test_log_likelihood_normalizer_and_offset():
    y = np.array([0.5, -1.0, 2.0])
    var = np.array([0.1, 0.2, 0.4])
    obs = ObservationProcess(Subsample(), var, y)
    x = y.reshape(1, 3)
    normalizer = -1.5 * np.log(2 * np.pi) - 0.5 * np.sum(np.log(var))
    assert obs.log_likelihood(x) == pytest.approx(normalizer)
    shifted = x.copy()
    shifted[0, 1] += 0.3
    assert obs.log_likelihood(shifted) == pytest.approx(normalizer - 0.3 ** 2 / (2 * 0.2))


def test_process_validation():
    with pytest.raises(ValueError):
        ObservationProcess(Subsample(), 0.0, np.zeros(3))
    with pytest.raises(ValueError):
        ObservationProcess(Subsample(), 1.0, np.zeros((2, 2)))


def test_sdao_layout_and_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    obs = ObservationProcess.simulate(Subsample(stride=8, coords=[0]), 0.05 ** 2, rng.standard_normal((65, 3)), rng)
    path = tmp_path / "obs.sdao"
    save_observation(path, obs)
    data = path.read_bytes()
    m = obs.size
    assert m == 9
    assert data[:4] == OBSERVATION_MAGIC
    assert struct.unpack_from("<Q", data, 4) == (m,)
    np.testing.assert_array_equal(np.frombuffer(data, "<f4", m, 12), obs.y.astype(np.float32))
    back = load_observation(path)
    assert back.operator.descriptor() == obs.operator.descriptor()
    np.testing.assert_allclose(back.y, obs.y, rtol=1e-6)
    np.testing.assert_allclose(back.noise_var, obs.noise_var, rtol=1e-6)
    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(ValueError):
        load_observation(path)


def test_unknown_descriptor():
    with pytest.raises(ValueError):
        operator_from_descriptor({"name": "fourier"})


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 4), st.lists(st.integers(0, 2), min_size=1, max_size=3, unique=True))
def test_subsample_vjp_adjoint_property(stride, start, coords):
    op = Subsample(stride=stride, start=start, coords=coords)
    rng = np.random.default_rng(stride * 10 + start)
    x = rng.standard_normal((L, D))
    cot = rng.standard_normal(op(x).shape)
    assert np.sum(op(x) * cot) == pytest.approx(np.sum(x * op.vjp(x, cot)))
