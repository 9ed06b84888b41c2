import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grade.core import ContractError
from grade.policy import (
    AdamState,
    CheckpointCorrupt,
    CheckpointNotFound,
    CheckpointSchemaError,
    PolicyGradient,
    PolicyParams,
    TrainingDivergence,
    adam_step,
    backward,
    forward,
    gate_weights,
    load_checkpoint,
    save_checkpoint,
    snapshot,
    sync,
)
from tests.oracles import params_central_diff


def _params(seed=0, d=5, h=6, e=3, scale=1.0):
    p = PolicyParams.init(np.random.default_rng(seed), d, h, e)
    rng = np.random.default_rng(seed + 1000)
    for a in p.arrays():
        a += scale * 0.3 * rng.standard_normal(a.shape)  # non-zero biases too
    return p


class TestForward:
    def test_zero_params_uniform(self):
        _, mean = forward(PolicyParams.zeros(7), np.random.default_rng(0).standard_normal(7))
        np.testing.assert_array_equal(mean, np.full(4, 0.25))

    def test_deterministic_and_simplex(self):
        p = _params()
        x = np.random.default_rng(1).standard_normal((20, 5))
        l1, m1 = forward(p, x)
        l2, m2 = forward(p, x)
        np.testing.assert_array_equal(m1, m2)
        assert np.all(m1 > 0)
        np.testing.assert_allclose(m1.sum(axis=1), 1.0, atol=1e-9)

    def test_single_matches_batch(self):
        p = _params()
        x = np.random.default_rng(2).standard_normal((4, 5))
        _, batch = forward(p, x)
        for i in range(4):
            np.testing.assert_allclose(forward(p, x[i])[1], batch[i], rtol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            forward(_params(d=5), np.zeros(4))

    def test_gate_is_simplex(self):
        g = gate_weights(_params(), np.random.default_rng(3).standard_normal((50, 5)))
        assert np.all(g > 0)
        np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)

    def test_init_near_uniform(self):
        for seed in range(20):
            p = PolicyParams.init(np.random.default_rng([seed, 1]), 16)
            x = np.random.default_rng(100 + seed).standard_normal((1000, 16))
            _, m = forward(p, x)
            dist = np.abs(m - 0.25).max(axis=1)
            assert np.quantile(dist, 0.99) <= 0.15
            assert np.abs(m.mean(axis=0) - 0.25).max() <= 0.15
        assert np.all(p.b1 == 0) and np.all(p.b2 == 0) and np.all(p.bg == 0)


def _fd_check(p, x, u, rtol=1e-4, h=1e-6):
    fd = params_central_diff(lambda q: float(np.sum(u * forward(q, x)[1])), p, h)
    # mixed tolerance: components near 1e-8 carry ~1e-11 of round-off from the differencing
    np.testing.assert_allclose(backward(p, x, u).flat(), fd, rtol=rtol, atol=1e-9)


class TestBackward:
    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            p = _params(seed=trial, d=4, h=5, e=3)
            x = rng.standard_normal((3, 4))
            u = rng.standard_normal((3, 4))
            _fd_check(p, x, u)

    def test_zero_upstream(self):
        g = backward(_params(), np.ones((2, 5)), np.zeros((2, 4)))
        assert all(np.all(a == 0) for a in g.arrays())

    def test_sum_of_mean_has_zero_gradient(self):
        g = backward(_params(), np.random.default_rng(1).standard_normal((3, 5)), np.ones((3, 4)))
        assert max(np.abs(a).max() for a in g.arrays()) < 1e-10

    def test_upstream_shape_checked(self):
        with pytest.raises(ContractError):
            backward(_params(), np.ones((2, 5)), np.ones((3, 4)))


class TestAdam:
    def test_zero_gradient(self):
        p = _params()
        state = AdamState.for_params(p)
        q, s = adam_step(p, p.zeros_like(), state, lr=1e-3)
        np.testing.assert_array_equal(q.flat(), p.flat())
        assert s.step == 1

    def test_first_step_magnitude(self):
        p = _params()
        g = PolicyGradient(*(np.random.default_rng(i).standard_normal(a.shape) for i, a in enumerate(p.arrays())))
        q, _ = adam_step(p, g, AdamState.for_params(p), lr=1e-3)
        step = q.flat() - p.flat()
        gf = g.flat()
        np.testing.assert_allclose(step, -1e-3 * gf / (np.abs(gf) + 1e-8), rtol=1e-6)

    def test_identical_gradients_identical_updates(self):
        p = PolicyParams.zeros(3, 2, 2)
        g = PolicyGradient(*(np.full(a.shape, 0.7) for a in p.arrays()))
        q, _ = adam_step(p, g, AdamState.for_params(p))
        vals = np.unique(q.flat())
        assert vals.size == 1

    def test_non_finite_gradient(self):
        p = _params()
        g = p.zeros_like()
        g.w2[0, 0, 0] = np.nan
        with pytest.raises(TrainingDivergence):
            adam_step(p, PolicyGradient(*g.arrays()), AdamState.for_params(p))

    def test_inputs_untouched(self):
        p = _params()
        before = p.flat().copy()
        adam_step(p, PolicyGradient(*(np.ones_like(a) for a in p.arrays())), AdamState.for_params(p))
        np.testing.assert_array_equal(p.flat(), before)


class TestRoles:
    def test_sync_gives_bitwise_equal_outputs(self):
        a, b = _params(1), _params(2)
        sync(a, b)
        x = np.random.default_rng(0).standard_normal((10, 5))
        np.testing.assert_array_equal(forward(a, x)[1], forward(b, x)[1])

    def test_snapshot_is_deep(self):
        a = _params()
        s = snapshot(a)
        a.w1 += 1.0
        assert not np.array_equal(s.w1, a.w1)

    def test_sync_round_trip(self):
        a, b = _params(1), _params(2)
        b_original = b.flat().copy()
        sync(a, b)
        after_first = a.flat().copy()
        sync(b, a)
        np.testing.assert_array_equal(a.flat(), after_first)
        np.testing.assert_array_equal(a.flat(), b_original)
        np.testing.assert_array_equal(b.flat(), b_original)

    def test_sync_shape_mismatch(self):
        with pytest.raises(ContractError):
            sync(_params(d=5), _params(d=6))


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        p = _params()
        path = tmp_path / "p.ckpt"
        save_checkpoint(p, path)
        q = load_checkpoint(path, expect_k=4)
        assert q.dims == p.dims
        np.testing.assert_array_equal(q.flat(), p.flat())
        x = np.random.default_rng(0).standard_normal((10, 5))
        np.testing.assert_array_equal(forward(p, x)[1], forward(q, x)[1])

    def test_byte_layout(self, tmp_path):
        p = _params(d=2, h=3, e=2)
        path = tmp_path / "p.ckpt"
        save_checkpoint(p, path)
        blob = path.read_bytes()
        magic, version, d, h, e, k, n = struct.unpack_from("<8sH4IQ", blob)
        assert (magic, version, d, h, e, k) == (b"GRADEPOL", 1, 2, 3, 2, 4)
        assert n == 8 * p.flat().size and len(blob) == struct.calcsize("<8sH4IQ") + n + 4
        payload = np.frombuffer(blob, "<f8", count=p.flat().size, offset=struct.calcsize("<8sH4IQ"))
        np.testing.assert_array_equal(payload, p.flat())

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointNotFound):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_wrong_k(self, tmp_path):
        path = tmp_path / "k3.ckpt"
        save_checkpoint(PolicyParams.zeros(3, 2, 2, k=3), path)
        with pytest.raises(CheckpointSchemaError):
            load_checkpoint(path, expect_k=4)

    def test_wrong_context_dim(self, tmp_path):
        path = tmp_path / "d.ckpt"
        save_checkpoint(PolicyParams.zeros(3, 2, 2), path)
        with pytest.raises(CheckpointSchemaError):
            load_checkpoint(path, expect_context_dim=4)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "v.ckpt"
        save_checkpoint(PolicyParams.zeros(3, 2, 2), path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<H", blob, 8, 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointSchemaError):
            load_checkpoint(path)

    @pytest.mark.parametrize("cut", [5, 40, -1])
    def test_truncated(self, tmp_path, cut):
        path = tmp_path / "t.ckpt"
        save_checkpoint(_params(), path)
        path.write_bytes(path.read_bytes()[:cut])
        with pytest.raises(CheckpointCorrupt):
            load_checkpoint(path)

    def test_flipped_byte(self, tmp_path):
        path = tmp_path / "f.ckpt"
        save_checkpoint(_params(), path)
        blob = bytearray(path.read_bytes())
        blob[60] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointCorrupt):
            load_checkpoint(path)


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 3.0))
    def test_mean_on_simplex(self, seed, scale):
        p = _params(seed % 1000, scale=scale)
        x = np.random.default_rng(seed).standard_normal((8, 5)) * 3
        _, m = forward(p, x)
        assert np.all(m > 0)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-9)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        p = _params(seed % 997, d=3, h=4, e=2)
        _fd_check(p, rng.standard_normal((2, 3)), rng.standard_normal((2, 4)))
