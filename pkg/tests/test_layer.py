"""Fixed fan-in layer: kernels vs oracles, storage invariants, accounting."""

from __future__ import annotations

import io

import numpy as np
import pytest

from fanin import layer as layer_mod
from fanin.errors import ConfigError, ShapeError
from fanin.layer import (KERNEL_BACKEND, FixedFanInLayer, KernelCounters,
                         SparseDelta, ffi_backward_input, ffi_backward_weights,
                         ffi_forward, from_dense, head_memory_bytes,
                         index_dtype, memory_overhead, random_layer,
                         read_layer, sparsity_of, write_layer)

from conftest import (central_difference, dense_backward_input_oracle,
                      dense_backward_weights_oracle, dense_forward_oracle,
                      random_delta, rel_err)

GIB = 1024 ** 3


def identity_layer(n: int, dtype=np.float32) -> FixedFanInLayer:
    idx = np.tile(np.arange(n, dtype=index_dtype(n)), (n, 1))
    w = np.eye(n, dtype=dtype)
    return FixedFanInLayer(w, idx, n)


class TestConstruction:
    def test_from_dense_magnitude_ranking(self):
        lay = from_dense(np.array([[3.0, -5.0, 1.0]]), fan_in=2)
        assert lay.indices[0].tolist() == [0, 1]
        assert lay.weights[0].tolist() == [3.0, -5.0]

    def test_from_dense_tie_break_lowest_column(self):
        lay = from_dense(np.array([[2.0, -2.0, 0.0]]), fan_in=1)
        assert lay.indices[0].tolist() == [0]
        assert lay.weights[0].tolist() == [2.0]

    def test_full_fan_in_roundtrip_exact(self, rng):
        dense = rng.standard_normal((6, 5)).astype(np.float32)
        lay = from_dense(dense, fan_in=5)
        np.testing.assert_array_equal(lay.to_dense(), dense)

    def test_projection_idempotent(self, rng):
        dense = rng.standard_normal((8, 10)).astype(np.float32)
        dense[dense < 0.3] = 0.0  # force zero-ties inside rows
        once = from_dense(dense, fan_in=4).to_dense()
        twice = from_dense(once, fan_in=4).to_dense()
        np.testing.assert_array_equal(once, twice)

    def test_random_layer_invariants(self, rng):
        for _ in range(20):
            rows = int(rng.integers(1, 30))
            d = int(rng.integers(2, 40))
            f = int(rng.integers(1, d + 1))
            lay = random_layer(rows, d, f, rng)
            lay.validate()

    def test_index_width_switches_at_16bit_limit(self):
        assert index_dtype(65536) == np.uint16
        assert index_dtype(65537) == np.uint32

    def test_validate_catches_unsorted(self):
        lay = FixedFanInLayer(np.ones((1, 2), dtype=np.float32),
                              np.array([[1, 0]], dtype=np.uint16), 4)
        with pytest.raises(ShapeError):
            lay.validate()


class TestForward:
    def test_identity_layout_equals_dense_matmul(self, rng):
        # Small integer values make float32 sums exact in any order, so
        # "equals exactly" is well defined despite BLAS blocking.
        lay = identity_layer(7)
        lay.weights[:] = rng.integers(-3, 4, size=(7, 7)).astype(np.float32)
        x = rng.integers(-3, 4, size=(4, 7)).astype(np.float32)
        np.testing.assert_array_equal(ffi_forward(lay, x),
                                      x @ lay.weights.T)

    def test_zero_weights_zero_output(self, small_layer, rng):
        small_layer.weights[:] = 0
        x = rng.standard_normal((8, 16)).astype(np.float32)
        assert not ffi_forward(small_layer, x).any()

    def test_matches_dense_oracle(self, rng):
        for _ in range(50):
            rows = int(rng.integers(1, 64))
            d = int(rng.integers(2, 64))
            f = int(rng.integers(1, d + 1))
            b = int(rng.integers(1, 16))
            lay = random_layer(rows, d, f, rng)
            x = rng.standard_normal((b, d)).astype(np.float32)
            got = ffi_forward(lay, x)
            assert rel_err(got, dense_forward_oracle(lay, x)) < 1e-6

    def test_shape_error(self, small_layer, rng):
        with pytest.raises(ShapeError):
            ffi_forward(small_layer, rng.standard_normal((2, 9)))


class TestBackwardWeights:
    def test_empty_delta(self, small_layer, rng):
        delta = SparseDelta.from_dense(np.zeros((3, 20), dtype=np.float32))
        x = rng.standard_normal((3, 16)).astype(np.float32)
        grad = ffi_backward_weights(small_layer, x, delta)
        assert not grad.any()

    def test_single_entry_gathers_features(self, small_layer, rng):
        x = rng.standard_normal((1, 16)).astype(np.float32)
        dense = np.zeros((1, 20), dtype=np.float32)
        dense[0, 7] = 1.0
        grad = ffi_backward_weights(small_layer, x,
                                    SparseDelta.from_dense(dense))
        np.testing.assert_allclose(
            grad[7], x[0, small_layer.indices[7].astype(int)])
        other = np.delete(np.arange(20), 7)
        assert not grad[other].any()

    def test_matches_dense_oracle(self, rng):
        for _ in range(50):
            rows = int(rng.integers(1, 64))
            d = int(rng.integers(2, 64))
            f = int(rng.integers(1, d + 1))
            b = int(rng.integers(1, 16))
            lay = random_layer(rows, d, f, rng)
            x = rng.standard_normal((b, d)).astype(np.float32)
            delta = random_delta(rng, b, rows)
            got = ffi_backward_weights(lay, x, delta)
            assert rel_err(got, dense_backward_weights_oracle(lay, x, delta)) \
                < 1e-6

    def test_finite_differences_64bit(self, rng):
        lay = random_layer(10, 12, 4, rng, dtype=np.float64)
        x = rng.standard_normal((5, 12))
        delta = random_delta(rng, 5, 10, dtype=np.float64)
        delta_dense = delta.to_dense()

        def loss() -> float:
            return float((ffi_forward(lay, x) * delta_dense).sum())

        grad = ffi_backward_weights(lay, x, delta)
        fd = central_difference(loss, lay.weights, step=1e-5)
        assert rel_err(grad, fd) < 1e-4

    def test_touch_count_is_nnz_times_fanin(self, small_layer, rng):
        x = rng.standard_normal((6, 16)).astype(np.float32)
        delta = random_delta(rng, 6, 20)
        counters = KernelCounters()
        ffi_backward_weights(small_layer, x, delta, counters)
        assert counters.touches == delta.nnz * small_layer.fan_in


class TestBackwardInput:
    def test_empty_delta(self, small_layer):
        delta = SparseDelta.from_dense(np.zeros((4, 20), dtype=np.float32))
        assert not ffi_backward_input(small_layer, delta, 4).any()

    def test_identity_layout_dense_degeneration(self, rng):
        lay = identity_layer(6)
        lay.weights[:] = rng.standard_normal((6, 6)).astype(np.float32)
        delta = random_delta(rng, 3, 6)
        got = ffi_backward_input(lay, delta, 3)
        np.testing.assert_allclose(got, delta.to_dense() @ lay.weights,
                                   rtol=1e-6, atol=1e-7)

    def test_matches_dense_oracle(self, rng):
        for _ in range(50):
            rows = int(rng.integers(1, 64))
            d = int(rng.integers(2, 64))
            f = int(rng.integers(1, d + 1))
            b = int(rng.integers(1, 16))
            lay = random_layer(rows, d, f, rng)
            delta = random_delta(rng, b, rows)
            got = ffi_backward_input(lay, delta, b)
            assert rel_err(got, dense_backward_input_oracle(lay, delta)) < 1e-6

    def test_finite_differences_64bit(self, rng):
        lay = random_layer(10, 12, 4, rng, dtype=np.float64)
        x = rng.standard_normal((5, 12))
        delta = random_delta(rng, 5, 10, dtype=np.float64)
        delta_dense = delta.to_dense()

        def loss() -> float:
            return float((ffi_forward(lay, x) * delta_dense).sum())

        grad = ffi_backward_input(lay, delta, 5)
        fd = central_difference(loss, x, step=1e-5)
        assert rel_err(grad, fd) < 1e-4

    def test_touch_count(self, small_layer, rng):
        delta = random_delta(rng, 6, 20)
        counters = KernelCounters()
        ffi_backward_input(small_layer, delta, 6, counters)
        assert counters.touches == delta.nnz * small_layer.fan_in


@pytest.mark.skipif(KERNEL_BACKEND != "cython",
                    reason="compiled extension not available")
class TestBackendParity:
    def test_forward_bitwise_equal_float32(self, rng):
        from fanin import _kernels, _kernels_py
        for _ in range(10):
            lay = random_layer(30, 24, 6, rng)
            x = rng.standard_normal((8, 24)).astype(np.float32)
            a = _kernels.forward(lay.weights, lay.indices, x)
            b = _kernels_py.forward(lay.weights, lay.indices, x)
            np.testing.assert_array_equal(a, b)

    def test_backwards_close(self, rng):
        from fanin import _kernels, _kernels_py
        lay = random_layer(30, 24, 6, rng)
        x = rng.standard_normal((8, 24)).astype(np.float32)
        delta = random_delta(rng, 8, 30)
        g1, t1 = _kernels.backward_weights(lay.indices, x, delta.indptr,
                                           delta.labels, delta.values)
        g2, t2 = _kernels_py.backward_weights(lay.indices, x, delta.indptr,
                                              delta.labels, delta.values)
        assert t1 == t2
        np.testing.assert_allclose(g1, g2, rtol=1e-5, atol=1e-6)
        i1, u1 = _kernels.backward_input(lay.weights, lay.indices, delta.indptr,
                                         delta.labels, delta.values, 8, 24)
        i2, u2 = _kernels_py.backward_input(lay.weights, lay.indices,
                                            delta.indptr, delta.labels,
                                            delta.values, 8, 24)
        assert u1 == u2
        np.testing.assert_allclose(i1, i2, rtol=1e-5, atol=1e-6)


class TestAccounting:
    def test_overhead_plain(self):
        assert memory_overhead(32, 16, 0) == 0.5

    def test_overhead_with_shared_buffers(self):
        assert memory_overhead(32, 16, 3) == 0.125

    def test_overhead_equal_widths(self):
        assert memory_overhead(32, 32, 0) == 1.0

    def test_sparsity_values(self):
        assert sparsity_of(128, 768) == pytest.approx(0.8333, abs=5e-5)
        assert sparsity_of(64, 768) == pytest.approx(0.9167, abs=5e-5)
        assert sparsity_of(10, 10) == 0.0

    def test_dense_head_twelve_gib(self):
        acct = head_memory_bytes(768, 10 ** 6, 128)
        assert acct["dense_bytes"] == pytest.approx(12 * GIB, rel=0.05)

    def test_sparse_ratio(self):
        acct = head_memory_bytes(768, 10 ** 6, 128)
        assert acct["ratio"] == pytest.approx(0.1875)

    def test_full_fan_in_sparse_exceeds_dense(self):
        acct = head_memory_bytes(768, 1000, 768)
        assert acct["sparse_bytes"] >= acct["dense_bytes"]


class TestSerialization:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip(self, rng, dtype):
        lay = random_layer(12, 30, 5, rng, dtype=dtype)
        buf = io.StringIO()
        write_layer(lay, buf)
        buf.seek(0)
        back = read_layer(buf)
        assert back.num_cols == lay.num_cols
        np.testing.assert_array_equal(back.indices, lay.indices)
        np.testing.assert_array_equal(back.weights, lay.weights)

    def test_bad_header(self):
        with pytest.raises(ConfigError):
            read_layer(io.StringIO("bogus 9\n"))


def test_sparse_delta_roundtrip(rng):
    dense = rng.standard_normal((5, 9)).astype(np.float32)
    dense[rng.random((5, 9)) < 0.5] = 0.0
    sd = SparseDelta.from_dense(dense)
    np.testing.assert_array_equal(sd.to_dense(), dense)
    # labels sorted ascending within each sample
    for i in range(5):
        seg = sd.labels[sd.indptr[i]:sd.indptr[i + 1]]
        assert (np.diff(seg) > 0).all()


def test_env_backend_selection_matches_module():
    assert KERNEL_BACKEND in ("cython", "python")
    assert layer_mod._K is not None
