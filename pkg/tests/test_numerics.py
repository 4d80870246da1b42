import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from featrep import numerics
from featrep.errors import FormatError, NonFiniteError, ShapeMismatch


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestReshape:
    def test_drop_unit_axes(self):
        t = np.arange(32.0).reshape(32, 1, 1)
        r = numerics.tensor_reshape(t, (32,))
        assert r.shape == (32,)
        np.testing.assert_array_equal(r, np.arange(32.0))

    def test_flatten_feature_map(self):
        t = np.random.default_rng(0).random((48, 4, 4))
        r = numerics.tensor_reshape(t, (768,))
        assert r.shape == (768,)
        # row-major: (c, h, w) -> c*16 + h*4 + w
        assert r[5 * 16 + 2 * 4 + 3] == t[5, 2, 3]

    def test_size_mismatch(self):
        with pytest.raises(ShapeMismatch):
            numerics.tensor_reshape(np.zeros((2, 3)), (4,))

    @given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=4, max_side=5), elements=finite))
    def test_round_trip(self, t):
        flat = numerics.tensor_reshape(t, (t.size,))
        back = numerics.tensor_reshape(flat, t.shape)
        np.testing.assert_array_equal(back, t)


class TestMatmul:
    def test_identity(self):
        m = np.random.default_rng(1).random((3, 4))
        np.testing.assert_array_equal(numerics.matmul(np.eye(3), m), m)

    def test_hand_value(self):
        out = numerics.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        np.testing.assert_array_equal(out, [[11.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        np.testing.assert_allclose(numerics.matmul(a, b), naive_matmul(a, b), rtol=0, atol=1e-12)

    def test_accumulates_in_f64(self):
        a = np.full((1, 3), 1e8, dtype=np.float32)
        b = np.array([[1.0], [1.0], [1.0]], dtype=np.float32) + np.float32(1e-7)
        out = numerics.matmul(a, b)
        assert out.dtype == np.float64

    def test_inner_mismatch(self):
        with pytest.raises(ShapeMismatch):
            numerics.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_rank_check(self):
        with pytest.raises(ShapeMismatch):
            numerics.matmul(np.zeros(3), np.zeros((3, 1)))

    @settings(max_examples=50)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10**6))
    def test_associativity(self, n, k, m, p, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(n, k)), rng.normal(size=(k, m)), rng.normal(size=(m, p))
        left = numerics.matmul(numerics.matmul(a, b), c)
        right = numerics.matmul(a, numerics.matmul(b, c))
        np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-9)


class TestEuclidean:
    def test_zero_for_equal(self):
        v = np.random.default_rng(3).random(10)
        assert numerics.euclidean_distance(v, v) == 0.0

    def test_three_four_five(self):
        assert numerics.euclidean_distance([0, 0], [3, 4]) == 5.0

    def test_against_summation(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=64), rng.normal(size=64)
        s = 0.0
        for x, y in zip(a, b):
            s += (x - y) ** 2
        assert abs(numerics.euclidean_distance(a, b) - s ** 0.5) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatch):
            numerics.euclidean_distance([1, 2], [1, 2, 3])

    @given(st.lists(st.tuples(finite, finite, finite), min_size=3, max_size=3))
    def test_metric_axioms(self, pts):
        a, b, c = (np.array(p) for p in pts)
        d = numerics.euclidean_distance
        assert d(a, b) == d(b, a)
        assert d(a, c) <= d(a, b) + d(b, c) + 1e-9

    def test_pairwise_matches_scalar(self):
        x = np.random.default_rng(5).normal(size=(6, 4))
        dm = numerics.pairwise_distances(x)
        for i in range(6):
            for j in range(6):
                assert abs(dm[i, j] - numerics.euclidean_distance(x[i], x[j])) < 1e-12


class TestFinite:
    def test_raises_on_nan(self):
        with pytest.raises(NonFiniteError):
            numerics.check_finite(np.array([1.0, np.nan]))

    def test_passes_through(self):
        t = np.ones(3)
        assert numerics.check_finite(t) is t


class TestRng:
    def test_same_seed_same_stream(self):
        a = numerics.make_rng(123).random(5)
        b = numerics.make_rng(123).random(5)
        np.testing.assert_array_equal(a, b)

    def test_known_stream(self):
        # PCG64 seeded through SeedSequence is platform independent
        expected = np.random.Generator(np.random.PCG64(np.random.SeedSequence(7))).integers(0, 2**32, 4)
        np.testing.assert_array_equal(numerics.make_rng(7).integers(0, 2**32, 4), expected)

    def test_forks_are_independent(self):
        a = numerics.fork_rng(0, "forest", 0).random(8)
        b = numerics.fork_rng(0, "forest", 1).random(8)
        c = numerics.fork_rng(0, "svm", 0).random(8)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)
        np.testing.assert_array_equal(a, numerics.fork_rng(0, "forest", 0).random(8))

    def test_unknown_consumer(self):
        with pytest.raises(ValueError):
            numerics.fork_rng(0, "nobody")

    def test_state_round_trip(self):
        rng = numerics.make_rng(9)
        rng.random(3)
        clone = numerics.rng_from_state(numerics.rng_state(rng))
        np.testing.assert_array_equal(rng.random(4), clone.random(4))


class TestTensorFile:
    def test_layout(self):
        t = np.arange(6, dtype=np.float32).reshape(2, 3)
        buf = io.BytesIO()
        numerics.write_tensor(buf, t)
        raw = buf.getvalue()
        assert raw[:4] == b"CPT1"
        assert struct.unpack("<I", raw[4:8]) == (2,)
        assert struct.unpack("<QQ", raw[8:24]) == (2, 3)
        assert raw[24] == 1
        np.testing.assert_array_equal(np.frombuffer(raw[25:], "<f4"), np.arange(6))

    @given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4)))
    def test_round_trip_bit_exact(self, t):
        buf = io.BytesIO()
        numerics.write_tensor(buf, t)
        buf.seek(0)
        back = numerics.read_tensor(buf)
        assert back.dtype == t.dtype and back.shape == t.shape
        assert back.tobytes() == t.tobytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.cpt"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError):
            numerics.load_tensor(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "x.cpt"
        numerics.save_tensor(p, np.ones((4, 4)))
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(FormatError):
            numerics.load_tensor(p)

    def test_container_round_trip(self, tmp_path):
        p = tmp_path / "c.bin"
        tensors = {"a": np.ones((2, 2)), "b": np.arange(3, dtype=np.float32)}
        numerics.save_container(p, {"k": 1}, tensors)
        header, back = numerics.load_container(p)
        assert header["k"] == 1 and header["tensors"] == ["a", "b"]
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])
        first = p.read_bytes()
        numerics.save_container(p, {"k": 1}, back)
        assert p.read_bytes() == first
