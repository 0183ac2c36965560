from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actuate.numkit import (
    ConfigurationError,
    Rng,
    SingularSystemError,
    as_matrix,
    check_finite,
    derive_seed,
    l2_norm,
    matmul,
    ridge_solve,
    rng_normal,
)


def test_ridge_matches_augmented_least_squares():
    # oracle: ridge == least squares on [X; sqrt(lam) I] vs [y; 0]
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 6))
    y = rng.normal(size=(50, 3))
    lam = 0.3
    aug_x = np.vstack([x, np.sqrt(lam) * np.eye(6)])
    aug_y = np.vstack([y, np.zeros((6, 3))])
    want = np.linalg.lstsq(aug_x, aug_y, rcond=None)[0]
    np.testing.assert_allclose(ridge_solve(x, y, lam), want, rtol=1e-10, atol=1e-12)


def test_ridge_vector_target_keeps_shape():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 4))
    w = ridge_solve(x, x @ np.arange(4.0), 1e-9)
    assert w.shape == (4,)
    np.testing.assert_allclose(w, np.arange(4.0), atol=1e-6)


def test_ridge_rejects_singular_system_without_penalty():
    x = np.ones((5, 2))
    with pytest.raises(SingularSystemError):
        ridge_solve(x, np.ones(5), 0.0)


def test_ridge_rejects_negative_penalty_and_bad_shapes():
    with pytest.raises(ConfigurationError):
        ridge_solve(np.eye(3), np.ones(3), -1.0)
    with pytest.raises(ConfigurationError):
        ridge_solve(np.eye(3), np.ones(4), 1.0)


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(3, 30),
    d=st.integers(1, 8),
    lam=st.floats(1e-3, 10.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_ridge_normal_equations_hold(n, d, lam, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = rng.normal(size=n)
    w = ridge_solve(x, y, lam)
    # gradient of ||Xw - y||^2 + lam ||w||^2 vanishes
    grad = x.T @ (x @ w - y) + lam * w
    assert np.max(np.abs(grad)) < 1e-8 * (1 + np.max(np.abs(x.T @ y)))


def test_check_finite_and_as_matrix():
    with pytest.raises(FloatingPointError):
        check_finite(np.array([1.0, np.nan]))
    assert as_matrix([1.0, 2.0]).shape == (2, 1)
    with pytest.raises(ConfigurationError):
        as_matrix(np.zeros((2, 2, 2)))
    with pytest.raises(ConfigurationError):
        matmul(np.eye(2), np.eye(3))
    np.testing.assert_allclose(matmul(np.eye(2), [[1.0], [2.0]]), [[1.0], [2.0]])
    assert l2_norm([3.0, 4.0]) == 5.0


def _reference_stream(seed: int, n: int) -> list[int]:
    """Independent xoshiro256++ / splitmix64 written with numpy uint64 wraparound."""
    with np.errstate(over="ignore"):
        sm = np.uint64(seed)
        s = []
        for _ in range(4):
            sm = sm + np.uint64(0x9E3779B97F4A7C15)
            z = sm
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            s.append(z ^ (z >> np.uint64(31)))

        def rotl(v, k):
            return (v << np.uint64(k)) | (v >> np.uint64(64 - k))

        out = []
        for _ in range(n):
            out.append(int(rotl(s[0] + s[3], 23) + s[0]))
            t = s[1] << np.uint64(17)
            s[2] ^= s[0]
            s[3] ^= s[1]
            s[1] ^= s[2]
            s[0] ^= s[3]
            s[2] ^= t
            s[3] = rotl(s[3], 45)
    return out


@pytest.mark.parametrize("seed", [0, 1, 42, 2**63 + 5])
def test_rng_matches_independent_reference(seed):
    r = Rng(seed)
    assert [r.next_u64() for _ in range(20)] == _reference_stream(seed, 20)


def test_rng_is_deterministic():
    a, b = Rng(42), Rng(42)
    assert [a.next_u64() for _ in range(5)] == [b.next_u64() for _ in range(5)]
    assert Rng(1).next_u64() != Rng(2).next_u64()


def test_uniforms_bulk_equals_scalar_stream():
    a, b = Rng(7), Rng(7)
    bulk = a.uniforms(100)
    single = np.array([b.uniform() for _ in range(100)])
    np.testing.assert_array_equal(bulk, single)
    assert np.all((bulk >= 0.0) & (bulk < 1.0))
    assert a.next_u64() == b.next_u64()


def test_normals_have_unit_moments():
    z = rng_normal(Rng(5), 200_001)
    assert len(z) == 200_001
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01
    with pytest.raises(ConfigurationError):
        rng_normal(Rng(5), 3, std=-1.0)


def test_derive_seed_separates_streams():
    seeds = {derive_seed(0, i, j) for i in range(20) for j in range(20)}
    assert len(seeds) == 400
    assert derive_seed(9, 1, 2) == derive_seed(9, 1, 2)
    assert derive_seed(9, 1, 2) != derive_seed(9, 2, 1)
