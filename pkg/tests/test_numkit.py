import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langshift import numkit
from langshift.errors import InvalidInputError, NotPositiveDefiniteError


def random_spd(rng, d, cond=None):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    if cond is None:
        vals = rng.uniform(0.5, 3.0, size=d)
    else:
        vals = np.geomspace(1.0, cond, d)
    return (q * vals) @ q.T


@pytest.mark.parametrize("shape", [(1, 1), (5, 3), (3, 5), (40, 6), (7, 7), (200, 16)])
def test_svd_reconstructs_and_matches_lapack(shape):
    rng = np.random.default_rng(sum(shape))
    x = rng.normal(size=shape)
    res = numkit.svd(x)
    r = min(shape)
    assert res.u.shape == (shape[0], r) and res.vt.shape == (r, shape[1])
    np.testing.assert_allclose(res.u * res.singular_values @ res.vt, x, atol=1e-12)
    np.testing.assert_allclose(res.singular_values, np.linalg.svd(x, compute_uv=False), rtol=1e-11)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(r), atol=1e-11)
    np.testing.assert_allclose(res.vt @ res.vt.T, np.eye(r), atol=1e-11)


def test_svd_of_rank_deficient_matrix_completes_u():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 2)) @ rng.normal(size=(2, 5))
    res = numkit.svd(x)
    assert res.singular_values[2:].max() < 1e-12
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(5), atol=1e-10)
    np.testing.assert_allclose(res.u * res.singular_values @ res.vt, x, atol=1e-12)


def test_svd_of_zero_matrix():
    res = numkit.svd(np.zeros((4, 3)))
    assert np.all(res.singular_values == 0)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(3), atol=1e-12)


def test_svd_leaves_input_untouched():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 6))
    before = x.copy()
    numkit.svd(x)
    numkit.svd(x.T)
    np.testing.assert_array_equal(x, before)


@pytest.mark.parametrize("bad", [np.array([1.0, 2.0]), np.array([[np.nan, 1.0]]), np.zeros((0, 3))])
def test_svd_rejects_bad_input(bad):
    with pytest.raises(InvalidInputError):
        numkit.svd(bad)


def test_round_robin_covers_every_pair_once():
    for n in range(1, 10):
        seen = []
        for p, q in numkit.round_robin_pairs(n):
            assert len(set(p) | set(q)) == 2 * len(p)  # disjoint within a round
            seen += list(zip(p.tolist(), q.tolist()))
        assert sorted(seen) == [(i, j) for i in range(n) for j in range(i + 1, n)]


def test_cholesky_hand_example():
    low = numkit.cholesky([[4.0, 2.0], [2.0, 3.0]])
    np.testing.assert_allclose(low, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-15)


def test_cholesky_reports_failing_pivot():
    a = np.diag([1.0, 2.0, -1.0, 4.0])
    with pytest.raises(NotPositiveDefiniteError) as info:
        numkit.cholesky(a)
    assert info.value.pivot == 2


def test_solve_spd_matches_numpy():
    rng = np.random.default_rng(1)
    a = random_spd(rng, 6)
    b = rng.normal(size=(6, 2))
    np.testing.assert_allclose(numkit.solve_spd(a, b), np.linalg.solve(a, b), rtol=1e-12)


def test_sym_eigensolve_small_cases():
    vals, vecs = numkit.sym_eigensolve([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(vals, [1.0, -1.0], atol=1e-15)
    np.testing.assert_allclose(np.abs(vecs), np.full((2, 2), np.sqrt(0.5)), atol=1e-15)
    vals, _ = numkit.sym_eigensolve(np.diag([3.0, -2.0, 5.0]))
    np.testing.assert_array_equal(vals, [5.0, 3.0, -2.0])


def test_sym_eigensolve_rejects_asymmetric():
    with pytest.raises(InvalidInputError):
        numkit.sym_eigensolve([[1.0, 2.0], [0.0, 1.0]])


def test_sym_eigensolve_converges_on_wide_dynamic_range():
    rng = np.random.default_rng(4)
    a = random_spd(rng, 24, cond=1e12)
    vals, vecs = numkit.sym_eigensolve(a)
    scale = np.linalg.norm(a)
    np.testing.assert_allclose(vals[::-1], np.linalg.eigvalsh(a), atol=1e-12 * scale)
    np.testing.assert_allclose(a @ vecs, vecs * vals, atol=1e-12 * scale)


def test_pencil_hand_example():
    np.testing.assert_allclose(numkit.spd_pencil_eigenvalues(np.eye(2), np.diag([4.0, 1.0])), [4.0, 1.0])


def test_pencil_needs_both_spd():
    with pytest.raises(NotPositiveDefiniteError):
        numkit.spd_pencil_eigenvalues(np.eye(2), np.diag([1.0, -1.0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_svd_property(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    res = numkit.svd(x)
    assert np.all(np.diff(res.singular_values) <= 0)
    np.testing.assert_allclose(res.u * res.singular_values @ res.vt, x, atol=1e-11)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_pencil_matches_generalized_eigenvalues(d, seed):
    rng = np.random.default_rng(seed)
    a, b = random_spd(rng, d), random_spd(rng, d)
    expected = np.sort(np.linalg.eigvals(np.linalg.solve(a, b)).real)[::-1]
    np.testing.assert_allclose(numkit.spd_pencil_eigenvalues(a, b), expected, rtol=1e-9)
