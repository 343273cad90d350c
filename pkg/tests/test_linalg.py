"""Dense/sparse Cholesky and Schur-condensation tests against dense oracles."""

import numpy as np
import pytest
import scipy.sparse as sp

from gridse.linalg import (
    NotPositiveDefiniteError,
    SparseCholeskyCache,
    dense_cholesky_solve,
    interior_recover,
    numeric_refactor,
    schur_condense,
    symbolic_analyze,
)


def random_spd(n, seed, density=0.25):
    """Sparse-ish SPD matrix A = M^T M + n I with a symmetric pattern."""
    rng = np.random.default_rng(seed)
    mask = rng.random((n, n)) < density
    m = np.where(mask, rng.standard_normal((n, n)), 0.0)
    a = m.T @ m + n * np.eye(n)
    return a


def as_csr(a):
    mat = sp.csr_matrix(a)
    mat.sort_indices()
    return mat


# ---------------------------------------------------------------------------
# dense kernel
# ---------------------------------------------------------------------------

def test_dense_identity():
    b = np.array([3.0, -1.0, 2.0])
    assert np.array_equal(dense_cholesky_solve(np.eye(3), b), b)


def test_dense_hand_example():
    x = dense_cholesky_solve(np.array([[4.0, 2.0], [2.0, 3.0]]), np.array([2.0, 1.0]))
    assert x == pytest.approx(np.array([0.5, 0.0]), abs=1e-14)


def test_dense_indefinite_reports_pivot():
    with pytest.raises(NotPositiveDefiniteError) as err:
        dense_cholesky_solve(np.array([[1.0, 2.0], [2.0, 1.0]]), np.array([1.0, 1.0]))
    assert err.value.pivot == 1


def test_dense_residual_contract():
    rng = np.random.default_rng(0)
    for n in (5, 20, 80):
        a = random_spd(n, n, density=1.0)
        b = rng.standard_normal(n)
        x = dense_cholesky_solve(a, b)
        assert np.max(np.abs(a @ x - b)) <= 1e-10 * (1.0 + np.max(np.abs(b)))


# ---------------------------------------------------------------------------
# symbolic analysis
# ---------------------------------------------------------------------------

def test_diagonal_pattern_no_fill():
    cache = symbolic_analyze(as_csr(np.eye(6)), dense_threshold=0)
    assert cache.factor_nnz == 6


def test_tridiagonal_no_fill_natural_order():
    n = 5
    a = np.diag(np.full(n, 4.0)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)
    cache = symbolic_analyze(as_csr(a), dense_threshold=0, ordering="natural")
    assert cache.factor_nnz == n + (n - 1)  # band only


def test_arrow_fill_natural_vs_minimum_degree():
    # arrow with the dense row/column placed FIRST so natural order fills
    n = 30
    a = np.eye(n) * n
    a[0, :] = 1.0
    a[:, 0] = 1.0
    a[0, 0] = n
    natural = symbolic_analyze(as_csr(a), dense_threshold=0, ordering="natural")
    amd = symbolic_analyze(as_csr(a), dense_threshold=0, ordering="amd")
    assert natural.factor_nnz == n * (n + 1) // 2  # complete fill
    assert amd.factor_nnz == 2 * n - 1  # no fill beyond the arrow itself


# ---------------------------------------------------------------------------
# numeric refactorization
# ---------------------------------------------------------------------------

def test_refactor_identity_values():
    pat = as_csr(np.eye(7))
    cache = numeric_refactor(symbolic_analyze(pat, dense_threshold=0), pat)
    b = np.arange(7.0)
    assert np.allclose(cache.solve(b), b, atol=0)


def test_refactor_matches_dense_oracle():
    for seed in range(5):
        a = random_spd(50, seed)
        cache = symbolic_analyze(as_csr(a), dense_threshold=0)
        numeric_refactor(cache, as_csr(a))
        rng = np.random.default_rng(seed)
        b = rng.standard_normal(50)
        x_ref = np.linalg.solve(a, b)
        x = cache.solve(b)
        assert np.max(np.abs(x - x_ref)) <= 1e-9 * (1.0 + np.max(np.abs(x_ref)))


def test_refactor_zero_values_fails_at_pivot_zero():
    pat = as_csr(np.eye(4))
    cache = symbolic_analyze(pat, dense_threshold=0)
    with pytest.raises(NotPositiveDefiniteError) as err:
        numeric_refactor(cache, np.zeros(4))
    assert err.value.pivot == 0


def test_symbolic_reuse_across_value_updates():
    a = random_spd(40, 3)
    pat = as_csr(a)
    cache = symbolic_analyze(pat, dense_threshold=0)
    structure = (cache.Lp.copy(), cache.Li.copy())
    rng = np.random.default_rng(1)
    for _ in range(10):
        scale = float(rng.uniform(0.5, 2.0))
        numeric_refactor(cache, pat.data * scale)
        assert np.array_equal(cache.Lp, structure[0])
        assert np.array_equal(cache.Li, structure[1])
        b = rng.standard_normal(40)
        x = cache.solve(b)
        assert np.max(np.abs((a * scale) @ x - b)) <= 1e-9 * (1.0 + np.max(np.abs(b)))


def test_dense_fallback_below_threshold():
    a = random_spd(10, 5)
    cache = symbolic_analyze(as_csr(a))  # default threshold 64 -> dense mode
    assert cache.mode == "dense"
    numeric_refactor(cache, as_csr(a))
    b = np.ones(10)
    assert np.allclose(a @ cache.solve(b), b, atol=1e-10)


def test_value_projection_onto_pattern():
    # values with a sparser support than the analyzed pattern are accepted
    a = random_spd(20, 7)
    pat = as_csr(a)
    cache = symbolic_analyze(pat, dense_threshold=0)
    sub = a.copy()
    sub[0, 1] = sub[1, 0] = 0.0
    sub_csr = as_csr(sub)
    sub_csr.eliminate_zeros()
    numeric_refactor(cache, sub_csr + sp.csr_matrix((20, 20)))
    b = np.ones(20)
    assert np.max(np.abs(sub @ cache.solve(b) - b)) <= 1e-9


# ---------------------------------------------------------------------------
# Schur condensation
# ---------------------------------------------------------------------------

def make_block_system(n_i, n_b, seed):
    full = random_spd(n_i + n_b, seed)
    g_ii = full[:n_i, :n_i]
    g_ib = full[:n_i, n_i:]
    g_bb = full[n_i:, n_i:]
    rng = np.random.default_rng(1000 + seed)
    b = rng.standard_normal(n_i + n_b)
    return full, g_ii, g_ib, g_bb, b[:n_i], b[n_i:]


def condense(g_ii, g_ib, g_bb, b_i, b_b, dense_threshold=0):
    cache = symbolic_analyze(as_csr(g_ii), dense_threshold=dense_threshold)
    numeric_refactor(cache, as_csr(g_ii))
    return cache, schur_condense(cache, sp.csr_matrix(g_ib), g_bb, b_i, b_b)


def test_schur_hand_example():
    cache, res = condense(
        np.array([[2.0]]), np.array([[1.0]]), np.array([[3.0]]), np.array([4.0]), np.array([5.0])
    )
    assert res.s_b == pytest.approx(np.array([[2.5]]))
    assert res.b_hat == pytest.approx(np.array([3.0]))
    # recovery: dx_b = 3/2.5 = 1.2, dx_i = (4 - 1.2)/2 = 1.4
    dx_b = dense_cholesky_solve(res.s_b, res.b_hat)
    assert dx_b == pytest.approx(np.array([1.2]))
    dx_i = interior_recover(cache, sp.csr_matrix(np.array([[1.0]])), np.array([4.0]), dx_b)
    assert dx_i == pytest.approx(np.array([1.4]))


def test_schur_decoupled_blocks():
    g_ii = np.diag([2.0, 3.0])
    g_ib = np.zeros((2, 2))
    g_bb = np.array([[4.0, 1.0], [1.0, 4.0]])
    b_i = np.array([1.0, 1.0])
    b_b = np.array([2.0, -2.0])
    _, res = condense(g_ii, g_ib, g_bb, b_i, b_b)
    assert np.array_equal(res.s_b, g_bb)
    assert np.array_equal(res.b_hat, b_b)


@pytest.mark.parametrize("seed", range(8))
def test_schur_matches_monolithic_solve(seed):
    rng = np.random.default_rng(seed)
    n_i = int(rng.integers(5, 60))
    n_b = int(rng.integers(1, 12))
    full, g_ii, g_ib, g_bb, b_i, b_b = make_block_system(n_i, n_b, seed)
    cache, res = condense(g_ii, g_ib, g_bb, b_i, b_b)
    dx_b = dense_cholesky_solve(res.s_b, res.b_hat)
    dx_i = interior_recover(cache, sp.csr_matrix(g_ib), b_i, dx_b)
    ref = np.linalg.solve(full, np.concatenate([b_i, b_b]))
    got = np.concatenate([dx_i, dx_b])
    assert np.max(np.abs(got - ref)) <= 1e-9 * (1.0 + np.max(np.abs(ref)))
    # direct residual check on the block system
    resid = full @ got - np.concatenate([b_i, b_b])
    assert np.max(np.abs(resid)) <= 1e-9 * (1.0 + np.max(np.abs(b_i)))


def test_interior_recover_zero_boundary_delta():
    a = random_spd(12, 2)
    cache = symbolic_analyze(as_csr(a), dense_threshold=0)
    numeric_refactor(cache, as_csr(a))
    b = np.arange(12.0)
    got = interior_recover(cache, sp.csr_matrix((12, 0)), b, np.zeros(0))
    assert np.allclose(got, cache.solve(b), atol=0)


def test_schur_spd_propagation():
    for seed in range(5):
        full, g_ii, g_ib, g_bb, b_i, b_b = make_block_system(30, 6, seed)
        _, res = condense(g_ii, g_ib, g_bb, b_i, b_b)
        assert np.max(np.abs(res.s_b - res.s_b.T)) <= 1e-12 * (1 + np.max(np.abs(res.s_b)))
        dense_cholesky_solve(res.s_b, res.b_hat)  # must not raise


def test_schur_empty_interior():
    cache = symbolic_analyze(sp.csr_matrix((0, 0)), dense_threshold=0)
    numeric_refactor(cache, np.zeros(0))
    g_bb = np.array([[2.0]])
    res = schur_condense(cache, sp.csr_matrix((0, 1)), g_bb, np.zeros(0), np.array([3.0]))
    assert np.array_equal(res.s_b, g_bb)
    assert np.array_equal(res.b_hat, np.array([3.0]))


def test_factor_stats():
    a = random_spd(40, 13)
    sparse = symbolic_analyze(as_csr(a), dense_threshold=0)
    dense = symbolic_analyze(as_csr(a))
    for cache in (sparse, dense):
        st = cache.stats()
        assert st["n"] == 40
        assert st["factor_nnz"] >= 40
        assert st["fill_ratio"] >= 0.0
        assert st["factor_flops"] > 0
    assert sparse.stats()["mode"] == "sparse"
    assert dense.stats()["mode"] == "dense"


def test_iterative_refinement_pass():
    a = random_spd(30, 11)
    cache = symbolic_analyze(as_csr(a), dense_threshold=0)
    numeric_refactor(cache, as_csr(a))
    b = np.ones(30)
    x = cache.solve(b, refine_with=as_csr(a))
    assert np.max(np.abs(a @ x - b)) <= 1e-12 * (1.0 + np.max(np.abs(b)))
