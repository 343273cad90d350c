"""Symmetric positive-definite solvers.

Three layers:

* ``dense_cholesky_solve`` -- LAPACK dpotrf/dpotrs with pivot reporting.
* ``SparseCholeskyCache``  -- up-looking sparse Cholesky.  The symbolic
  phase (fill-reducing minimum-degree ordering, elimination tree, row
  patterns, flattened update program) runs once per sparsity pattern;
  ``numeric_refactor`` only replaces values.  Systems below a dimension
  threshold fall back to a dense factor behind the same interface.
* ``schur_condense`` / ``interior_recover`` -- boundary condensation via
  partial forward solves against the cached factor and interior recovery
  via the full back-substitution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg import lapack

DENSE_FALLBACK_DIM = 64


class NotPositiveDefiniteError(ValueError):
    """Cholesky hit a non-positive pivot (unobservable or indefinite system)."""

    def __init__(self, pivot, context="matrix"):
        super().__init__(f"{context} not positive definite at pivot {pivot}")
        self.pivot = int(pivot)
        self.context = context


@dataclass
class SchurResult:
    """Condensed boundary block S_b and right-hand side b_hat of one area."""

    s_b: np.ndarray
    b_hat: np.ndarray


def dense_cholesky_solve(a, b, context="matrix"):
    """Solve SPD ``a x = b`` by dense Cholesky; reports the failing pivot."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    if n == 0:
        return np.zeros_like(b)
    c, info = lapack.dpotrf(a, lower=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1, context)
    if info < 0:
        raise ValueError(f"dpotrf illegal argument {-info}")
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs failed with info={info}")
    return x


# ---------------------------------------------------------------------------
# Ordering and symbolic analysis
# ---------------------------------------------------------------------------

def _min_degree_order(indptr, indices, n):
    """Greedy minimum-degree ordering on the elimination graph (ties: lowest id)."""
    adj = [set() for _ in range(n)]
    for i in range(n):
        for j in indices[indptr[i]:indptr[i + 1]]:
            if j != i:
                adj[i].add(int(j))
    alive = np.ones(n, dtype=bool)
    degs = np.array([len(a) for a in adj], dtype=int)
    perm = np.empty(n, dtype=int)
    for step in range(n):
        cand = np.flatnonzero(alive)
        k = int(cand[np.argmin(degs[cand])])
        perm[step] = k
        alive[k] = False
        nbrs = sorted(adj[k])
        nbrs_set = adj[k]
        for v in nbrs:
            s = adj[v]
            s.discard(k)
            s |= nbrs_set
            s.discard(v)
        for v in nbrs:
            degs[v] = len(adj[v])
    return perm


def _etree(n, col_ptr, col_rows):
    """Elimination tree from the upper triangle stored column-wise."""
    parent = np.full(n, -1, dtype=int)
    ancestor = np.full(n, -1, dtype=int)
    for k in range(n):
        for p in range(col_ptr[k], col_ptr[k + 1]):
            i = col_rows[p]
            while i != -1 and i < k:
                nxt = ancestor[i]
                ancestor[i] = k
                if nxt == -1:
                    parent[i] = k
                i = nxt
    return parent


def _ereach(k, col_ptr, col_rows, parent, marked, stack):
    """Pattern of factor row k (topological order along elimination-tree paths)."""
    top = len(stack)
    marked[k] = k
    for p in range(col_ptr[k], col_ptr[k + 1]):
        i = col_rows[p]
        if i > k:
            continue
        length = 0
        while marked[i] != k:
            stack[length] = i
            length += 1
            marked[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            stack[top] = stack[length]
    return stack[top:len(stack)].copy()


class SparseCholeskyCache:
    """Persistent Cholesky factorization: analyze once, refactor many times.

    Sparse mode keeps a static update program derived from the pattern; the
    numeric phase executes it with fresh values only.  Dense mode (small
    systems) stores a dense lower factor behind the same interface.
    """

    def __init__(self, pattern: sp.csr_matrix, dense_threshold=DENSE_FALLBACK_DIM,
                 ordering="amd", context="matrix"):
        pattern = pattern.tocsr()
        pattern.sort_indices()
        self.n = pattern.shape[0]
        self.context = context
        self.pattern_indptr = pattern.indptr.copy()
        self.pattern_indices = pattern.indices.copy()
        self.mode = "dense" if self.n < dense_threshold else "sparse"
        self._dense_factor = None
        self._factorized = False
        if self.mode == "sparse":
            self._analyze(ordering)

    # -- symbolic phase ----------------------------------------------------

    def _analyze(self, ordering):
        n = self.n
        indptr, indices = self.pattern_indptr, self.pattern_indices
        if ordering == "amd":
            perm = _min_degree_order(indptr, indices, n)
        elif ordering == "natural":
            perm = np.arange(n, dtype=int)
        else:
            raise ValueError(f"unknown ordering {ordering!r}")
        self.perm = perm
        inv = np.empty(n, dtype=int)
        inv[perm] = np.arange(n)

        # permuted upper triangle, column-wise, with source positions into
        # the user's CSR value array
        col_rows = [[] for _ in range(n)]
        col_src = [[] for _ in range(n)]
        for knew in range(n):
            korig = perm[knew]
            for p in range(indptr[korig], indptr[korig + 1]):
                jnew = inv[indices[p]]
                if jnew <= knew:
                    col_rows[knew].append(jnew)
                    col_src[knew].append(p)
        self._c_ptr = np.zeros(n + 1, dtype=int)
        for k in range(n):
            self._c_ptr[k + 1] = self._c_ptr[k] + len(col_rows[k])
        self._c_rows = np.array(
            [r for rows in col_rows for r in rows], dtype=int
        )
        self._c_src = np.array([s for srcs in col_src for s in srcs], dtype=int)

        parent = _etree(n, self._c_ptr, self._c_rows)
        self.parent = parent

        marked = np.full(n, -1, dtype=int)
        stack = np.empty(n, dtype=int)
        patterns = [
            _ereach(k, self._c_ptr, self._c_rows, parent, marked, stack) for k in range(n)
        ]

        counts = np.ones(n, dtype=int)  # diagonal entries
        for k in range(n):
            for j in patterns[k]:
                counts[j] += 1
        self.Lp = np.zeros(n + 1, dtype=int)
        np.cumsum(counts, out=self.Lp[1:])
        nnz = int(self.Lp[n])
        self.Li = np.empty(nnz, dtype=int)
        self.Li[self.Lp[:n]] = np.arange(n)  # diagonals first in each column

        # flatten the per-row update program
        fill = np.zeros(n, dtype=int)
        col_members = [[] for _ in range(n)]
        prog_col, prog_start, prog_len, prog_write = [], [], [], []
        prog_upd = []
        self.row_ptr = np.zeros(n + 1, dtype=int)
        for k in range(n):
            for j in patterns[k]:
                cnt = fill[j]
                prog_col.append(j)
                prog_start.append(self.Lp[j] + 1)
                prog_len.append(cnt)
                prog_upd.append(np.array(col_members[j], dtype=int))
                wpos = self.Lp[j] + 1 + cnt
                prog_write.append(wpos)
                self.Li[wpos] = k
                fill[j] = cnt + 1
                col_members[j].append(k)
            self.row_ptr[k + 1] = len(prog_col)
        self.prog_col = np.array(prog_col, dtype=int)
        self.prog_start = np.array(prog_start, dtype=int)
        self.prog_len = np.array(prog_len, dtype=int)
        self.prog_write = np.array(prog_write, dtype=int)
        self.prog_upd = prog_upd
        self.Lx = np.zeros(nnz)

    @property
    def factor_nnz(self):
        if self.mode == "dense":
            return self.n * (self.n + 1) // 2
        return int(self.Lp[self.n])

    def factor_row_counts(self):
        """Nonzeros per factor column (sparse mode), for fill statistics."""
        return np.diff(self.Lp)

    def stats(self):
        """Fill and work statistics of the analyzed factor."""
        pattern_nnz = int(self.pattern_indices.size)
        if self.mode == "dense":
            flops = self.n**3 / 3.0
        else:
            counts = self.factor_row_counts()
            flops = float(np.sum(counts.astype(float) ** 2))
        return {
            "n": self.n,
            "mode": self.mode,
            "pattern_nnz": pattern_nnz,
            "factor_nnz": self.factor_nnz,
            "fill_ratio": (2.0 * self.factor_nnz - self.n) / max(pattern_nnz, 1),
            "factor_flops": flops,
        }

    # -- numeric phase -----------------------------------------------------

    def _values_from(self, values):
        if sp.issparse(values):
            mat = values.tocsr()
            mat.sort_indices()
            if np.array_equal(mat.indptr, self.pattern_indptr) and np.array_equal(
                mat.indices, self.pattern_indices
            ):
                return mat.data
            # align onto the analyzed pattern; support must not exceed it
            out = np.zeros(len(self.pattern_indices))
            for i in range(self.n):
                p0, p1 = self.pattern_indptr[i], self.pattern_indptr[i + 1]
                m0, m1 = mat.indptr[i], mat.indptr[i + 1]
                if m0 == m1:
                    continue
                cols = mat.indices[m0:m1]
                prow = self.pattern_indices[p0:p1]
                pos = np.searchsorted(prow, cols)
                if np.any(pos >= p1 - p0) or np.any(prow[np.minimum(pos, p1 - p0 - 1)] != cols):
                    raise ValueError("matrix support exceeds the analyzed pattern")
                out[p0 + pos] = mat.data[m0:m1]
            return out
        values = np.asarray(values, dtype=float)
        if values.shape != self.pattern_indices.shape:
            raise ValueError(
                f"value array of length {values.size} does not match pattern "
                f"nnz {self.pattern_indices.size}"
            )
        return values

    def refactor(self, values):
        """Numeric refactorization with the cached symbolic structure."""
        vals = self._values_from(values)
        if self.mode == "dense":
            a = sp.csr_matrix(
                (vals, self.pattern_indices, self.pattern_indptr), shape=(self.n, self.n)
            ).toarray()
            if self.n:
                c, info = lapack.dpotrf(a, lower=1)
                if info > 0:
                    raise NotPositiveDefiniteError(info - 1, self.context)
                self._dense_factor = c
            self._factorized = True
            return self

        n = self.n
        x = np.zeros(n)
        Lx = self.Lx
        Lp, perm = self.Lp, self.perm
        for k in range(n):
            sl = slice(self._c_ptr[k], self._c_ptr[k + 1])
            x[self._c_rows[sl]] = vals[self._c_src[sl]]
            d = x[k]
            x[k] = 0.0
            for t in range(self.row_ptr[k], self.row_ptr[k + 1]):
                j = self.prog_col[t]
                xj = x[j]
                x[j] = 0.0
                lkj = xj / Lx[Lp[j]]
                m = self.prog_len[t]
                if m:
                    s0 = self.prog_start[t]
                    x[self.prog_upd[t]] -= Lx[s0:s0 + m] * lkj
                d -= lkj * lkj
                Lx[self.prog_write[t]] = lkj
            if d <= 0.0:
                self._factorized = False
                raise NotPositiveDefiniteError(perm[k], self.context)
            Lx[Lp[k]] = math.sqrt(d)
        self._factorized = True
        return self

    def _require_factor(self):
        if not self._factorized:
            raise RuntimeError("numeric factorization has not been run")

    # -- solves --------------------------------------------------------------

    def forward(self, b):
        """y = L^{-1} P b (partial forward solve); b is a vector or matrix."""
        self._require_factor()
        b = np.asarray(b, dtype=float)
        if self.n == 0:
            return b.copy()
        if self.mode == "dense":
            return sla.solve_triangular(self._dense_factor, b, lower=True)
        y = b[self.perm].astype(float, copy=True)
        Lp, Li, Lx = self.Lp, self.Li, self.Lx
        if y.ndim == 1:
            for j in range(self.n):
                yj = y[j] / Lx[Lp[j]]
                y[j] = yj
                sl = slice(Lp[j] + 1, Lp[j + 1])
                if sl.start < sl.stop:
                    y[Li[sl]] -= Lx[sl] * yj
        else:
            for j in range(self.n):
                yj = y[j] / Lx[Lp[j]]
                y[j] = yj
                sl = slice(Lp[j] + 1, Lp[j + 1])
                if sl.start < sl.stop:
                    y[Li[sl]] -= Lx[sl, None] * yj[None, :]
        return y

    def backward(self, y):
        """x = P^T L^{-T} y (partial backward solve)."""
        self._require_factor()
        y = np.asarray(y, dtype=float)
        if self.n == 0:
            return y.copy()
        if self.mode == "dense":
            return sla.solve_triangular(self._dense_factor.T, y, lower=False)
        z = y.astype(float, copy=True)
        Lp, Li, Lx = self.Lp, self.Li, self.Lx
        for j in range(self.n - 1, -1, -1):
            sl = slice(Lp[j] + 1, Lp[j + 1])
            if sl.start < sl.stop:
                z[j] -= Lx[sl] @ z[Li[sl]]
            z[j] = z[j] / Lx[Lp[j]]
        x = np.empty_like(z)
        x[self.perm] = z
        return x

    def solve(self, b, refine_with=None):
        """Full solve; optional single iterative-refinement pass against
        ``refine_with`` (the assembled matrix)."""
        x = self.backward(self.forward(b))
        if refine_with is not None:
            r = np.asarray(b, dtype=float) - refine_with @ x
            x = x + self.backward(self.forward(r))
        return x


def symbolic_analyze(pattern, dense_threshold=DENSE_FALLBACK_DIM, ordering="amd",
                     context="matrix") -> SparseCholeskyCache:
    """One-time symbolic analysis of a structurally symmetric CSR pattern."""
    return SparseCholeskyCache(pattern, dense_threshold, ordering, context)


def numeric_refactor(cache: SparseCholeskyCache, values) -> SparseCholeskyCache:
    """Value-only refactorization; the symbolic structure never changes."""
    return cache.refactor(values)


# ---------------------------------------------------------------------------
# Schur condensation
# ---------------------------------------------------------------------------

def schur_condense(cache: SparseCholeskyCache, g_ib, g_bb, b_i, b_b) -> SchurResult:
    """Condense the interior block: S_b = g_bb - g_ib^T g_ii^{-1} g_ib and
    b_hat = b_b - g_ib^T g_ii^{-1} b_i, via partial forward solves."""
    g_bb = np.asarray(g_bb, dtype=float)
    b_b = np.asarray(b_b, dtype=float)
    if cache.n == 0:
        return SchurResult(s_b=g_bb.copy(), b_hat=b_b.copy())
    gib_dense = g_ib.toarray() if sp.issparse(g_ib) else np.asarray(g_ib, dtype=float)
    if gib_dense.shape[1] == 0:
        return SchurResult(s_b=g_bb.copy(), b_hat=b_b.copy())
    z = cache.forward(gib_dense)
    w = cache.forward(np.asarray(b_i, dtype=float))
    s_b = g_bb - z.T @ z
    b_hat = b_b - z.T @ w
    return SchurResult(s_b=s_b, b_hat=b_hat)


def interior_recover(cache: SparseCholeskyCache, g_ib, b_i, delta_xb) -> np.ndarray:
    """Interior update after the boundary solve: g_ii^{-1} (b_i - g_ib dx_b)."""
    b_i = np.asarray(b_i, dtype=float)
    if cache.n == 0:
        return np.zeros(0)
    delta_xb = np.asarray(delta_xb, dtype=float)
    rhs = b_i if delta_xb.size == 0 else b_i - g_ib @ delta_xb
    return cache.solve(rhs)
