"""Normal-equation block assembly for one area.

Two routes build the same blocks:

* ``fused_accumulate`` evaluates each row's residual and template gradient
  once and scatter-adds weighted products straight into the block value
  arrays, never materializing the Jacobian.  All index programs are built
  once per (area, measurement template) by ``build_patterns`` and reused
  across Gauss-Newton iterations.
* ``explicit_assemble`` materializes the sparse Jacobian and forms the
  blocks by sparse triple products (the test oracle; it also powers the
  centralized baseline).  Both routes consume the same per-row template
  evaluation, so their comparison isolates the accumulation bookkeeping;
  the evaluation layer itself is checked against per-row reference
  formulas and finite differences in the measurement tests.

Accumulation order is fixed (row order per destination slot), so repeated
runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .measurement import MeasurementSet, MeasurementType
from .partition import AreaVariableMap


@dataclass
class AreaNormalBlocks:
    """Gauss-Newton normal-equation blocks of one area.

    g_ii is sparse symmetric over interior variables, g_ib sparse rectangular
    interior x boundary, g_bb dense symmetric over local boundary variables
    (the transpose block is implicit).
    """

    g_ii: sp.csr_matrix
    g_ib: sp.csr_matrix
    g_bb: np.ndarray
    b_i: np.ndarray
    b_b: np.ndarray

    @property
    def n_interior(self):
        return self.g_ii.shape[0]

    @property
    def n_boundary(self):
        return self.g_bb.shape[0]


@dataclass
class JacobianTriplets:
    """Materialized area Jacobian (oracle path only)."""

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    weights: np.ndarray
    residuals: np.ndarray
    n_rows: int
    n_cols: int

    def to_csr(self):
        return sp.csr_matrix(
            (self.vals, (self.rows, self.cols)), shape=(self.n_rows, self.n_cols)
        )


# ---------------------------------------------------------------------------
# Static per-area evaluation blocks
# ---------------------------------------------------------------------------

@dataclass
class _VmBlock:
    rpos: np.ndarray  # positions in the area row list
    bus: np.ndarray
    vm_pos: np.ndarray  # g_flat slot of the single template entry


@dataclass
class _InjBlock:
    reactive: bool
    rpos: np.ndarray
    bus: np.ndarray
    g_ii_diag: np.ndarray
    b_ii_diag: np.ndarray
    d_th_pos: np.ndarray  # -1 when the target bus is the slack
    d_vm_pos: np.ndarray
    e_src: np.ndarray  # edge -> index into this block's rows
    e_j: np.ndarray
    e_g: np.ndarray
    e_b: np.ndarray
    e_th_pos: np.ndarray  # -1 when the neighbor is the slack
    e_vm_pos: np.ndarray


@dataclass
class _FlowBlock:
    reactive: bool
    rpos: np.ndarray
    own: np.ndarray
    oth: np.ndarray
    y_own: np.ndarray
    y_oth: np.ndarray
    th_o_pos: np.ndarray  # -1 when that end is the slack
    th_u_pos: np.ndarray
    vm_o_pos: np.ndarray
    vm_u_pos: np.ndarray


@dataclass
class AssemblyPattern:
    """One-time symbolic analysis of an area's measurement templates.

    Holds the CSR patterns of g_ii / g_ib plus flat index programs mapping
    every (row, template-slot-pair) product to its destination entry.
    """

    vmap: AreaVariableMap
    row_ids: np.ndarray
    n_interior: int
    n_boundary: int
    # flat template layout
    slot_ptr: np.ndarray
    slot_var: np.ndarray
    # evaluation blocks
    blocks: list
    # CSR patterns (static across iterations and masking)
    gii_indptr: np.ndarray = None
    gii_indices: np.ndarray = None
    gib_indptr: np.ndarray = None
    gib_indices: np.ndarray = None
    # pair programs
    pair_ii_dest: np.ndarray = None
    pair_ii_a: np.ndarray = None
    pair_ii_b: np.ndarray = None
    pair_ii_row: np.ndarray = None
    pair_ib_dest: np.ndarray = None
    pair_ib_a: np.ndarray = None
    pair_ib_b: np.ndarray = None
    pair_ib_row: np.ndarray = None
    pair_bb_dest: np.ndarray = None
    pair_bb_a: np.ndarray = None
    pair_bb_b: np.ndarray = None
    pair_bb_row: np.ndarray = None
    # right-hand-side programs
    bi_dest: np.ndarray = None
    bi_pos: np.ndarray = None
    bi_row: np.ndarray = None
    bb_dest: np.ndarray = None
    bb_pos: np.ndarray = None
    bb_row: np.ndarray = None

    def gii_pattern(self):
        n = self.n_interior
        return sp.csr_matrix(
            (np.ones(len(self.gii_indices)), self.gii_indices, self.gii_indptr), shape=(n, n)
        )


def area_row_ids(vmap: AreaVariableMap, ms: MeasurementSet) -> np.ndarray:
    """Rows owned by the area (bus owner for bus rows, from-bus for flows)."""
    owned = vmap.owned_buses
    return np.array([i for i in range(ms.m) if int(ms.owner_bus[i]) in owned], dtype=int)


def build_patterns(vmap: AreaVariableMap, ms: MeasurementSet) -> AssemblyPattern:
    """Precompute template slots, CSR patterns and scatter programs for an area."""
    net = ms.net
    slack = net.slack
    row_ids = area_row_ids(vmap, ms)
    n_rows = len(row_ids)
    n_i, n_b = vmap.n_interior, vmap.n_boundary

    slot_ptr = np.zeros(n_rows + 1, dtype=int)
    slot_var = []
    # per-type builders
    vm_r, vm_bus, vm_pos = [], [], []
    inj = {False: None, True: None}
    inj_data = {
        False: dict(rpos=[], bus=[], gd=[], bd=[], dth=[], dvm=[], es=[], ej=[], eg=[], eb=[], eth=[], evm=[]),
        True: dict(rpos=[], bus=[], gd=[], bd=[], dth=[], dvm=[], es=[], ej=[], eg=[], eb=[], eth=[], evm=[]),
    }
    flow_data = {}
    for t in (MeasurementType.PF, MeasurementType.PT, MeasurementType.QF, MeasurementType.QT):
        flow_data[t] = dict(rpos=[], own=[], oth=[], yo=[], yu=[], tho=[], thu=[], vmo=[], vmu=[])

    y = net.ybus
    cursor = 0
    for r, i in enumerate(row_ids):
        t = MeasurementType(int(ms.mtype[i]))
        tg = int(ms.target[i])
        if t == MeasurementType.VM:
            pos = cursor
            slot_var.append(vmap.local_index(tg, "vm"))
            cursor += 1
            vm_r.append(r)
            vm_bus.append(tg)
            vm_pos.append(pos)
        elif t in (MeasurementType.PINJ, MeasurementType.QINJ):
            d = inj_data[t == MeasurementType.QINJ]
            sl = slice(y.indptr[tg], y.indptr[tg + 1])
            nbrs = [int(j) for j in y.indices[sl]]
            ydat = {int(j): v for j, v in zip(y.indices[sl], y.data[sl])}
            th_pos = {}
            for j in nbrs:
                if j == slack:
                    continue
                th_pos[j] = cursor
                slot_var.append(vmap.local_index(j, "va"))
                cursor += 1
            vm_pos_row = {}
            for j in nbrs:
                vm_pos_row[j] = cursor
                slot_var.append(vmap.local_index(j, "vm"))
                cursor += 1
            src = len(d["rpos"])
            d["rpos"].append(r)
            d["bus"].append(tg)
            d["gd"].append(ydat[tg].real)
            d["bd"].append(ydat[tg].imag)
            d["dth"].append(th_pos.get(tg, -1))
            d["dvm"].append(vm_pos_row[tg])
            for j in nbrs:
                if j == tg:
                    continue
                d["es"].append(src)
                d["ej"].append(j)
                d["eg"].append(ydat[j].real)
                d["eb"].append(ydat[j].imag)
                d["eth"].append(th_pos.get(j, -1))
                d["evm"].append(vm_pos_row[j])
        else:
            d = flow_data[t]
            br = net.branches[tg]
            y_ff, y_ft, y_tf, y_tt = br.two_port()
            if t in (MeasurementType.PF, MeasurementType.QF):
                o, u, yo, yu = br.from_bus, br.to_bus, y_ff, y_ft
            else:
                o, u, yo, yu = br.to_bus, br.from_bus, y_tt, y_tf
            f, tt = br.from_bus, br.to_bus
            th = {}
            for bbus in (f, tt):
                if bbus == slack:
                    continue
                th[bbus] = cursor
                slot_var.append(vmap.local_index(bbus, "va"))
                cursor += 1
            vmp = {}
            for bbus in (f, tt):
                vmp[bbus] = cursor
                slot_var.append(vmap.local_index(bbus, "vm"))
                cursor += 1
            d["rpos"].append(r)
            d["own"].append(o)
            d["oth"].append(u)
            d["yo"].append(yo)
            d["yu"].append(yu)
            d["tho"].append(th.get(o, -1))
            d["thu"].append(th.get(u, -1))
            d["vmo"].append(vmp[o])
            d["vmu"].append(vmp[u])
        slot_ptr[r + 1] = cursor

    slot_var = np.asarray(slot_var, dtype=int)
    blocks = []
    if vm_r:
        blocks.append(
            _VmBlock(
                rpos=np.array(vm_r), bus=np.array(vm_bus), vm_pos=np.array(vm_pos)
            )
        )
    for reactive in (False, True):
        d = inj_data[reactive]
        if d["rpos"]:
            blocks.append(
                _InjBlock(
                    reactive=reactive,
                    rpos=np.array(d["rpos"]),
                    bus=np.array(d["bus"]),
                    g_ii_diag=np.array(d["gd"]),
                    b_ii_diag=np.array(d["bd"]),
                    d_th_pos=np.array(d["dth"]),
                    d_vm_pos=np.array(d["dvm"]),
                    e_src=np.array(d["es"], dtype=int),
                    e_j=np.array(d["ej"], dtype=int),
                    e_g=np.array(d["eg"]),
                    e_b=np.array(d["eb"]),
                    e_th_pos=np.array(d["eth"], dtype=int),
                    e_vm_pos=np.array(d["evm"], dtype=int),
                )
            )
    for t in (MeasurementType.PF, MeasurementType.PT, MeasurementType.QF, MeasurementType.QT):
        d = flow_data[t]
        if d["rpos"]:
            blocks.append(
                _FlowBlock(
                    reactive=t in (MeasurementType.QF, MeasurementType.QT),
                    rpos=np.array(d["rpos"]),
                    own=np.array(d["own"]),
                    oth=np.array(d["oth"]),
                    y_own=np.array(d["yo"], dtype=complex),
                    y_oth=np.array(d["yu"], dtype=complex),
                    th_o_pos=np.array(d["tho"], dtype=int),
                    th_u_pos=np.array(d["thu"], dtype=int),
                    vm_o_pos=np.array(d["vmo"], dtype=int),
                    vm_u_pos=np.array(d["vmu"], dtype=int),
                )
            )

    pat = AssemblyPattern(
        vmap=vmap,
        row_ids=row_ids,
        n_interior=n_i,
        n_boundary=n_b,
        slot_ptr=slot_ptr,
        slot_var=slot_var,
        blocks=blocks,
    )
    _build_pair_programs(pat)
    return pat


def _csr_pattern_from_codes(codes, n_rows, n_cols):
    uniq = np.unique(codes)
    rows = uniq // max(n_cols, 1)
    indices = uniq % max(n_cols, 1)
    indptr = np.zeros(n_rows + 1, dtype=int)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    return uniq, indptr, indices.astype(int)


def _build_pair_programs(pat: AssemblyPattern):
    n_i, n_b = pat.n_interior, pat.n_boundary
    sizes = np.diff(pat.slot_ptr)
    s2 = sizes * sizes
    total = int(s2.sum())
    if total == 0:
        empty = np.zeros(0, dtype=int)
        pat.gii_indptr = np.zeros(n_i + 1, dtype=int)
        pat.gii_indices = empty
        pat.gib_indptr = np.zeros(n_i + 1, dtype=int)
        pat.gib_indices = empty
        for name in (
            "pair_ii_dest pair_ii_a pair_ii_b pair_ii_row pair_ib_dest pair_ib_a "
            "pair_ib_b pair_ib_row pair_bb_dest pair_bb_a pair_bb_b pair_bb_row "
            "bi_dest bi_pos bi_row bb_dest bb_pos bb_row"
        ).split():
            setattr(pat, name, empty)
        return

    rowid = np.repeat(np.arange(len(sizes)), s2)
    base = np.repeat(pat.slot_ptr[:-1], s2)
    offsets = np.concatenate([[0], np.cumsum(s2)[:-1]])
    within = np.arange(total) - np.repeat(offsets, s2)
    srow = np.repeat(sizes, s2)
    pa = base + within // srow
    pb = base + within % srow
    va = pat.slot_var[pa]
    vb = pat.slot_var[pb]
    a_int = va < n_i
    b_int = vb < n_i

    m_ii = a_int & b_int
    m_ib = a_int & ~b_int
    m_bb = ~a_int & ~b_int

    codes_ii = va[m_ii] * max(n_i, 1) + vb[m_ii]
    uniq, pat.gii_indptr, pat.gii_indices = _csr_pattern_from_codes(codes_ii, n_i, n_i)
    pat.pair_ii_dest = np.searchsorted(uniq, codes_ii)
    pat.pair_ii_a = pa[m_ii]
    pat.pair_ii_b = pb[m_ii]
    pat.pair_ii_row = rowid[m_ii]

    codes_ib = va[m_ib] * max(n_b, 1) + (vb[m_ib] - n_i)
    uniq, pat.gib_indptr, pat.gib_indices = _csr_pattern_from_codes(codes_ib, n_i, n_b)
    pat.pair_ib_dest = np.searchsorted(uniq, codes_ib)
    pat.pair_ib_a = pa[m_ib]
    pat.pair_ib_b = pb[m_ib]
    pat.pair_ib_row = rowid[m_ib]

    pat.pair_bb_dest = (va[m_bb] - n_i) * n_b + (vb[m_bb] - n_i)
    pat.pair_bb_a = pa[m_bb]
    pat.pair_bb_b = pb[m_bb]
    pat.pair_bb_row = rowid[m_bb]

    srow_of_slot = np.repeat(np.arange(len(sizes)), sizes)
    interior_slot = pat.slot_var < n_i
    pat.bi_pos = np.flatnonzero(interior_slot)
    pat.bi_dest = pat.slot_var[pat.bi_pos]
    pat.bi_row = srow_of_slot[pat.bi_pos]
    pat.bb_pos = np.flatnonzero(~interior_slot)
    pat.bb_dest = pat.slot_var[pat.bb_pos] - n_i
    pat.bb_row = srow_of_slot[pat.bb_pos]


# ---------------------------------------------------------------------------
# State scatter
# ---------------------------------------------------------------------------

def _scatter_local_state(vmap: AreaVariableMap, net, x_i, x_b):
    """Expand (x_i, x_b) into full-length (va, vm); unreferenced buses are NaN
    so any closure violation poisons the result instead of passing silently."""
    va = np.full(net.n_bus, np.nan)
    vm = np.full(net.n_bus, np.nan)
    na = len(vmap.interior_angle_buses)
    va[vmap.interior_angle_buses] = x_i[:na]
    vm[vmap.interior_mag_buses] = x_i[na:]
    lb_ang = vmap.local_boundary_angle_buses()
    nb_a = len(lb_ang)
    va[lb_ang] = x_b[:nb_a]
    vm[vmap.local_boundary_buses] = x_b[nb_a:]
    va[vmap.slack] = net.buses[vmap.slack].va_true  # pinned reference angle
    return va, vm


# ---------------------------------------------------------------------------
# Fused path
# ---------------------------------------------------------------------------

def _eval_blocks(pat: AssemblyPattern, ms, va, vm):
    """Residual vector and flat gradient values for the area's rows."""
    n_rows = len(pat.row_ids)
    h = np.zeros(n_rows)
    g_flat = np.zeros(len(pat.slot_var))
    for blk in pat.blocks:
        if isinstance(blk, _VmBlock):
            h[blk.rpos] = vm[blk.bus]
            g_flat[blk.vm_pos] = 1.0
        elif isinstance(blk, _InjBlock):
            vi = vm[blk.bus]
            vie = vi[blk.e_src]
            th = va[blk.bus[blk.e_src]] - va[blk.e_j]
            vj = vm[blk.e_j]
            cosd, sind = np.cos(th), np.sin(th)
            tp = vj * (blk.e_g * cosd + blk.e_b * sind)
            tq = vj * (blk.e_g * sind - blk.e_b * cosd)
            nr = len(blk.bus)
            sum_p = np.bincount(blk.e_src, weights=tp, minlength=nr)
            sum_q = np.bincount(blk.e_src, weights=tq, minlength=nr)
            if blk.reactive:
                h[blk.rpos] = vi * (-vi * blk.b_ii_diag + sum_q)
                e_th_val = -vie * tp
                e_vm_val = vie * (blk.e_g * sind - blk.e_b * cosd)
                d_th_val = vi * sum_p
                d_vm_val = -2.0 * vi * blk.b_ii_diag + sum_q
            else:
                h[blk.rpos] = vi * (vi * blk.g_ii_diag + sum_p)
                e_th_val = vie * tq
                e_vm_val = vie * (blk.e_g * cosd + blk.e_b * sind)
                d_th_val = -vi * sum_q
                d_vm_val = 2.0 * vi * blk.g_ii_diag + sum_p
            ok = blk.e_th_pos >= 0
            g_flat[blk.e_th_pos[ok]] = e_th_val[ok]
            g_flat[blk.e_vm_pos] = e_vm_val
            ok = blk.d_th_pos >= 0
            g_flat[blk.d_th_pos[ok]] = d_th_val[ok]
            g_flat[blk.d_vm_pos] = d_vm_val
        else:
            v_o = vm[blk.own] * np.exp(1j * va[blk.own])
            v_u = vm[blk.oth] * np.exp(1j * va[blk.oth])
            i_o = blk.y_own * v_o + blk.y_oth * v_u
            s = v_o * np.conj(i_o)
            ds_tho = 1j * (s - vm[blk.own] ** 2 * np.conj(blk.y_own))
            ds_thu = -1j * v_o * np.conj(blk.y_oth * v_u)
            ds_vmo = s / vm[blk.own] + vm[blk.own] * np.conj(blk.y_own)
            ds_vmu = v_o * np.conj(blk.y_oth) * np.exp(-1j * va[blk.oth])
            part = (lambda c: c.imag) if blk.reactive else (lambda c: c.real)
            h[blk.rpos] = part(s)
            ok = blk.th_o_pos >= 0
            g_flat[blk.th_o_pos[ok]] = part(ds_tho)[ok]
            ok = blk.th_u_pos >= 0
            g_flat[blk.th_u_pos[ok]] = part(ds_thu)[ok]
            g_flat[blk.vm_o_pos] = part(ds_vmo)
            g_flat[blk.vm_u_pos] = part(ds_vmu)
    resid = ms.z[pat.row_ids] - h
    return resid, g_flat


def fused_accumulate(
    vmap: AreaVariableMap, ms: MeasurementSet, x_i, x_b, pattern: AssemblyPattern = None
) -> AreaNormalBlocks:
    """Assemble the area blocks without materializing the Jacobian.

    Per active row: one residual + template-gradient evaluation, then
    weighted products w*g_a*g_b scatter-added into the static patterns and
    w*r*g_a into the right-hand sides.  Masked rows carry weight 0.
    """
    pat = pattern if pattern is not None else build_patterns(vmap, ms)
    net = ms.net
    va, vm = _scatter_local_state(vmap, net, np.asarray(x_i, float), np.asarray(x_b, float))
    resid, g_flat = _eval_blocks(pat, ms, va, vm)
    w = ms.weight[pat.row_ids]
    n_i, n_b = pat.n_interior, pat.n_boundary

    data_ii = np.bincount(
        pat.pair_ii_dest,
        weights=g_flat[pat.pair_ii_a] * (w[pat.pair_ii_row] * g_flat[pat.pair_ii_b]),
        minlength=len(pat.gii_indices),
    )
    data_ib = np.bincount(
        pat.pair_ib_dest,
        weights=g_flat[pat.pair_ib_a] * (w[pat.pair_ib_row] * g_flat[pat.pair_ib_b]),
        minlength=len(pat.gib_indices),
    )
    g_bb = np.bincount(
        pat.pair_bb_dest,
        weights=g_flat[pat.pair_bb_a] * (w[pat.pair_bb_row] * g_flat[pat.pair_bb_b]),
        minlength=n_b * n_b,
    ).reshape(n_b, n_b)

    wr = w * resid
    b_i = np.bincount(pat.bi_dest, weights=wr[pat.bi_row] * g_flat[pat.bi_pos], minlength=n_i)
    b_b = np.bincount(pat.bb_dest, weights=wr[pat.bb_row] * g_flat[pat.bb_pos], minlength=n_b)

    g_ii = sp.csr_matrix((data_ii, pat.gii_indices, pat.gii_indptr), shape=(n_i, n_i))
    g_ib = sp.csr_matrix((data_ib, pat.gib_indices, pat.gib_indptr), shape=(n_i, n_b))
    return AreaNormalBlocks(g_ii=g_ii, g_ib=g_ib, g_bb=g_bb, b_i=b_i, b_b=b_b)


# ---------------------------------------------------------------------------
# Explicit oracle path
# ---------------------------------------------------------------------------

def explicit_assemble(
    vmap: AreaVariableMap, ms: MeasurementSet, x_i, x_b, pattern: AssemblyPattern = None
):
    """Materialize H and form the blocks by sparse triple products.

    Shares the template evaluation layer with the fused path (formula
    correctness is covered separately by the finite-difference oracle), so
    any disagreement with ``fused_accumulate`` isolates the accumulation
    bookkeeping itself.
    """
    net = ms.net
    pat = pattern if pattern is not None else build_patterns(vmap, ms)
    va, vm = _scatter_local_state(vmap, net, np.asarray(x_i, float), np.asarray(x_b, float))
    resid, g_flat = _eval_blocks(pat, ms, va, vm)
    row_ids = pat.row_ids
    n_i, n_b = vmap.n_interior, vmap.n_boundary
    n_loc = n_i + n_b

    sizes = np.diff(pat.slot_ptr)
    weights = ms.weight[row_ids]
    triplets = JacobianTriplets(
        rows=np.repeat(np.arange(len(row_ids)), sizes),
        cols=pat.slot_var.copy(),
        vals=g_flat,
        weights=weights,
        residuals=resid,
        n_rows=len(row_ids),
        n_cols=n_loc,
    )
    h_mat = triplets.to_csr()
    hw = h_mat.multiply(weights[:, None]).tocsr()
    g_full = (h_mat.T @ hw).tocsr()
    g_full.sort_indices()
    b_full = h_mat.T @ (weights * resid)

    g_ii = g_full[:n_i, :n_i].tocsr()
    g_ib = g_full[:n_i, n_i:].tocsr()
    g_bb = g_full[n_i:, n_i:].toarray()
    blocks = AreaNormalBlocks(
        g_ii=g_ii, g_ib=g_ib, g_bb=g_bb, b_i=b_full[:n_i], b_b=b_full[n_i:]
    )
    return triplets, blocks
