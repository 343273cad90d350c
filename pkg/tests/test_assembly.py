"""Fused accumulation vs explicit-Jacobian oracle, pattern properties."""

import numpy as np
import pytest

from gridse.assembly import (
    area_row_ids,
    build_patterns,
    explicit_assemble,
    fused_accumulate,
)
from gridse.measurement import (
    MeasurementConfig,
    MeasurementType,
    StateVector,
    apply_mask,
    generate_measurements,
    make_measurement_set,
)
from gridse.network import Bus, BusBranchNetwork
from gridse.partition import build_variable_maps, load_partition, partition_network

from conftest import make_path4, random_network, random_state

FUSED_TOL = 5e-13


def single_area(net):
    part = partition_network(net, 1, seed=0)
    bord, maps = build_variable_maps(net, part)
    return maps[0]


def all_blocks(b):
    return {
        "g_ii": b.g_ii.toarray(),
        "g_ib": b.g_ib.toarray(),
        "g_bb": b.g_bb,
        "b_i": b.b_i,
        "b_b": b.b_b,
    }


def assert_blocks_close(a, b, tol=FUSED_TOL):
    da, db = all_blocks(a), all_blocks(b)
    for key in da:
        assert da[key].shape == db[key].shape, key
        bound = tol * (1.0 + np.abs(db[key]))
        assert np.all(np.abs(da[key] - db[key]) <= bound), (
            key,
            np.max(np.abs(da[key] - db[key]) / (1.0 + np.abs(db[key]))),
        )


def area_states(net, vmap, state):
    x_i = vmap.gather_interior(state.va, state.vm)
    lb_ang = vmap.local_boundary_angle_buses()
    x_b = np.concatenate([state.va[lb_ang], state.vm[vmap.local_boundary_buses]])
    return x_i, x_b


# ---------------------------------------------------------------------------
# hand examples
# ---------------------------------------------------------------------------

def test_single_interior_vm_row():
    net = BusBranchNetwork.from_components([Bus(id=1, is_slack=True)], [])
    ms = make_measurement_set(net, [int(MeasurementType.VM)], [0], z=[1.2], sigma=[0.5])
    vmap = single_area(net)
    st = StateVector(va=np.zeros(1), vm=np.ones(1))
    x_i, x_b = area_states(net, vmap, st)
    blocks = fused_accumulate(vmap, ms, x_i, x_b)
    assert blocks.g_ii.toarray() == pytest.approx(np.array([[4.0]]))
    assert blocks.b_i == pytest.approx(np.array([0.8]))
    assert blocks.g_ib.shape == (1, 0)
    assert blocks.g_bb.shape == (0, 0)


def test_all_rows_masked_gives_zero_blocks(path4):
    ms = generate_measurements(path4)
    masked = apply_mask(ms, np.ones(ms.m, dtype=bool))
    vmap = single_area(path4)
    st = random_state(path4, 1)
    x_i, x_b = area_states(path4, vmap, st)
    blocks = fused_accumulate(vmap, masked, x_i, x_b)
    for key, arr in all_blocks(blocks).items():
        assert np.all(arr == 0.0), key


def test_vm_only_identity_on_magnitude_block(path4):
    rows = [(int(MeasurementType.VM), b) for b in range(path4.n_bus)]
    ms = make_measurement_set(
        path4,
        [t for t, _ in rows],
        [b for _, b in rows],
        z=np.ones(len(rows)),
        sigma=np.zeros(len(rows)),  # sigma 0 -> unit weight
    )
    vmap = single_area(path4)
    st = StateVector.flat_start(path4)
    x_i, x_b = area_states(path4, vmap, st)
    blocks = fused_accumulate(vmap, ms, x_i, x_b)
    g = blocks.g_ii.toarray()
    n_ang = len(vmap.interior_angle_buses)
    assert np.allclose(g[n_ang:, n_ang:], np.eye(path4.n_bus), atol=0)
    assert np.all(g[:n_ang, :] == 0.0)


def test_noiseless_rhs_vanishes_at_truth(path4):
    ms = generate_measurements(path4, MeasurementConfig(sigma_vm=0.0, sigma_power=0.0))
    vmap = single_area(path4)
    st = StateVector.truth(path4)
    x_i, x_b = area_states(path4, vmap, st)
    blocks = fused_accumulate(vmap, ms, x_i, x_b)
    assert np.max(np.abs(blocks.b_i)) < 1e-12


def test_centralized_dimensions_ieee14(net14):
    ms = generate_measurements(net14)
    vmap = single_area(net14)
    st = StateVector.flat_start(net14)
    x_i, x_b = area_states(net14, vmap, st)
    _, blocks = explicit_assemble(vmap, ms, x_i, x_b)
    assert blocks.g_ii.shape == (27, 27)  # 2*14 - 1 slack angle


# ---------------------------------------------------------------------------
# fused vs explicit oracle
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(6))
def test_fused_matches_explicit_random(seed):
    rng = np.random.default_rng(seed)
    net = random_network(int(rng.integers(8, 40)), seed=200 + seed)
    k = int(rng.integers(1, 5))
    part = partition_network(net, min(k, net.n_bus), seed=seed)
    bord, maps = build_variable_maps(net, part)
    ms = generate_measurements(net, MeasurementConfig(seed=seed))
    if seed % 2:
        ms = apply_mask(ms, MeasurementType.QT)
    st = random_state(net, 300 + seed)
    for vmap in maps:
        x_i, x_b = area_states(net, vmap, st)
        fused = fused_accumulate(vmap, ms, x_i, x_b)
        _, explicit = explicit_assemble(vmap, ms, x_i, x_b)
        assert_blocks_close(fused, explicit)


def test_pattern_reuse_matches_fresh(net14):
    ms = generate_measurements(net14)
    part = partition_network(net14, 2, seed=0)
    bord, maps = build_variable_maps(net14, part)
    pat = build_patterns(maps[0], ms)
    st = random_state(net14, 4)
    x_i, x_b = area_states(net14, maps[0], st)
    a = fused_accumulate(maps[0], ms, x_i, x_b, pattern=pat)
    b = fused_accumulate(maps[0], ms, x_i, x_b)
    assert np.array_equal(a.g_ii.toarray(), b.g_ii.toarray())
    assert np.array_equal(a.b_i, b.b_i)


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------

def test_pattern_superset_of_numeric_support(net14):
    ms = generate_measurements(net14)
    part = partition_network(net14, 3, seed=1)
    bord, maps = build_variable_maps(net14, part)
    for vmap in maps:
        pat = build_patterns(vmap, ms)
        pattern_set = set()
        for r in range(pat.n_interior):
            for p in range(pat.gii_indptr[r], pat.gii_indptr[r + 1]):
                pattern_set.add((r, int(pat.gii_indices[p])))
        for seed in range(10):
            st = random_state(net14, 500 + seed)
            x_i, x_b = area_states(net14, vmap, st)
            g = fused_accumulate(vmap, ms, x_i, x_b, pattern=pat).g_ii.tocoo()
            for r, c, v in zip(g.row, g.col, g.data):
                if v != 0.0:
                    assert (int(r), int(c)) in pattern_set


def test_assembled_blocks_symmetric(net118):
    ms = generate_measurements(net118)
    part = partition_network(net118, 4, seed=0)
    bord, maps = build_variable_maps(net118, part)
    st = random_state(net118, 11)
    for vmap in maps:
        x_i, x_b = area_states(net118, vmap, st)
        blocks = fused_accumulate(vmap, ms, x_i, x_b)
        gii = blocks.g_ii.toarray()
        assert np.max(np.abs(gii - gii.T)) <= 1e-14 * (1.0 + np.max(np.abs(gii)))
        assert np.max(np.abs(blocks.g_bb - blocks.g_bb.T)) <= 1e-14 * (
            1.0 + np.max(np.abs(blocks.g_bb))
        )


def test_masked_rows_contribute_exactly_like_deleted(net14):
    ms = generate_measurements(net14)
    vmap = single_area(net14)
    st = random_state(net14, 21)
    x_i, x_b = area_states(net14, vmap, st)
    masked = apply_mask(ms, MeasurementType.PF)
    keep = ms.mtype != int(MeasurementType.PF)
    trimmed = make_measurement_set(
        net14, ms.mtype[keep], ms.target[keep], ms.z[keep], ms.sigma[keep]
    )
    a = fused_accumulate(vmap, masked, x_i, x_b)
    b = fused_accumulate(vmap, trimmed, x_i, x_b)
    for key in ("g_ii",):
        assert np.max(np.abs(a.g_ii.toarray() - b.g_ii.toarray())) <= 1e-14 * (
            1.0 + np.max(np.abs(b.g_ii.toarray()))
        )
    assert np.max(np.abs(a.b_i - b.b_i)) <= 1e-14 * (1.0 + np.max(np.abs(b.b_i)))


def test_additivity_of_disjoint_subsets(net14):
    """Prefix/suffix split: union equals the sum of parts within float-sum noise;
    slot-disjoint families (bus Vm vs rest) agree exactly."""
    ms = generate_measurements(net14)
    vmap = single_area(net14)
    st = random_state(net14, 31)
    x_i, x_b = area_states(net14, vmap, st)

    vm_only = apply_mask(ms, lambda t, tg: t != MeasurementType.VM)
    rest = apply_mask(ms, MeasurementType.VM)
    union = fused_accumulate(vmap, ms, x_i, x_b)
    a = fused_accumulate(vmap, vm_only, x_i, x_b)
    b = fused_accumulate(vmap, rest, x_i, x_b)
    # Vm rows touch only magnitude diagonals; those slots get no flow/injection
    # contribution mixing within a bin, but union bins still interleave, so
    # compare at float-sum tolerance and exactly where only one side writes.
    s = a.g_ii + b.g_ii
    diff = np.abs((s - union.g_ii).toarray())
    assert np.max(diff) <= 1e-12 * (1.0 + np.max(np.abs(union.g_ii.toarray())))
    only_vm_slots = (b.g_ii.toarray() == 0.0) & (a.g_ii.toarray() != 0.0)
    assert np.array_equal(a.g_ii.toarray()[only_vm_slots], union.g_ii.toarray()[only_vm_slots])


def test_fused_deterministic(net118):
    ms = generate_measurements(net118)
    part = partition_network(net118, 3, seed=0)
    bord, maps = build_variable_maps(net118, part)
    st = random_state(net118, 7)
    x_i, x_b = area_states(net118, maps[1], st)
    a = fused_accumulate(maps[1], ms, x_i, x_b)
    b = fused_accumulate(maps[1], ms, x_i, x_b)
    assert np.array_equal(a.g_ii.data, b.g_ii.data)
    assert np.array_equal(a.g_bb, b.g_bb)
    assert np.array_equal(a.b_i, b.b_i)


def test_template_evaluation_matches_scalar_gradients(net118):
    """The vectorized template evaluation agrees with the per-row reference
    formulas (which are themselves checked against finite differences)."""
    from gridse.assembly import _eval_blocks, _scatter_local_state, build_patterns
    from gridse.measurement import eval_h, eval_row_gradient, generate_measurements

    ms = generate_measurements(net118)
    part = partition_network(net118, 3, seed=0)
    bord, maps = build_variable_maps(net118, part)
    st = random_state(net118, 17)
    for vmap in maps:
        x_i, x_b = area_states(net118, vmap, st)
        pat = build_patterns(vmap, ms)
        va, vm = _scatter_local_state(vmap, net118, x_i, x_b)
        resid, g_flat = _eval_blocks(pat, ms, va, vm)
        ref_state = StateVector(va=va, vm=vm)
        for r, i in enumerate(pat.row_ids):
            t = MeasurementType(int(ms.mtype[i]))
            tg = int(ms.target[i])
            ref = eval_row_gradient(net118, t, tg, ref_state)
            got = g_flat[pat.slot_ptr[r]:pat.slot_ptr[r + 1]]
            assert len(ref) == len(got)
            for (_, rv), gv in zip(ref, got):
                assert abs(gv - rv) <= 1e-12 * (1.0 + abs(rv))
            h_ref = eval_h(net118, t, tg, ref_state)
            assert abs((ms.z[i] - resid[r]) - h_ref) <= 1e-12 * (1.0 + abs(h_ref))


def test_jacobian_triplets_shape(net14):
    ms = generate_measurements(net14)
    vmap = single_area(net14)
    st = random_state(net14, 2)
    x_i, x_b = area_states(net14, vmap, st)
    tri, _ = explicit_assemble(vmap, ms, x_i, x_b)
    assert tri.n_rows == ms.m
    assert tri.n_cols == 27
    # per-row nonzero count equals the template size
    from gridse.measurement import row_template

    counts = np.bincount(tri.rows, minlength=tri.n_rows)
    for r, i in enumerate(area_row_ids(vmap, ms)):
        tmpl = row_template(net14, MeasurementType(int(ms.mtype[i])), int(ms.target[i]))
        assert counts[r] == len(tmpl)
