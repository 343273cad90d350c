"""Shared fixtures: case files, a 4-bus path, random connected networks."""

import os

import numpy as np
import pytest

from gridse.network import Branch, Bus, BusBranchNetwork

CASE_DIR = os.path.join(os.path.dirname(__file__), "..", "cases")


@pytest.fixture(scope="session")
def case14_path():
    return os.path.join(CASE_DIR, "ieee14.m")


@pytest.fixture(scope="session")
def case118_path():
    return os.path.join(CASE_DIR, "ieee118.m")


@pytest.fixture(scope="session")
def net14(case14_path):
    from gridse.network import load_case

    return load_case(case14_path)


@pytest.fixture(scope="session")
def net118(case118_path):
    from gridse.network import load_case

    return load_case(case118_path)


def make_path4(slack_pos=0):
    """4-bus path with external ids 1-2-3-4 and a mild operating point."""
    buses = [
        Bus(id=i + 1, is_slack=(i == slack_pos), vm_true=1.0 + 0.01 * i, va_true=-0.02 * i)
        for i in range(4)
    ]
    branches = [Branch(from_bus=i, to_bus=i + 1, r=0.01, x=0.1, b_charging=0.02) for i in range(3)]
    return BusBranchNetwork.from_components(buses, branches)


@pytest.fixture
def path4():
    return make_path4()


def random_network(n_bus, seed, extra_frac=0.45):
    """Random connected network: random tree plus chords, mild operating point.

    Bus 0 is the slack with va_true = 0; impedances and the voltage profile
    are kept in ranges typical of transmission cases so Gauss-Newton from a
    flat start stays well-conditioned.
    """
    rng = np.random.default_rng(seed)
    edges = []
    seen = set()
    # mostly-local tree (transmission grids are near-planar, not expanders)
    for i in range(1, n_bus):
        p = max(0, i - 1 - int(rng.integers(0, 4)))
        edges.append((p, i))
        seen.add((p, i))
    want = n_bus - 1 + int(extra_frac * n_bus)
    while len(edges) < want:
        a = int(rng.integers(n_bus))
        b = a + int(rng.integers(2, 12))
        if b >= n_bus:
            continue
        key = (a, b)
        if key in seen:
            continue
        seen.add(key)
        edges.append(key)

    va = rng.uniform(-0.12, 0.12, size=n_bus)
    va[0] = 0.0
    vm = rng.uniform(0.96, 1.05, size=n_bus)
    buses = [
        Bus(
            id=i + 1,
            is_slack=(i == 0),
            gs=float(rng.uniform(0, 0.02)) if rng.random() < 0.1 else 0.0,
            bs=float(rng.uniform(-0.1, 0.15)) if rng.random() < 0.1 else 0.0,
            vm_true=float(vm[i]),
            va_true=float(va[i]),
        )
        for i in range(n_bus)
    ]
    branches = []
    for (f, t) in edges:
        x = float(rng.uniform(0.02, 0.2))
        branches.append(
            Branch(
                from_bus=f,
                to_bus=t,
                r=float(x * rng.uniform(0.1, 0.4)),
                x=x,
                b_charging=float(rng.uniform(0.0, 0.04)),
                tap=float(rng.uniform(0.95, 1.05)) if rng.random() < 0.1 else 1.0,
                shift=float(rng.uniform(-0.05, 0.05)) if rng.random() < 0.05 else 0.0,
            )
        )
    return BusBranchNetwork.from_components(buses, branches)


def random_state(net, seed, spread=0.15):
    """Random evaluation point near nominal voltage."""
    from gridse.measurement import StateVector

    rng = np.random.default_rng(seed)
    va = rng.uniform(-spread, spread, size=net.n_bus)
    va[net.slack] = net.buses[net.slack].va_true
    vm = rng.uniform(0.9, 1.1, size=net.n_bus)
    return StateVector(va=va, vm=vm)
