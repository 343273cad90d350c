"""Typed measurement model: synthesis, residual/derivative evaluation, masking.

Seven measurement types with fixed per-row sparsity templates:

* ``VM``     voltage magnitude at a bus (1 variable)
* ``PINJ``/``QINJ``  bus power injection (self + neighbor angles/magnitudes)
* ``PF``/``PT``/``QF``/``QT``  branch power flow at the from/to end (4 variables)

Slack-angle slots are excluded from every template.  Masking zeroes row
weights in place of structural edits, so templates never change shape.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .network import BusBranchNetwork


class MeasurementType(enum.IntEnum):
    VM = 0
    PINJ = 1
    QINJ = 2
    PF = 3
    PT = 4
    QF = 5
    QT = 6

    @property
    def is_branch(self):
        return self in _FLOW_TYPES

    @property
    def label(self):
        return _LABELS[self]


_FLOW_TYPES = (
    MeasurementType.PF,
    MeasurementType.PT,
    MeasurementType.QF,
    MeasurementType.QT,
)
_LABELS = {
    MeasurementType.VM: "vm",
    MeasurementType.PINJ: "pinj",
    MeasurementType.QINJ: "qinj",
    MeasurementType.PF: "pf",
    MeasurementType.PT: "pt",
    MeasurementType.QF: "qf",
    MeasurementType.QT: "qt",
}
_BY_LABEL = {v: k for k, v in _LABELS.items()}


def type_from_label(label: str) -> MeasurementType:
    try:
        return _BY_LABEL[label.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown measurement type {label!r}") from None


@dataclass
class StateVector:
    """Bus voltage state; the slack angle is pinned, never an unknown."""

    va: np.ndarray  # radians, full length n_bus
    vm: np.ndarray  # p.u.

    def copy(self):
        return StateVector(self.va.copy(), self.vm.copy())

    @staticmethod
    def flat_start(net: BusBranchNetwork) -> "StateVector":
        va = np.zeros(net.n_bus)
        va[net.slack] = net.buses[net.slack].va_true
        return StateVector(va=va, vm=np.ones(net.n_bus))

    @staticmethod
    def truth(net: BusBranchNetwork) -> "StateVector":
        va, vm = net.true_state()
        return StateVector(va=va, vm=vm)


@dataclass(frozen=True)
class MeasurementSet:
    """Structure-of-arrays measurement records over a fixed network.

    ``weight`` is the effective WLS weight: 1/sigma^2 for active rows
    (1.0 when sigma == 0) and exactly 0.0 for masked rows.  ``owner_bus``
    is the bus whose area owns the row: the target bus for bus quantities,
    the from-side bus for branch flows.
    """

    net: BusBranchNetwork
    mtype: np.ndarray  # MeasurementType codes
    target: np.ndarray  # bus index or branch index
    z: np.ndarray
    sigma: np.ndarray
    weight: np.ndarray
    active: np.ndarray
    owner_bus: np.ndarray

    @property
    def m(self):
        return len(self.z)

    def rows_of_type(self, t):
        return np.flatnonzero(self.mtype == int(t))

    def owner_area(self, part):
        return part.area_of_bus[self.owner_bus]

    def _replace_weights(self, weight, active):
        return replace(self, weight=weight, active=active)


def _base_weight(sigma):
    sigma = np.asarray(sigma, dtype=float)
    w = np.ones_like(sigma)
    nz = sigma > 0
    w[nz] = 1.0 / sigma[nz] ** 2
    return w


def _owner_bus(net, mtype, target):
    owner = np.empty(len(mtype), dtype=int)
    for i, (t, tg) in enumerate(zip(mtype, target)):
        owner[i] = net.branches[tg].from_bus if MeasurementType(t).is_branch else tg
    return owner


def make_measurement_set(net, mtype, target, z, sigma, active=None) -> MeasurementSet:
    mtype = np.asarray(mtype, dtype=np.int64)
    target = np.asarray(target, dtype=np.int64)
    z = np.asarray(z, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if active is None:
        active = np.ones(len(z), dtype=bool)
    else:
        active = np.asarray(active, dtype=bool)
    weight = np.where(active, _base_weight(sigma), 0.0)
    return MeasurementSet(
        net=net,
        mtype=mtype,
        target=target,
        z=z,
        sigma=sigma,
        weight=weight,
        active=active,
        owner_bus=_owner_bus(net, mtype, target),
    )


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasurementConfig:
    types: tuple = tuple(MeasurementType)
    sigma_vm: float = 0.01
    sigma_power: float = 0.02
    seed: int = 0


def generate_measurements(net: BusBranchNetwork, config: MeasurementConfig = None) -> MeasurementSet:
    """Full-coverage noisy measurements from the network's ground truth.

    Vm at every bus, P/Q injections at every bus, P/Q flows at both branch
    ends: 3*n_bus + 4*n_branch rows under the default type list.  Gaussian
    noise is drawn row-by-row in canonical order, so a seed fixes the set.
    """
    config = config or MeasurementConfig()
    truth = StateVector.truth(net)
    mtype, target, sigma = [], [], []
    for t in sorted(config.types):
        t = MeasurementType(t)
        n_targets = net.n_branch if t.is_branch else net.n_bus
        s = config.sigma_vm if t == MeasurementType.VM else config.sigma_power
        mtype += [int(t)] * n_targets
        target += list(range(n_targets))
        sigma += [s] * n_targets
    mtype = np.array(mtype, dtype=np.int64)
    target = np.array(target, dtype=np.int64)
    sigma = np.array(sigma, dtype=float)

    skeleton = make_measurement_set(net, mtype, target, np.zeros(len(mtype)), sigma)
    h_true = eval_h_all(skeleton, truth)
    rng = np.random.default_rng(config.seed)
    z = h_true + sigma * rng.standard_normal(len(h_true))
    return make_measurement_set(net, mtype, target, z, sigma)


# ---------------------------------------------------------------------------
# Per-row evaluation (reference implementation)
# ---------------------------------------------------------------------------

def _flow_row_params(net, mtype, branch):
    """(own bus, other bus, y_own, y_oth) for the measured branch end."""
    br = net.branches[branch]
    y_ff, y_ft, y_tf, y_tt = br.two_port()
    if mtype in (MeasurementType.PF, MeasurementType.QF):
        return br.from_bus, br.to_bus, y_ff, y_ft
    return br.to_bus, br.from_bus, y_tt, y_tf


def eval_h(net: BusBranchNetwork, mtype: MeasurementType, target: int, state: StateVector) -> float:
    """Measurement function value h(x) for a single row, in p.u."""
    va, vm = state.va, state.vm
    mtype = MeasurementType(mtype)
    if mtype == MeasurementType.VM:
        return float(vm[target])
    if mtype in (MeasurementType.PINJ, MeasurementType.QINJ):
        i = target
        row = net.ybus.getrow(i)
        acc = 0.0
        for j, y in zip(row.indices, row.data):
            g, b = y.real, y.imag
            th = va[i] - va[j]
            if mtype == MeasurementType.PINJ:
                acc += vm[j] * (g * math.cos(th) + b * math.sin(th))
            else:
                acc += vm[j] * (g * math.sin(th) - b * math.cos(th))
        return float(vm[i] * acc)
    o, u, y_own, y_oth = _flow_row_params(net, mtype, target)
    v_o = vm[o] * np.exp(1j * va[o])
    v_u = vm[u] * np.exp(1j * va[u])
    s = v_o * np.conj(y_own * v_o + y_oth * v_u)
    return float(s.real if mtype in (MeasurementType.PF, MeasurementType.PT) else s.imag)


def row_template(net: BusBranchNetwork, mtype: MeasurementType, target: int):
    """Fixed template of a row: ordered (bus, quant) slots, slack angle omitted."""
    slack = net.slack
    mtype = MeasurementType(mtype)
    if mtype == MeasurementType.VM:
        return [(int(target), "vm")]
    if mtype in (MeasurementType.PINJ, MeasurementType.QINJ):
        nbrs = [int(j) for j in net.ybus.getrow(target).indices]  # sorted, includes target
        return [(j, "va") for j in nbrs if j != slack] + [(j, "vm") for j in nbrs]
    o, u, _, _ = _flow_row_params(net, mtype, target)
    br = net.branches[target]
    f, t = br.from_bus, br.to_bus
    tmpl = [(b, "va") for b in (f, t) if b != slack] + [(f, "vm"), (t, "vm")]
    return tmpl


def eval_row_gradient(net, mtype, target, state):
    """Analytic gradient on the row's template slots: list of ((bus, quant), value)."""
    va, vm = state.va, state.vm
    slack = net.slack
    mtype = MeasurementType(mtype)

    if mtype == MeasurementType.VM:
        return [((int(target), "vm"), 1.0)]

    if mtype in (MeasurementType.PINJ, MeasurementType.QINJ):
        i = int(target)
        row = net.ybus.getrow(i)
        nbrs = [int(j) for j in row.indices]
        ydata = {int(j): y for j, y in zip(row.indices, row.data)}
        g_ii, b_ii = ydata[i].real, ydata[i].imag
        sum_p = 0.0  # sum over j != i of V_j (G cos + B sin)
        sum_q = 0.0
        for j in nbrs:
            if j == i:
                continue
            g, b = ydata[j].real, ydata[j].imag
            th = va[i] - va[j]
            sum_p += vm[j] * (g * math.cos(th) + b * math.sin(th))
            sum_q += vm[j] * (g * math.sin(th) - b * math.cos(th))
        out = []
        for j in nbrs:
            if j == slack:
                continue
            if j == i:
                val = -vm[i] * sum_q if mtype == MeasurementType.PINJ else vm[i] * sum_p
            else:
                g, b = ydata[j].real, ydata[j].imag
                th = va[i] - va[j]
                if mtype == MeasurementType.PINJ:
                    val = vm[i] * vm[j] * (g * math.sin(th) - b * math.cos(th))
                else:
                    val = -vm[i] * vm[j] * (g * math.cos(th) + b * math.sin(th))
            out.append(((j, "va"), float(val)))
        for j in nbrs:
            if j == i:
                if mtype == MeasurementType.PINJ:
                    val = 2.0 * vm[i] * g_ii + sum_p
                else:
                    val = -2.0 * vm[i] * b_ii + sum_q
            else:
                g, b = ydata[j].real, ydata[j].imag
                th = va[i] - va[j]
                if mtype == MeasurementType.PINJ:
                    val = vm[i] * (g * math.cos(th) + b * math.sin(th))
                else:
                    val = vm[i] * (g * math.sin(th) - b * math.cos(th))
            out.append(((j, "vm"), float(val)))
        return out

    o, u, y_own, y_oth = _flow_row_params(net, mtype, target)
    br = net.branches[int(target)]
    f, t = br.from_bus, br.to_bus
    v_o = vm[o] * np.exp(1j * va[o])
    v_u = vm[u] * np.exp(1j * va[u])
    i_o = y_own * v_o + y_oth * v_u
    s = v_o * np.conj(i_o)
    ds = {
        (o, "va"): 1j * (s - vm[o] ** 2 * np.conj(y_own)),
        (u, "va"): -1j * v_o * np.conj(y_oth * v_u),
        (o, "vm"): s / vm[o] + vm[o] * np.conj(y_own),
        (u, "vm"): v_o * np.conj(y_oth) * np.exp(-1j * va[u]),
    }
    take = (lambda c: c.real) if mtype in (MeasurementType.PF, MeasurementType.PT) else (lambda c: c.imag)
    out = []
    for b in (f, t):
        if b != slack:
            out.append(((b, "va"), float(take(ds[(b, "va")]))))
    for b in (f, t):
        out.append(((b, "vm"), float(take(ds[(b, "vm")]))))
    return out


# ---------------------------------------------------------------------------
# Vectorized evaluation over a whole set (used by the objective and the
# fused assembly path; must agree with eval_h row by row)
# ---------------------------------------------------------------------------

def eval_h_all(ms: MeasurementSet, state: StateVector) -> np.ndarray:
    """h(x) for every row, vectorized per type family."""
    net = ms.net
    va, vm = state.va, state.vm
    out = np.empty(ms.m)
    for t in MeasurementType:
        rows = ms.rows_of_type(t)
        if len(rows) == 0:
            continue
        tg = ms.target[rows]
        if t == MeasurementType.VM:
            out[rows] = vm[tg]
        elif t in (MeasurementType.PINJ, MeasurementType.QINJ):
            out[rows] = _inj_h(net, tg, va, vm, reactive=(t == MeasurementType.QINJ))
        else:
            o, u, y_own, y_oth = _flow_params_arrays(net, t, tg)
            v_o = vm[o] * np.exp(1j * va[o])
            v_u = vm[u] * np.exp(1j * va[u])
            s = v_o * np.conj(y_own * v_o + y_oth * v_u)
            out[rows] = s.real if t in (MeasurementType.PF, MeasurementType.PT) else s.imag
    return out


def _flow_params_arrays(net, mtype, branch_idx):
    f = np.array([net.branches[e].from_bus for e in branch_idx])
    t = np.array([net.branches[e].to_bus for e in branch_idx])
    tp = np.array([net.branches[e].two_port() for e in branch_idx], dtype=complex)
    if len(branch_idx) == 0:
        tp = tp.reshape(0, 4)
    y_ff, y_ft, y_tf, y_tt = tp[:, 0], tp[:, 1], tp[:, 2], tp[:, 3]
    if mtype in (MeasurementType.PF, MeasurementType.QF):
        return f, t, y_ff, y_ft
    return t, f, y_tt, y_tf


def _inj_h(net, buses, va, vm, reactive):
    y = net.ybus
    vals = np.empty(len(buses))
    for r, i in enumerate(buses):
        sl = slice(y.indptr[i], y.indptr[i + 1])
        j = y.indices[sl]
        g = y.data[sl].real
        b = y.data[sl].imag
        th = va[i] - va[j]
        if reactive:
            terms = vm[j] * (g * np.sin(th) - b * np.cos(th))
        else:
            terms = vm[j] * (g * np.cos(th) + b * np.sin(th))
        vals[r] = vm[i] * terms.sum()
    return vals


# ---------------------------------------------------------------------------
# Structured masking
# ---------------------------------------------------------------------------

def _match_rows(ms, family):
    if isinstance(family, MeasurementType):
        return ms.mtype == int(family)
    if callable(family):
        return np.array(
            [bool(family(MeasurementType(t), int(tg))) for t, tg in zip(ms.mtype, ms.target)]
        )
    return np.asarray(family, dtype=bool)


def apply_mask(ms: MeasurementSet, family) -> MeasurementSet:
    """Deactivate matching rows: active=False, effective weight 0.

    Row count, ordering and templates are untouched; only weights change.
    ``family`` is a MeasurementType, a (type, target) predicate, or a bool mask.
    """
    hit = _match_rows(ms, family)
    active = ms.active & ~hit
    weight = np.where(active, _base_weight(ms.sigma), 0.0)
    return ms._replace_weights(weight, active)


def clear_mask(ms: MeasurementSet, family=None) -> MeasurementSet:
    """Reactivate matching rows (all rows when family is None)."""
    hit = np.ones(ms.m, dtype=bool) if family is None else _match_rows(ms, family)
    active = ms.active | hit
    weight = np.where(active, _base_weight(ms.sigma), 0.0)
    return ms._replace_weights(weight, active)


# ---------------------------------------------------------------------------
# Measurement file I/O: JSON or CSV with columns (type, target, z, sigma, active)
# ---------------------------------------------------------------------------

def dump_measurements(ms: MeasurementSet, fmt: str = "json") -> str:
    rows = [
        {
            "type": MeasurementType(int(t)).label,
            "target": int(tg),
            "z": float(z),
            "sigma": float(s),
            "active": bool(a),
        }
        for t, tg, z, s, a in zip(ms.mtype, ms.target, ms.z, ms.sigma, ms.active)
    ]
    if fmt == "json":
        return json.dumps({"rows": rows}, indent=1) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["type", "target", "z", "sigma", "active"])
        w.writeheader()
        for r in rows:
            r["z"] = repr(r["z"])
            r["sigma"] = repr(r["sigma"])
            r["active"] = int(r["active"])
            w.writerow(r)
        return buf.getvalue()
    raise ValueError(f"unknown measurement format {fmt!r}")


def write_measurements(ms: MeasurementSet, path):
    fmt = "csv" if str(path).endswith(".csv") else "json"
    with open(path, "w", newline="") as fh:
        fh.write(dump_measurements(ms, fmt))


def load_measurements(net: BusBranchNetwork, path) -> MeasurementSet:
    text = open(path).read()
    if str(path).endswith(".csv"):
        rows = list(csv.DictReader(io.StringIO(text)))
    else:
        rows = json.loads(text)["rows"]
    mtype = [int(type_from_label(r["type"])) for r in rows]
    target = [int(r["target"]) for r in rows]
    z = [float(r["z"]) for r in rows]
    sigma = [float(r["sigma"]) for r in rows]
    active = [bool(int(r["active"])) if not isinstance(r["active"], bool) else r["active"] for r in rows]
    for t, tg in zip(mtype, target):
        limit = net.n_branch if MeasurementType(t).is_branch else net.n_bus
        if not 0 <= tg < limit:
            raise ValueError(f"measurement target {tg} out of range for {MeasurementType(t).label}")
    return make_measurement_set(net, mtype, target, z, sigma, active)
