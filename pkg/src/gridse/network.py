"""Bus-branch network model: case parsing and nodal admittance construction.

Supports a MATPOWER ``.m`` subset (matrix literals only) and a native JSON
schema.  Internally buses are re-indexed to contiguous 0-based positions in
case-file order; external ids are kept in a lookup map.
"""

from __future__ import annotations

import cmath
import json
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

MATPOWER_FORMAT = "matpower-m"
NATIVE_JSON_FORMAT = "native-json"


class CaseError(ValueError):
    """Case text failed to parse or validate."""

    def __init__(self, message, line=None, column=None):
        if line is not None:
            loc = f"line {line}" if column is None else f"line {line}, column {column}"
            message = f"{message} ({loc})"
        super().__init__(message)
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Bus:
    """Single bus with its ground-truth operating point.

    ``vm_true``/``va_true`` hold the solved voltage embedded in the case file;
    they are the reference state for synthetic measurement generation.
    """

    id: int
    base_kv: float = 1.0
    gs: float = 0.0  # shunt conductance, p.u.
    bs: float = 0.0  # shunt susceptance, p.u.
    is_slack: bool = False
    vm_true: float = 1.0
    va_true: float = 0.0  # radians


@dataclass(frozen=True)
class Branch:
    """Pi-model branch. ``from_bus``/``to_bus`` are internal 0-based indices."""

    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0  # radians
    in_service: bool = True

    def two_port(self):
        """Complex 2x2 branch admittance (y_ff, y_ft, y_tf, y_tt).

        MATPOWER convention: series y = 1/(r+jx), half the charging on each
        side, off-nominal tap ``t`` and phase shift ``phi`` on the from side.
        """
        y = 1.0 / complex(self.r, self.x)
        ysh = 0.5j * self.b_charging
        t = self.tap * cmath.exp(1j * self.shift)
        y_ff = (y + ysh) / (self.tap * self.tap)
        y_tt = y + ysh
        y_ft = -y / t.conjugate()
        y_tf = -y / t
        return y_ff, y_ft, y_tf, y_tt


@dataclass(frozen=True)
class BusBranchNetwork:
    """Immutable bus-branch model with its sparse nodal admittance matrix."""

    buses: tuple
    branches: tuple
    base_mva: float
    ybus: sp.csr_matrix = field(repr=False)
    adjacency: tuple = field(repr=False)  # per bus: tuple of (neighbor, branch index)
    ext2int: dict = field(repr=False)

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_branch(self):
        return len(self.branches)

    @property
    def slack(self):
        return next(i for i, b in enumerate(self.buses) if b.is_slack)

    def neighbors(self, bus):
        """Sorted neighbor bus indices (without the bus itself)."""
        return sorted({nb for nb, _ in self.adjacency[bus]})

    @staticmethod
    def from_components(buses, branches, base_mva=100.0, require_connected=False):
        """Validate components, drop out-of-service branches, build Ybus."""
        buses = tuple(buses)
        n = len(buses)
        if n == 0:
            raise CaseError("network has no buses")
        ids = [b.id for b in buses]
        if len(set(ids)) != n:
            raise CaseError("duplicate bus ids")
        slacks = [i for i, b in enumerate(buses) if b.is_slack]
        if len(slacks) == 0:
            raise CaseError("zero slack buses (expected exactly one)")
        if len(slacks) > 1:
            raise CaseError(f"multiple slack buses: {[buses[i].id for i in slacks]}")
        for b in buses:
            if not b.vm_true > 0:
                raise CaseError(f"bus {b.id}: vm_true must be positive")

        kept = []
        for br in branches:
            if not br.in_service:
                continue
            if not (0 <= br.from_bus < n) or not (0 <= br.to_bus < n):
                raise CaseError(f"branch references bus index out of range: {br}")
            if br.from_bus == br.to_bus:
                raise CaseError(f"branch from_bus == to_bus at bus {buses[br.from_bus].id}")
            if br.r == 0.0 and br.x == 0.0:
                raise CaseError(
                    f"branch {buses[br.from_bus].id}-{buses[br.to_bus].id} has zero impedance"
                )
            if not br.tap > 0:
                raise CaseError(
                    f"branch {buses[br.from_bus].id}-{buses[br.to_bus].id} has non-positive tap"
                )
            kept.append(br)
        branches = tuple(kept)

        adjacency = [[] for _ in range(n)]
        for e, br in enumerate(branches):
            adjacency[br.from_bus].append((br.to_bus, e))
            adjacency[br.to_bus].append((br.from_bus, e))
        adjacency = tuple(tuple(a) for a in adjacency)

        if require_connected and n > 1:
            comp = _connected_component(adjacency, 0)
            if len(comp) != n:
                missing = sorted(set(range(n)) - comp)
                raise CaseError(
                    f"network is not connected after dropping out-of-service branches; "
                    f"{len(missing)} bus(es) unreachable from bus {buses[0].id} "
                    f"(first: {buses[missing[0]].id})"
                )

        net = BusBranchNetwork(
            buses=buses,
            branches=branches,
            base_mva=base_mva,
            ybus=_build_ybus(buses, branches),
            adjacency=adjacency,
            ext2int={b.id: i for i, b in enumerate(buses)},
        )
        return net

    def true_state(self):
        """Ground-truth (va, vm) arrays from the embedded operating point."""
        va = np.array([b.va_true for b in self.buses])
        vm = np.array([b.vm_true for b in self.buses])
        return va, vm


def _connected_component(adjacency, start):
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v, _ in adjacency[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def _build_ybus(buses, branches):
    n = len(buses)
    rows, cols, vals = [], [], []
    # structural diagonal for every bus, so CSR row i always contains i
    for i, b in enumerate(buses):
        rows.append(i)
        cols.append(i)
        vals.append(complex(b.gs, b.bs))
    for br in branches:
        f, t = br.from_bus, br.to_bus
        y_ff, y_ft, y_tf, y_tt = br.two_port()
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [y_ff, y_ft, y_tf, y_tt]
    y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex).tocsr()
    y.sum_duplicates()
    y.sort_indices()
    return y


def build_ybus(net: BusBranchNetwork) -> sp.csr_matrix:
    """Sparse complex nodal admittance matrix of the network."""
    return _build_ybus(net.buses, net.branches)


# ---------------------------------------------------------------------------
# MATPOWER .m subset
# ---------------------------------------------------------------------------

_NUM_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eEdD][+-]?\d+)?$")


def _parse_matrix(text, name):
    """Extract rows of ``mpc.<name> = [ ... ];`` as float lists.

    Returns (rows, row_lines) or (None, None) when the matrix is absent.
    Raises CaseError with line/column on malformed numeric tokens.
    """
    lines = text.splitlines()
    start = None
    for ln, raw in enumerate(lines):
        stripped = raw.split("%", 1)[0]
        if re.match(rf"^\s*mpc\.{re.escape(name)}\s*=\s*\[", stripped):
            start = ln
            break
    if start is None:
        return None, None

    rows, row_lines = [], []
    first = lines[start].split("%", 1)[0]
    body = first.split("[", 1)[1]
    ln = start
    while True:
        closed = "]" in body
        if closed:
            body = body.split("]", 1)[0]
        # inside a matrix literal both ';' and end-of-line terminate a row
        for chunk in body.replace(",", " ").split(";"):
            toks = chunk.split()
            if not toks:
                continue
            row = []
            for tok in toks:
                if not _NUM_RE.match(tok):
                    col = lines[ln].find(tok) + 1
                    raise CaseError(
                        f"invalid numeric token {tok!r} in mpc.{name}",
                        line=ln + 1,
                        column=col if col > 0 else None,
                    )
                row.append(float(tok.replace("d", "e").replace("D", "e")))
            rows.append(row)
            row_lines.append(ln + 1)
        if closed:
            break
        ln += 1
        if ln >= len(lines):
            raise CaseError(f"unterminated mpc.{name} matrix", line=start + 1)
        body = lines[ln].split("%", 1)[0]
    return rows, row_lines


def _parse_scalar(text, name):
    m = re.search(rf"mpc\.{re.escape(name)}\s*=\s*([0-9.eE+-]+)\s*;", text)
    return float(m.group(1)) if m else None


def parse_matpower(text: str) -> BusBranchNetwork:
    """Parse the MATPOWER ``.m`` subset: baseMVA, bus, branch (gen ignored)."""
    base_mva = _parse_scalar(text, "baseMVA")
    if base_mva is None:
        raise CaseError("missing mpc.baseMVA")
    bus_rows, bus_lines = _parse_matrix(text, "bus")
    if bus_rows is None:
        raise CaseError("missing mpc.bus matrix")
    branch_rows, branch_lines = _parse_matrix(text, "branch")
    if branch_rows is None:
        raise CaseError("missing mpc.branch matrix")

    buses = []
    for row, ln in zip(bus_rows, bus_lines):
        if len(row) < 13:
            raise CaseError(f"bus row has {len(row)} columns, expected >= 13", line=ln)
        btype = int(row[1])
        buses.append(
            Bus(
                id=int(row[0]),
                base_kv=row[9],
                gs=row[4] / base_mva,
                bs=row[5] / base_mva,
                is_slack=(btype == 3),
                vm_true=row[7],
                va_true=math.radians(row[8]),
            )
        )
    ext2int = {b.id: i for i, b in enumerate(buses)}

    branches = []
    for row, ln in zip(branch_rows, branch_lines):
        if len(row) < 11:
            raise CaseError(f"branch row has {len(row)} columns, expected >= 11", line=ln)
        f_ext, t_ext = int(row[0]), int(row[1])
        for ext in (f_ext, t_ext):
            if ext not in ext2int:
                raise CaseError(f"unknown bus reference {ext} in branch", line=ln)
        tap = row[8] if row[8] != 0.0 else 1.0
        branches.append(
            Branch(
                from_bus=ext2int[f_ext],
                to_bus=ext2int[t_ext],
                r=row[2],
                x=row[3],
                b_charging=row[4],
                tap=tap,
                shift=math.radians(row[9]),
                in_service=bool(row[10]),
            )
        )
    return BusBranchNetwork.from_components(buses, branches, base_mva, require_connected=True)


# ---------------------------------------------------------------------------
# Native JSON schema
# ---------------------------------------------------------------------------

def parse_native_json(text: str) -> BusBranchNetwork:
    """Parse the native JSON schema (see README for the field list)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"invalid JSON: {exc.msg}", line=exc.lineno, column=exc.colno) from exc
    if not isinstance(doc, dict) or "buses" not in doc or "branches" not in doc:
        raise CaseError("native JSON case must contain 'buses' and 'branches'")

    buses = []
    for rec in doc["buses"]:
        try:
            buses.append(
                Bus(
                    id=int(rec["id"]),
                    base_kv=float(rec.get("base_kv", 1.0)),
                    gs=float(rec.get("gs", 0.0)),
                    bs=float(rec.get("bs", 0.0)),
                    is_slack=bool(rec.get("is_slack", False)),
                    vm_true=float(rec.get("vm_true", 1.0)),
                    va_true=float(rec.get("va_true", 0.0)),
                )
            )
        except KeyError as exc:
            raise CaseError(f"bus record missing field {exc}") from exc
    ext2int = {b.id: i for i, b in enumerate(buses)}

    branches = []
    for rec in doc["branches"]:
        try:
            f_ext, t_ext = int(rec["from_bus"]), int(rec["to_bus"])
        except KeyError as exc:
            raise CaseError(f"branch record missing field {exc}") from exc
        for ext in (f_ext, t_ext):
            if ext not in ext2int:
                raise CaseError(f"unknown bus reference {ext} in branch")
        branches.append(
            Branch(
                from_bus=ext2int[f_ext],
                to_bus=ext2int[t_ext],
                r=float(rec["r"]),
                x=float(rec["x"]),
                b_charging=float(rec.get("b_charging", 0.0)),
                tap=float(rec.get("tap", 1.0)),
                shift=float(rec.get("shift", 0.0)),
                in_service=bool(rec.get("in_service", True)),
            )
        )
    base_mva = float(doc.get("base_mva", 100.0))
    return BusBranchNetwork.from_components(buses, branches, base_mva, require_connected=True)


def to_native_json(net: BusBranchNetwork) -> str:
    """Serialize to the native JSON schema (round-trips through parse)."""
    doc = {
        "base_mva": net.base_mva,
        "buses": [
            {
                "id": b.id,
                "base_kv": b.base_kv,
                "gs": b.gs,
                "bs": b.bs,
                "is_slack": b.is_slack,
                "vm_true": b.vm_true,
                "va_true": b.va_true,
            }
            for b in net.buses
        ],
        "branches": [
            {
                "from_bus": net.buses[br.from_bus].id,
                "to_bus": net.buses[br.to_bus].id,
                "r": br.r,
                "x": br.x,
                "b_charging": br.b_charging,
                "tap": br.tap,
                "shift": br.shift,
                "in_service": br.in_service,
            }
            for br in net.branches
        ],
    }
    return json.dumps(doc, indent=1)


def parse_case(text: str, fmt: str) -> BusBranchNetwork:
    """Parse case text in the declared format."""
    if fmt == MATPOWER_FORMAT:
        return parse_matpower(text)
    if fmt == NATIVE_JSON_FORMAT:
        return parse_native_json(text)
    raise ValueError(f"unknown case format {fmt!r}")


def load_case(path) -> BusBranchNetwork:
    """Read a case file, inferring the format from the suffix (.m / .json)."""
    path = str(path)
    with open(path) as fh:
        text = fh.read()
    fmt = MATPOWER_FORMAT if path.endswith(".m") else NATIVE_JSON_FORMAT
    return parse_case(text, fmt)
