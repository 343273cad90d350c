"""Network partitioning: connected areas, cut branches, boundary variable maps.

The global boundary state stacks boundary-bus angles first, then magnitudes,
both sorted by bus index; the slack angle is excluded everywhere.  Selector
maps are index arrays (no materialized 0/1 matrices).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .network import BusBranchNetwork


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Partition:
    k: int
    area_of_bus: np.ndarray
    cut_branches: np.ndarray  # branch indices with endpoints in different areas
    boundary_buses: np.ndarray  # sorted; terminal buses of cut branches
    area_pairs: dict  # (a, b) with a < b -> tie-line count

    def buses_of_area(self, a):
        return np.flatnonzero(self.area_of_bus == a)


@dataclass(frozen=True)
class BoundaryOrdering:
    """Layout of the global boundary vector: angle block then magnitude block."""

    entries: tuple  # ((bus, "va"|"vm"), ...)
    angle_slot: dict  # bus -> slot (slack absent)
    mag_slot: dict  # bus -> slot

    @property
    def n_gamma(self):
        return len(self.entries)

    @property
    def angle_buses(self):
        return np.array([b for b, q in self.entries if q == "va"], dtype=int)

    @property
    def mag_buses(self):
        return np.array([b for b, q in self.entries if q == "vm"], dtype=int)

    def gather(self, va, vm):
        ab, mb = self.angle_buses, self.mag_buses
        return np.concatenate([va[ab], vm[mb]])

    def apply_delta(self, va, vm, delta):
        ab, mb = self.angle_buses, self.mag_buses
        va[ab] += delta[: len(ab)]
        vm[mb] += delta[len(ab):]


@dataclass(frozen=True)
class AreaVariableMap:
    """Local variable layout of one area: interior block then boundary block.

    ``boundary_selector[j]`` is the global boundary slot feeding local
    boundary variable ``j`` (the row structure of the area's selector matrix).
    """

    area: int
    internal_buses: np.ndarray  # owned, not on the boundary
    local_boundary_buses: np.ndarray  # own boundary buses + tie-line far ends
    owned_buses: frozenset  # internal + own boundary (measurement ownership)
    interior_angle_buses: np.ndarray  # internal minus slack
    interior_mag_buses: np.ndarray  # internal
    interior_angle_slot: dict  # bus -> slot in x_i
    interior_mag_slot: dict
    boundary_angle_slot: dict  # bus -> slot in x_b (local)
    boundary_mag_slot: dict
    boundary_selector: np.ndarray  # local boundary slot -> global gamma slot
    slack: int

    @property
    def n_interior(self):
        return len(self.interior_angle_buses) + len(self.interior_mag_buses)

    @property
    def n_boundary(self):
        return len(self.boundary_selector)

    def local_index(self, bus, quant):
        """Local variable id for (bus, quant); boundary ids follow interior ids.

        Raises KeyError when the area does not reference the variable, which
        only happens if a measurement violates the ownership closure rule.
        """
        if quant == "va":
            slot = self.interior_angle_slot.get(bus)
            if slot is not None:
                return slot
            return self.n_interior + self.boundary_angle_slot[bus]
        slot = self.interior_mag_slot.get(bus)
        if slot is not None:
            return slot
        return self.n_interior + self.boundary_mag_slot[bus]

    def gather_interior(self, va, vm):
        return np.concatenate([va[self.interior_angle_buses], vm[self.interior_mag_buses]])

    def apply_interior_delta(self, va, vm, delta):
        na = len(self.interior_angle_buses)
        va[self.interior_angle_buses] += delta[:na]
        vm[self.interior_mag_buses] += delta[na:]

    def local_boundary_angle_buses(self):
        return np.array(
            [b for b in self.local_boundary_buses if b != self.slack], dtype=int
        )


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

def _bfs_distances(net, sources):
    dist = np.full(net.n_bus, -1, dtype=int)
    q = deque()
    for s in sources:
        dist[s] = 0
        q.append(s)
    while q:
        u = q.popleft()
        for v in net.neighbors(u):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist

def _pick_seeds(net, k, seed):
    """First seed random; the rest by farthest-point sampling (ties: lowest id)."""
    rng = np.random.default_rng(seed)
    seeds = [int(rng.integers(net.n_bus))]
    while len(seeds) < k:
        dist = _bfs_distances(net, seeds)
        far = int(np.flatnonzero(dist == dist.max())[0])
        seeds.append(far)
    return seeds

def _grow_areas(net, seeds):
    """Multi-source BFS growth, smallest area first; returns area_of_bus."""
    n = net.n_bus
    k = len(seeds)
    area = np.full(n, -1, dtype=int)
    sizes = [1] * k
    for a, s in enumerate(seeds):
        area[s] = a
    frontiers = [deque(v for v in net.neighbors(s) if area[v] == -1) for s in seeds]
    remaining = n - k
    active = set(range(k))
    while remaining and active:
        a = min(active, key=lambda i: (sizes[i], i))
        q = frontiers[a]
        grew = False
        while q:
            u = q.popleft()
            if area[u] != -1:
                continue  # stale queue entry, claimed elsewhere meanwhile
            area[u] = a
            sizes[a] += 1
            remaining -= 1
            for v in net.neighbors(u):
                if area[v] == -1:
                    q.append(v)
            grew = True
            break
        if not grew:
            active.discard(a)
    if remaining:
        # unreachable on a connected network, kept as a guard
        starved = min(range(k), key=lambda i: sizes[i])
        raise PartitionError(
            f"partition infeasible: area {starved} starved with {sizes[starved]} bus(es) "
            f"while {remaining} remain unassigned"
        )
    return area

def _area_connected(net, area, a, skip=None):
    members = [u for u in range(net.n_bus) if area[u] == a and u != skip]
    if not members:
        return False
    seen = {members[0]}
    stack = [members[0]]
    while stack:
        u = stack.pop()
        for v in net.neighbors(u):
            if v != skip and area[v] == a and v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(members)

def _refine_balance(net, area, k, max_passes=12):
    """Move boundary buses toward smaller neighbor areas when both stay connected."""
    sizes = np.bincount(area, minlength=k).astype(int)
    for _ in range(max_passes):
        moved = False
        for u in range(net.n_bus):
            a = int(area[u])
            if sizes[a] <= 1:
                continue
            nbr_areas = sorted({int(area[v]) for v in net.neighbors(u)} - {a})
            candidates = [b for b in nbr_areas if sizes[a] > sizes[b] + 1]
            if not candidates:
                continue
            b = min(candidates, key=lambda i: (sizes[i], i))
            if not _area_connected(net, area, a, skip=u):
                continue
            area[u] = b
            sizes[a] -= 1
            sizes[b] += 1
            moved = True
        if not moved:
            break
    return area


def _derive(net, area_of_bus, k):
    cut, pairs = [], {}
    for e, br in enumerate(net.branches):
        af, at = int(area_of_bus[br.from_bus]), int(area_of_bus[br.to_bus])
        if af != at:
            cut.append(e)
            key = (min(af, at), max(af, at))
            pairs[key] = pairs.get(key, 0) + 1
    boundary = sorted(
        {net.branches[e].from_bus for e in cut} | {net.branches[e].to_bus for e in cut}
    )
    return Partition(
        k=k,
        area_of_bus=np.asarray(area_of_bus, dtype=int),
        cut_branches=np.asarray(cut, dtype=int),
        boundary_buses=np.asarray(boundary, dtype=int),
        area_pairs=pairs,
    )


def _area_center(net, area, a):
    """Bus of minimum eccentricity within the induced subgraph of area a."""
    members = [u for u in range(net.n_bus) if area[u] == a]
    best, best_ecc = members[0], None
    for s in members:
        dist = {s: 0}
        q = deque([s])
        while q:
            u = q.popleft()
            for v in net.neighbors(u):
                if area[v] == a and v not in dist:
                    dist[v] = dist[u] + 1
                    q.append(v)
        ecc = max(dist.values())
        if best_ecc is None or (ecc, s) < (best_ecc, best):
            best, best_ecc = s, ecc
    return best


def _shift_one(net, area, a, b, sizes):
    """Move one boundary bus from area a to adjacent area b, keeping a connected."""
    for u in range(net.n_bus):
        if area[u] != a or sizes[a] <= 1:
            continue
        if not any(area[v] == b for v in net.neighbors(u)):
            continue
        if _area_connected(net, area, a, skip=u):
            area[u] = b
            sizes[a] -= 1
            sizes[b] += 1
            return True
    return False


def _cascade_balance(net, area, k, target_ratio=2.0):
    """Drain the largest area toward the smallest along the area-adjacency graph."""
    sizes = np.bincount(area, minlength=k).astype(int)
    for _ in range(2 * net.n_bus):
        if sizes.max() <= target_ratio * sizes.min() and sizes.max() - sizes.min() <= max(
            2, sizes.min()
        ):
            break
        big, small = int(np.argmax(sizes)), int(np.argmin(sizes))
        adj = {i: set() for i in range(k)}
        for br in net.branches:
            x, y = int(area[br.from_bus]), int(area[br.to_bus])
            if x != y:
                adj[x].add(y)
                adj[y].add(x)
        prev = {big: None}
        q = deque([big])
        while q and small not in prev:
            u = q.popleft()
            for v in sorted(adj[u]):
                if v not in prev:
                    prev[v] = u
                    q.append(v)
        if small not in prev:
            break
        path = []
        node = small
        while node is not None:
            path.append(node)
            node = prev[node]
        path.reverse()
        ok = True
        for x, y in zip(path, path[1:]):
            if not _shift_one(net, area, x, y, sizes):
                ok = False
                break
        if not ok:
            break
    return area


def _refine_cuts(net, area, k, max_passes=6):
    """Move boundary buses to the neighbor area holding most of their edges,
    reducing the tie-line count while keeping areas connected and balanced."""
    sizes = np.bincount(area, minlength=k).astype(int)
    cap = 2 * int(sizes.min())  # keep the max/min ratio at or below 2
    for _ in range(max_passes):
        moved = False
        for u in range(net.n_bus):
            a = int(area[u])
            if sizes[a] <= 1:
                continue
            nbrs = net.neighbors(u)
            here = sum(1 for v in nbrs if area[v] == a)
            best, best_gain = None, 0
            for b in sorted({int(area[v]) for v in nbrs} - {a}):
                there = sum(1 for v in nbrs if area[v] == b)
                gain = there - here  # net cut-edge reduction
                if gain > best_gain and sizes[b] + 1 <= cap and sizes[a] - 1 >= 1:
                    best, best_gain = b, gain
            if best is None:
                continue
            if not _area_connected(net, area, a, skip=u):
                continue
            area[u] = best
            sizes[a] -= 1
            sizes[best] += 1
            cap = 2 * int(sizes.min())
            moved = True
        if not moved:
            break
    return area


def _partition_attempt(net, k, seed):
    seeds = _pick_seeds(net, k, seed)
    area = _grow_areas(net, seeds)
    for _ in range(3):
        centers = [_area_center(net, area, a) for a in range(k)]
        if centers == seeds:
            break
        seeds = centers
        area = _grow_areas(net, seeds)
    area = _refine_balance(net, area, k)
    area = _cascade_balance(net, area, k)
    area = _refine_balance(net, area, k)
    area = _refine_cuts(net, area, k)
    return area


def partition_network(net: BusBranchNetwork, k: int, seed: int = 0) -> Partition:
    """Split into k connected areas: seeded BFS growth with re-seeded regrow
    rounds (Lloyd style), then balance refinement; deterministic per seed.

    A few internal restarts with derived seeds keep the max/min area size
    ratio at or below 2 on meshed networks.
    """
    if not 1 <= k <= net.n_bus:
        raise PartitionError(f"k={k} outside 1..{net.n_bus}")
    if k == 1:
        return _derive(net, np.zeros(net.n_bus, dtype=int), 1)
    candidates = [_partition_attempt(net, k, seed + 7919 * a) for a in range(3)]
    if k + 1 <= net.n_bus:
        # coarsened candidates: split one level finer, then merge the adjacent
        # pair that leaves the thinnest interface (often beats direct growth)
        for a in range(2):
            fine = _partition_attempt(net, k + 1, seed + 7919 * a)
            candidates.extend(_merge_candidates(net, fine, k + 1))
    best, best_key = None, None
    for area in candidates:
        sizes = np.bincount(area, minlength=k)
        if len(sizes) != k or sizes.min() == 0:
            continue
        cuts = sum(1 for br in net.branches if area[br.from_bus] != area[br.to_bus])
        # prefer balanced attempts, then the smallest tie-line interface
        key = (sizes.max() / sizes.min() > 2.0, cuts)
        if best_key is None or key < best_key:
            best, best_key = area, key
    part = _derive(net, best, k)
    validate_partition(net, part)
    return part


def _merge_candidates(net, area, k_fine):
    """Bisection-by-merging candidates: fuse each adjacent area pair of a
    finer partition, keep balance-feasible results, re-thin their interfaces."""
    out = []
    pairs = set()
    for br in net.branches:
        x, y = int(area[br.from_bus]), int(area[br.to_bus])
        if x != y:
            pairs.add((min(x, y), max(x, y)))
    for a, b in sorted(pairs):
        merged = area.copy()
        merged[merged == b] = a
        remap = {v: i for i, v in enumerate(sorted(set(merged.tolist())))}
        merged = np.array([remap[v] for v in merged], dtype=int)
        sizes = np.bincount(merged, minlength=k_fine - 1)
        if sizes.max() / sizes.min() > 2.0:
            continue
        out.append(_refine_cuts(net, merged, k_fine - 1))
    return out


def load_partition(net: BusBranchNetwork, area_of_bus) -> Partition:
    """Build a Partition from an explicit bus -> area assignment."""
    area = np.asarray(area_of_bus, dtype=int)
    if area.shape != (net.n_bus,):
        raise PartitionError(
            f"assignment covers {area.shape[0] if area.ndim else 0} buses, "
            f"network has {net.n_bus}"
        )
    if area.min() < 0:
        raise PartitionError("negative area index")
    k = int(area.max()) + 1
    part = _derive(net, area, k)
    validate_partition(net, part)
    return part


def validate_partition(net, part):
    sizes = np.bincount(part.area_of_bus, minlength=part.k)
    for a in range(part.k):
        if sizes[a] == 0:
            raise PartitionError(f"area {a} is empty")
        if not _area_connected(net, part.area_of_bus, a):
            comps = _components_of_area(net, part.area_of_bus, a)
            raise PartitionError(
                f"area {a} is disconnected: components "
                + ", ".join(str(sorted(net.buses[u].id for u in c)) for c in comps)
            )

def _components_of_area(net, area, a):
    members = {u for u in range(net.n_bus) if area[u] == a}
    comps = []
    while members:
        start = min(members)
        seen = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for v in net.neighbors(u):
                if v in seen or area[v] != a:
                    continue
                seen.add(v)
                stack.append(v)
        comps.append(seen)
        members -= seen
    return comps


# ---------------------------------------------------------------------------
# Variable maps
# ---------------------------------------------------------------------------

def build_variable_maps(net: BusBranchNetwork, part: Partition):
    """Boundary ordering plus one AreaVariableMap per area.

    An area references its own boundary buses and the far endpoints of its
    tie-lines, which closes every locally-owned measurement over
    (interior, local boundary) variables.
    """
    slack = net.slack
    boundary = [int(b) for b in part.boundary_buses]
    bset = set(boundary)

    entries = [(b, "va") for b in boundary if b != slack] + [(b, "vm") for b in boundary]
    angle_slot = {b: i for i, (b, q) in enumerate(entries) if q == "va"}
    mag_slot = {b: i for i, (b, q) in enumerate(entries) if q == "vm"}
    bord = BoundaryOrdering(entries=tuple(entries), angle_slot=angle_slot, mag_slot=mag_slot)

    local_bnd = [set() for _ in range(part.k)]
    for b in boundary:
        local_bnd[part.area_of_bus[b]].add(b)
    for e in part.cut_branches:
        br = net.branches[int(e)]
        af, at = part.area_of_bus[br.from_bus], part.area_of_bus[br.to_bus]
        local_bnd[af].add(br.to_bus)
        local_bnd[at].add(br.from_bus)

    maps = []
    for a in range(part.k):
        owned = np.flatnonzero(part.area_of_bus == a)
        internal = np.array([u for u in owned if u not in bset], dtype=int)
        lb = np.array(sorted(local_bnd[a]), dtype=int)

        ia = np.array([u for u in internal if u != slack], dtype=int)
        im = internal
        ia_slot = {int(u): i for i, u in enumerate(ia)}
        im_slot = {int(u): len(ia) + i for i, u in enumerate(im)}

        lb_angles = [int(u) for u in lb if u != slack]
        lb_mags = [int(u) for u in lb]
        ba_slot = {u: i for i, u in enumerate(lb_angles)}
        bm_slot = {u: len(lb_angles) + i for i, u in enumerate(lb_mags)}
        selector = np.array(
            [angle_slot[u] for u in lb_angles] + [mag_slot[u] for u in lb_mags], dtype=int
        )

        maps.append(
            AreaVariableMap(
                area=a,
                internal_buses=internal,
                local_boundary_buses=lb,
                owned_buses=frozenset(int(u) for u in owned),
                interior_angle_buses=ia,
                interior_mag_buses=im,
                interior_angle_slot=ia_slot,
                interior_mag_slot=im_slot,
                boundary_angle_slot=ba_slot,
                boundary_mag_slot=bm_slot,
                boundary_selector=selector,
                slack=slack,
            )
        )
    return bord, maps


# ---------------------------------------------------------------------------
# Partition file I/O
# ---------------------------------------------------------------------------

def write_partition_file(part: Partition, path):
    with open(path, "w") as fh:
        json.dump({"k": part.k, "area_of_bus": [int(a) for a in part.area_of_bus]}, fh)
        fh.write("\n")


def read_partition_file(net: BusBranchNetwork, path) -> Partition:
    with open(path) as fh:
        doc = json.load(fh)
    part = load_partition(net, doc["area_of_bus"])
    if "k" in doc and int(doc["k"]) != part.k:
        raise PartitionError(
            f"partition file declares k={doc['k']} but assignment uses {part.k} areas"
        )
    return part
