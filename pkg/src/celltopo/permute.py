"""Pivot-net topology permutation.

A validated pivot is an internal net touched by channel terminals of exactly
one device type.  Around it we find the nearest common ancestor (NCA) of its
up-neighbors and the nearest common descendant (NCD) of its down-neighbors in
the directed pull-network graph, then rewire the bounded region between them
so the two sub-blocks around the pivot trade places.  The rewiring is local,
involutive and preserves the cell function; applying every subset of valid
pivots enumerates functionally equivalent topology variants.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from itertools import permutations

from .netlist import (
    CellNetlist, Device, DeviceType, NetKind, NetRef,
    normalize_orientation,
)


class PermuteError(Exception):
    pass


class CyclicNetworkError(PermuteError):
    pass


class InvalidPivotError(PermuteError):
    class Reason(Enum):
        NOT_FOUND = "NotFound"
        GATE_ONLY = "GateOnly"
        MIXED_NETWORKS = "MixedNetworks"
        RAIL_OR_PIN = "RailOrPin"

    def __init__(self, net: str, reason: "InvalidPivotError.Reason"):
        super().__init__(f"invalid pivot {net}: {reason.value}")
        self.net = net
        self.reason = reason


class DegenerateRegionError(PermuteError):
    pass


class Network(Enum):
    PULL_UP = "pull-up"
    PULL_DOWN = "pull-down"

    @property
    def dtype(self) -> DeviceType:
        return DeviceType.PMOS if self is Network.PULL_UP else DeviceType.NMOS


@dataclass(frozen=True)
class PivotCandidate:
    net: str
    network: Network


@dataclass(frozen=True)
class PullGraph:
    """Directed graph of one pull network: an edge per device, drain (up
    terminal) to source (down terminal)."""
    network: Network
    edges: tuple[tuple[str, str, str], ...]  # (drain, source, device name)
    up: dict[str, tuple[str, ...]] = field(repr=False)    # net -> drains above
    down: dict[str, tuple[str, ...]] = field(repr=False)  # net -> sources below

    def nodes(self) -> set[str]:
        out = set()
        for d, s, _ in self.edges:
            out.add(d)
            out.add(s)
        return out


@dataclass(frozen=True)
class NetGraph:
    pull_up: PullGraph
    pull_down: PullGraph

    def of(self, network: Network) -> PullGraph:
        return self.pull_up if network is Network.PULL_UP else self.pull_down


@dataclass(frozen=True)
class SwapRegion:
    pivot: str
    network: Network
    nca: str
    ncd: str
    up_boundary: frozenset[str]
    down_boundary: frozenset[str]
    interior: frozenset[str]
    delta: dict[str, tuple[str, str]]  # device name -> (new drain, new source)


def _check_acyclic(edges, network: Network):
    children: dict[str, list[str]] = {}
    indeg: dict[str, int] = {}
    for d, s, _ in edges:
        children.setdefault(d, []).append(s)
        indeg[s] = indeg.get(s, 0) + 1
        indeg.setdefault(d, 0)
    queue = deque(n for n, k in indeg.items() if k == 0)
    seen = 0
    while queue:
        u = queue.popleft()
        seen += 1
        for v in children.get(u, ()):
            indeg[v] -= 1
            if indeg[v] == 0:
                queue.append(v)
    if seen != len(indeg):
        raise CyclicNetworkError(
            f"{network.value} graph has a cycle; is the cell orientation-normalized?")


def build_graph(cell: CellNetlist) -> NetGraph:
    """Directed pull-network graphs of a validated, normalized cell."""
    graphs = {}
    for network in (Network.PULL_UP, Network.PULL_DOWN):
        edges = []
        up: dict[str, list[str]] = {}
        down: dict[str, list[str]] = {}
        for dev in cell.devices_of(network.dtype):
            d, s = dev.drain.name, dev.source.name
            edges.append((d, s, dev.name))
            down.setdefault(d, []).append(s)
            up.setdefault(s, []).append(d)
        _check_acyclic(edges, network)
        graphs[network] = PullGraph(
            network, tuple(edges),
            {k: tuple(v) for k, v in up.items()},
            {k: tuple(v) for k, v in down.items()},
        )
    return NetGraph(graphs[Network.PULL_UP], graphs[Network.PULL_DOWN])


def validate_pivot(cell: CellNetlist, pivot: str) -> PivotCandidate:
    """Accept a net as pivot iff it sits on channel terminals of exactly one
    device type and is an internal net."""
    name = pivot.upper()
    nets = cell.nets()
    is_pmos = is_nmos = False
    for dev in cell.devices:
        if name in (dev.drain.name, dev.source.name):
            if dev.dtype is DeviceType.PMOS:
                is_pmos = True
            else:
                is_nmos = True
    if is_pmos and is_nmos:
        raise InvalidPivotError(name, InvalidPivotError.Reason.MIXED_NETWORKS)
    if not is_pmos and not is_nmos:
        if any(dev.gate.name == name for dev in cell.devices):
            raise InvalidPivotError(name, InvalidPivotError.Reason.GATE_ONLY)
        raise InvalidPivotError(name, InvalidPivotError.Reason.NOT_FOUND)
    ref = nets.get(name)
    if ref is None or ref.kind is not NetKind.INTERNAL:
        raise InvalidPivotError(name, InvalidPivotError.Reason.RAIL_OR_PIN)
    return PivotCandidate(name, Network.PULL_UP if is_pmos else Network.PULL_DOWN)


def _reachable(start: set[str], step: dict[str, tuple[str, ...]]) -> set[str]:
    seen = set(start)
    queue = deque(start)
    while queue:
        u = queue.popleft()
        for v in step.get(u, ()):
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


def _nearest_common(seeds: tuple[str, ...], step: dict[str, tuple[str, ...]]) -> str | None:
    """Layer-by-layer BFS intersection; nearest node reachable from every
    seed, ties broken by net-name order."""
    fronts = [{s} for s in set(seeds)]
    reached = [set(f) for f in fronts]
    while True:
        common = set.intersection(*reached)
        if common:
            return min(common)
        new_fronts = []
        progressed = False
        for front, seen in zip(fronts, reached):
            nxt = set()
            for u in front:
                for v in step.get(u, ()):
                    if v not in seen:
                        nxt.add(v)
            if nxt:
                progressed = True
            seen |= nxt
            new_fronts.append(nxt)
        fronts = new_fronts
        if not progressed:
            return None


def find_swap_region(graph: NetGraph, pivot: PivotCandidate) -> SwapRegion:
    g = graph.of(pivot.network)
    p = pivot.net
    up_neighbors = g.up.get(p, ())
    down_neighbors = g.down.get(p, ())
    if not up_neighbors or not down_neighbors:
        raise DegenerateRegionError(f"pivot {p} lacks an up or down neighbor")

    nca = _nearest_common(up_neighbors, g.up)
    ncd = _nearest_common(down_neighbors, g.down)
    if nca is None or ncd is None:
        raise DegenerateRegionError(f"pivot {p} has no common ancestor/descendant")
    if nca == p or ncd == p:
        raise DegenerateRegionError(f"region around {p} collapsed onto the pivot")

    above = _reachable({p}, g.up) & _reachable({nca}, g.down)
    below = _reachable({p}, g.down) & _reachable({ncd}, g.up)
    up_boundary = frozenset(g.down.get(nca, ())) & above
    down_boundary = frozenset(g.up.get(ncd, ())) & below
    interior = frozenset((above | below) - {p, nca, ncd})

    up_set = set(up_neighbors)
    down_set = set(down_neighbors)
    delta: dict[str, tuple[str, str]] = {}
    for d_net, s_net, dev_name in g.edges:
        new_d, new_s = d_net, s_net
        if d_net == nca and s_net in up_boundary:
            new_d = p
        if d_net == p and s_net in down_set:
            new_d = nca
        if s_net == ncd and d_net in down_boundary:
            new_s = p
        if s_net == p and d_net in up_set:
            new_s = ncd
        if (new_d, new_s) != (d_net, s_net):
            delta[dev_name] = (new_d, new_s)

    if not delta:
        raise DegenerateRegionError(f"pivot {p} produces an empty change set")
    return SwapRegion(p, pivot.network, nca, ncd, up_boundary, down_boundary,
                      interior, delta)


def swap_net(cell: CellNetlist, pivot: str) -> CellNetlist:
    """Apply the pivot swap and return the rewired cell.

    Device count, gates, bulk connections and the pin list are untouched;
    only drain/source terminals inside the swap region move.  Raises
    InvalidPivotError or DegenerateRegionError without mutating anything.
    """
    candidate = validate_pivot(cell, pivot)
    normalized = normalize_orientation(cell)
    region = find_swap_region(build_graph(normalized), candidate)

    nets = normalized.nets()
    new_devices = []
    for dev in normalized.devices:
        change = region.delta.get(dev.name)
        if change is None:
            new_devices.append(dev)
        else:
            new_d, new_s = change
            new_devices.append(Device(dev.name, dev.dtype, nets[new_d], dev.gate,
                                      nets[new_s], dev.bulk, dev.width_nm, dev.length_nm))
    return CellNetlist(normalized.cell_name, normalized.pins, tuple(new_devices))


def list_valid_pivots(cell: CellNetlist) -> list[PivotCandidate]:
    """All pivots that validate and yield a non-degenerate swap region,
    ordered by net name."""
    normalized = normalize_orientation(cell)
    graph = build_graph(normalized)
    out = []
    for name, ref in sorted(normalized.nets().items()):
        if ref.kind is not NetKind.INTERNAL:
            continue
        try:
            candidate = validate_pivot(normalized, name)
            find_swap_region(graph, candidate)
        except (InvalidPivotError, DegenerateRegionError):
            continue
        out.append(candidate)
    return out


# -----------------------------
# Topology enumeration
# -----------------------------

@dataclass(frozen=True)
class EnumerationResult:
    variants: tuple[CellNetlist, ...]   # deduplicated, seed first
    variant_indices: tuple[int, ...]    # subset index of each kept variant
    n_pivots: int
    emitted: int                        # before dedup == min(cap, 2**n)
    duplicates: int
    flagged: tuple[tuple[int, str], ...]  # (subset index, pivot) skipped mid-subset


def enumerate_topologies(cell: CellNetlist, cap: int = 100) -> EnumerationResult:
    """Apply every pivot subset in binary-counter order (bit j selects the
    j-th pivot of the name-ordered list), emitting min(cap, 2^n) variants,
    the untouched seed first.  Duplicates under canonical hashing are
    dropped and counted."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    seed = normalize_orientation(cell)
    pivots = list_valid_pivots(seed)
    n = len(pivots)
    total = min(cap, 1 << n)

    variants: list[CellNetlist] = []
    indices: list[int] = []
    flagged: list[tuple[int, str]] = []
    seen: set[int] = set()
    duplicates = 0
    for k in range(total):
        cur = seed
        for j, cand in enumerate(pivots):
            if (k >> j) & 1:
                try:
                    cur = swap_net(cur, cand.net)
                except (InvalidPivotError, DegenerateRegionError):
                    flagged.append((k, cand.net))
        digest = canonical_hash(cur)
        if digest in seen:
            duplicates += 1
            continue
        seen.add(digest)
        variants.append(cur)
        indices.append(k)
    return EnumerationResult(tuple(variants), tuple(indices), n, total,
                             duplicates, tuple(flagged))


# -----------------------------
# Canonical structural hashing
# -----------------------------

_MAX_TIE_PERMS = 40320  # 8!


def _canonical_device_rows(cell: CellNetlist, label: dict[str, str]) -> list[tuple]:
    rows = []
    for d in cell.devices:
        rows.append((d.dtype.value, label[d.drain.name], label[d.gate.name],
                     label[d.source.name], label[d.bulk.name],
                     d.width_nm or 0, d.length_nm or 0))
    rows.sort()
    return rows


def _refine_colors(cell: CellNetlist) -> dict[str, int]:
    """Weisfeiler-Lehman style color refinement with named pins and rails
    as fixed anchors; returns a color id per net."""
    nets = cell.nets()
    color: dict[str, tuple] = {}
    for name, ref in nets.items():
        if ref.kind is NetKind.INTERNAL:
            color[name] = ("I",)
        else:
            color[name] = ("F", name)

    for _ in range(len(nets) + 2):
        sigs = {}
        for name in nets:
            attached = []
            for d in cell.devices:
                roles = []
                if d.drain.name == name:
                    roles.append("d")
                if d.gate.name == name:
                    roles.append("g")
                if d.source.name == name:
                    roles.append("s")
                if d.bulk.name == name:
                    roles.append("b")
                if roles:
                    attached.append((d.dtype.value, tuple(roles),
                                     color[d.drain.name], color[d.gate.name],
                                     color[d.source.name]))
            sigs[name] = (color[name], tuple(sorted(attached)))
        # Re-intern signatures into compact, order-stable colors.
        uniq = sorted(set(sigs.values()))
        index = {sig: i for i, sig in enumerate(uniq)}
        new_color = {name: ("C", index[sigs[name]]) for name in nets}
        if len(set(new_color.values())) == len(set(color.values())):
            color = new_color
            break
        color = new_color

    uniq = sorted(set(color.values()))
    index = {c: i for i, c in enumerate(uniq)}
    return {name: index[c] for name, c in color.items()}


def canonical_form(cell: CellNetlist) -> str:
    """Serialized form invariant under device reordering and consistent
    internal-net renaming.  Pin and rail names stay literal."""
    nets = cell.nets()
    colors = _refine_colors(cell)
    internal = sorted((n for n, r in nets.items() if r.kind is NetKind.INTERNAL),
                      key=lambda n: (colors[n], n))

    groups: list[list[str]] = []
    for net in internal:
        if groups and colors[groups[-1][0]] == colors[net]:
            groups[-1].append(net)
        else:
            groups.append([net])

    n_perms = 1
    for g in groups:
        for i in range(2, len(g) + 1):
            n_perms *= i
    if n_perms > _MAX_TIE_PERMS:
        raise PermuteError("too many symmetric internal nets to canonicalize")

    base_label = {n: n for n, r in nets.items() if r.kind is not NetKind.INTERNAL}

    def assign(order: list[str]) -> dict[str, str]:
        label = dict(base_label)
        for i, net in enumerate(order, start=1):
            label[net] = f"@{i}"
        return label

    best: list[tuple] | None = None
    def rec(idx: int, order: list[str]):
        nonlocal best
        if idx == len(groups):
            rows = _canonical_device_rows(cell, assign(order))
            if best is None or rows < best:
                best = rows
            return
        group = groups[idx]
        if len(group) == 1:
            rec(idx + 1, order + group)
            return
        for perm in permutations(group):
            rec(idx + 1, order + list(perm))

    rec(0, [])
    assert best is not None
    pin_part = ";".join(f"{p.name}:{p.kind.value}" for p in sorted(cell.pins))
    dev_part = ";".join(",".join(map(str, row)) for row in best)
    return pin_part + "|" + dev_part


def canonical_hash(cell: CellNetlist) -> int:
    """64-bit digest of the canonical form: equal for structurally identical
    cells regardless of device order or internal-net names."""
    blob = canonical_form(cell).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big")
