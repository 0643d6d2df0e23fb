"""Routability reward signals.

Two scorers share one interface: a trainable edge-conditioned graph network
over the cell's net graph (two directed gate->terminal edges per transistor,
message weights looked up by edge category), and a deterministic diffusion
proxy that counts the minimal number of diffusion gaps over single-row
device orderings of both pull networks under a common gate-column order.
A frozen lookup table keyed by canonical hash rounds out the set for tests
and replayed training runs.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from itertools import permutations

import numpy as np

from .netlist import CellNetlist, Device, DeviceType, NetKind
from .permute import canonical_hash


MODEL_FORMAT_VERSION = 1

NODE_KIND_IDS = {
    NetKind.POWER: 0,
    NetKind.GROUND: 1,
    NetKind.INPUT: 2,
    NetKind.OUTPUT: 3,
    NetKind.INTERNAL: 4,
}
N_NODE_KINDS = 5


class RewardError(Exception):
    pass


class ShapeMismatchError(RewardError):
    pass


class DegenerateDataError(RewardError):
    pass


class TooLargeError(RewardError):
    pass


class MissingTableEntryError(RewardError):
    pass


# -----------------------------
# Graph encoding
# -----------------------------

class Conn(IntEnum):
    """Directed terminal relation of a gate->terminal edge, with rail
    adjacency folded in."""
    GATE_TO_DRAIN = 0
    GATE_TO_SOURCE = 1
    GATE_TO_DRAIN_POWER = 2
    GATE_TO_SOURCE_POWER = 3
    GATE_TO_DRAIN_GROUND = 4
    GATE_TO_SOURCE_GROUND = 5


N_EDGE_CATEGORIES = 2 * len(Conn)  # device type x terminal relation


def edge_category(dtype: DeviceType, terminal_kind: NetKind, is_drain: bool) -> int:
    if terminal_kind is NetKind.POWER:
        conn = Conn.GATE_TO_DRAIN_POWER if is_drain else Conn.GATE_TO_SOURCE_POWER
    elif terminal_kind is NetKind.GROUND:
        conn = Conn.GATE_TO_DRAIN_GROUND if is_drain else Conn.GATE_TO_SOURCE_GROUND
    else:
        conn = Conn.GATE_TO_DRAIN if is_drain else Conn.GATE_TO_SOURCE
    base = 0 if dtype is DeviceType.PMOS else len(Conn)
    return base + int(conn)


@dataclass(frozen=True)
class CellGraph:
    node_names: tuple[str, ...]
    node_kinds: tuple[int, ...]                    # kind id per node
    edges: tuple[tuple[int, int, int], ...]        # (src, dst, category)
    in_edges: tuple[tuple[tuple[int, int], ...], ...]  # per dst: (src, category)

    @property
    def n_nodes(self) -> int:
        return len(self.node_names)


def encode_cell_graph(cell: CellNetlist) -> CellGraph:
    """Nets become nodes (ordered by name); each transistor contributes the
    directed edges gate->drain and gate->source tagged with its type and
    terminal relation."""
    nets = cell.nets()
    names = tuple(sorted(nets))
    index = {n: i for i, n in enumerate(names)}
    kinds = tuple(NODE_KIND_IDS[nets[n].kind] for n in names)

    edges = []
    for d in cell.devices:
        g = index[d.gate.name]
        for terminal, is_drain in ((d.drain, True), (d.source, False)):
            cat = edge_category(d.dtype, terminal.kind, is_drain)
            edges.append((g, index[terminal.name], cat))

    incoming: list[list[tuple[int, int]]] = [[] for _ in names]
    for src, dst, cat in edges:
        incoming[dst].append((src, cat))
    return CellGraph(names, kinds, tuple(edges),
                     tuple(tuple(lst) for lst in incoming))


# -----------------------------
# Edge-conditioned message passing
# -----------------------------

@dataclass
class GnnParams:
    node_embed: np.ndarray   # [5, d]
    edge_weight: np.ndarray  # [K, 12, d, d]
    readout: np.ndarray      # [d]
    bias: float

    @property
    def d(self) -> int:
        return self.node_embed.shape[1]

    @property
    def k_layers(self) -> int:
        return self.edge_weight.shape[0]

    def check_shapes(self):
        d, k = self.d, self.k_layers
        ok = (self.node_embed.shape == (N_NODE_KINDS, d)
              and self.edge_weight.shape == (k, N_EDGE_CATEGORIES, d, d)
              and self.readout.shape == (d,))
        if not ok:
            raise ShapeMismatchError(
                f"inconsistent parameter shapes: {self.node_embed.shape}, "
                f"{self.edge_weight.shape}, {self.readout.shape}")
        for arr in (self.node_embed, self.edge_weight, self.readout):
            if not np.all(np.isfinite(arr)):
                raise ShapeMismatchError("non-finite parameter values")

    def zeros_like(self) -> "GnnParams":
        return GnnParams(np.zeros_like(self.node_embed),
                         np.zeros_like(self.edge_weight),
                         np.zeros_like(self.readout), 0.0)

    def copy(self) -> "GnnParams":
        return GnnParams(self.node_embed.copy(), self.edge_weight.copy(),
                         self.readout.copy(), float(self.bias))


def init_params(d: int = 16, k_layers: int = 3, seed: int = 0,
                scale: float = 0.2) -> GnnParams:
    rng = np.random.default_rng(seed)
    return GnnParams(
        node_embed=scale * rng.standard_normal((N_NODE_KINDS, d)),
        edge_weight=scale * rng.standard_normal((k_layers, N_EDGE_CATEGORIES, d, d)),
        readout=scale * rng.standard_normal(d),
        bias=0.0,
    )


def _forward_pass(graph: CellGraph, params: GnnParams):
    """Returns (logit, cached per-layer activations and pre-activations)."""
    params.check_shapes()
    n, d = graph.n_nodes, params.d
    h = np.asarray(params.node_embed)[list(graph.node_kinds)]
    layers = [h]
    pres = []
    for k in range(params.k_layers):
        pre = np.zeros((n, d))
        for v in range(n):
            incoming = graph.in_edges[v]
            if not incoming:
                continue
            acc = np.zeros(d)
            for src, cat in incoming:
                acc += params.edge_weight[k, cat] @ h[src]
            pre[v] = acc / len(incoming)
        h = np.maximum(pre, 0.0)
        pres.append(pre)
        layers.append(h)
    pooled = layers[-1].mean(axis=0)
    logit = float(params.readout @ pooled + params.bias)
    return logit, layers, pres


def gnn_forward(graph: CellGraph, params: GnnParams) -> float:
    """Mean-aggregated edge-conditioned message passing, mean readout, one
    logit.  Empty in-neighborhoods contribute a zero pre-activation."""
    logit, _, _ = _forward_pass(graph, params)
    return logit


def margin_loss(y_hat: float, y: int) -> float:
    return max(0.0, 1.0 - y * y_hat)


def gnn_gradients(graph: CellGraph, params: GnnParams, y: int) -> GnnParams:
    """Exact reverse-mode gradient of margin_loss(gnn_forward(graph), y)
    for every tensor; the hinge and relu subgradients at 0 are 0."""
    if y not in (-1, 1):
        raise ValueError("label must be -1 or +1")
    logit, layers, pres = _forward_pass(graph, params)
    grad = params.zeros_like()
    if 1.0 - y * logit <= 0.0:
        return grad

    n, d = graph.n_nodes, params.d
    dlogit = -float(y)
    grad.readout += dlogit * layers[-1].mean(axis=0)
    grad.bias += dlogit
    dh = np.tile(dlogit * params.readout / n, (n, 1))

    for k in reversed(range(params.k_layers)):
        dpre = dh * (pres[k] > 0.0)
        h_prev = layers[k]
        dh = np.zeros((n, d))
        for v in range(n):
            incoming = graph.in_edges[v]
            if not incoming:
                continue
            scaled = dpre[v] / len(incoming)
            for src, cat in incoming:
                grad.edge_weight[k, cat] += np.outer(scaled, h_prev[src])
                dh[src] += params.edge_weight[k, cat].T @ scaled
        if k == 0:
            for v in range(n):
                grad.node_embed[graph.node_kinds[v]] += dh[v]
    return grad


@dataclass
class GnnTrainConfig:
    d: int = 16
    k_layers: int = 3
    lr: float = 1e-2
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    init_scale: float = 0.2


@dataclass
class TrainedRewardModel:
    params: GnnParams
    history: list[tuple[int, float, float]]  # (epoch, mean loss, train accuracy)

    @property
    def final_accuracy(self) -> float:
        return self.history[-1][2]


def train_reward_model(records: list[tuple[CellGraph, int]],
                       config: GnnTrainConfig | None = None) -> TrainedRewardModel:
    """Mini-batch gradient descent on the margin loss; deterministic for a
    fixed seed.  ``records`` pairs graphs with labels in {-1, +1}."""
    config = config or GnnTrainConfig()
    labels = {y for _, y in records}
    if labels - {-1, 1}:
        raise ValueError(f"labels must be -1/+1, got {sorted(labels)}")
    if len(labels) < 2:
        raise DegenerateDataError("training needs both labels present")

    rng = np.random.default_rng(config.seed)
    params = init_params(config.d, config.k_layers, seed=config.seed,
                         scale=config.init_scale)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(records))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            acc = params.zeros_like()
            for i in batch:
                graph, y = records[i]
                g = gnn_gradients(graph, params, y)
                acc.node_embed += g.node_embed
                acc.edge_weight += g.edge_weight
                acc.readout += g.readout
                acc.bias += g.bias
            scale = config.lr / len(batch)
            params.node_embed -= scale * acc.node_embed
            params.edge_weight -= scale * acc.edge_weight
            params.readout -= scale * acc.readout
            params.bias -= scale * acc.bias

        losses = []
        correct = 0
        for graph, y in records:
            y_hat = gnn_forward(graph, params)
            losses.append(margin_loss(y_hat, y))
            correct += (y_hat > 0) == (y > 0)
        history.append((epoch, float(np.mean(losses)), correct / len(records)))
    return TrainedRewardModel(params, history)


def save_model(params: GnnParams, path: str):
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "d": params.d,
        "k_layers": params.k_layers,
        "node_embed": params.node_embed.tolist(),
        "edge_weight": params.edge_weight.tolist(),
        "readout": params.readout.tolist(),
        "bias": params.bias,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_model(path: str) -> GnnParams:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unknown model format_version {doc.get('format_version')!r}")
    params = GnnParams(
        node_embed=np.asarray(doc["node_embed"], dtype=float),
        edge_weight=np.asarray(doc["edge_weight"], dtype=float),
        readout=np.asarray(doc["readout"], dtype=float),
        bias=float(doc["bias"]),
    )
    params.check_shapes()
    return params


# -----------------------------
# Diffusion-break proxy
# -----------------------------

EXHAUSTIVE_LIMIT = 8
HARD_LIMIT = 12
_PAIRING_LIMIT = 1000


@dataclass(frozen=True)
class ProxyScore:
    breaks: int
    score: float

    @property
    def routable(self) -> bool:
        return self.breaks == 0


def pull_network_devices(cell: CellNetlist) -> list[Device]:
    """Devices of the pull-up/pull-down networks proper: those on channel
    paths from the output pin, with the rails as path boundaries.  Auxiliary
    stages (input inverters) are excluded."""
    power = cell.power_net().name
    ground = cell.ground_net().name
    outputs = cell.output_pins()
    if len(outputs) != 1:
        raise ValueError(f"{cell.cell_name}: need exactly one output pin")
    adjacency: dict[str, list[tuple[Device, str]]] = {}
    for d in cell.devices:
        adjacency.setdefault(d.drain.name, []).append((d, d.source.name))
        adjacency.setdefault(d.source.name, []).append((d, d.drain.name))
    seen_nets = {outputs[0].name}
    seen_devices: set[str] = set()
    queue = deque([outputs[0].name])
    while queue:
        net = queue.popleft()
        for dev, other in adjacency.get(net, ()):
            if dev.name in seen_devices:
                continue
            seen_devices.add(dev.name)
            if other not in (power, ground) and other not in seen_nets:
                seen_nets.add(other)
                queue.append(other)
    return [d for d in cell.devices if d.name in seen_devices]


def _gate_columns(pmos: list[Device], nmos: list[Device],
                  cell_name: str) -> list[list[tuple[Device, Device]]]:
    """Candidate pairings of PMOS/NMOS devices into shared gate columns."""
    if len(pmos) != len(nmos):
        raise ValueError(
            f"{cell_name}: PMOS/NMOS counts differ ({len(pmos)} vs {len(nmos)})")

    p_by_gate: dict[str, list[Device]] = {}
    n_by_gate: dict[str, list[Device]] = {}
    for d in pmos:
        p_by_gate.setdefault(d.gate.name, []).append(d)
    for d in nmos:
        n_by_gate.setdefault(d.gate.name, []).append(d)
    if {g: len(v) for g, v in p_by_gate.items()} != {g: len(v) for g, v in n_by_gate.items()}:
        raise ValueError(f"{cell_name}: gate multisets differ between networks")

    total = 1
    for devs in p_by_gate.values():
        for i in range(2, len(devs) + 1):
            total *= i
    gates = sorted(p_by_gate)

    if total > _PAIRING_LIMIT:
        pairing = [(p, n) for g in gates
                   for p, n in zip(p_by_gate[g], n_by_gate[g])]
        return [pairing]

    pairings: list[list[tuple[Device, Device]]] = [[]]
    for g in gates:
        new = []
        for base in pairings:
            for perm in permutations(n_by_gate[g]):
                new.append(base + list(zip(p_by_gate[g], perm)))
        pairings = new
    return pairings


def _min_breaks_for_pairing(columns: list[tuple[Device, Device]]) -> int:
    """Minimal diffusion gaps over all column orders and orientations via
    iterative deepening with memoized best-so-far per state."""
    m = len(columns)
    if m <= 1:
        return 0
    p_nets = [(c[0].drain.name, c[0].source.name) for c in columns]
    n_nets = [(c[1].drain.name, c[1].source.name) for c in columns]

    full = (1 << m) - 1
    for budget in range(2 * m + 1):
        best_seen: dict[tuple, int] = {}
        stack = []
        for first in range(m):
            pa, pb = p_nets[first]
            na, nb = n_nets[first]
            for pr in (pa, pb):
                for nr in (na, nb):
                    stack.append((1 << first, first, pr, nr, 0))
        found = False
        while stack:
            mask, last, pr, nr, spent = stack.pop()
            if spent > budget:
                continue
            key = (mask, last, pr, nr)
            prev = best_seen.get(key)
            if prev is not None and prev <= spent:
                continue
            best_seen[key] = spent
            if mask == full:
                found = True
                break
            for nxt in range(m):
                if mask & (1 << nxt):
                    continue
                for new_pr, cost_p in _exposed_options(p_nets[nxt], pr):
                    for new_nr, cost_n in _exposed_options(n_nets[nxt], nr):
                        total = spent + cost_p + cost_n
                        if total <= budget:
                            stack.append((mask | (1 << nxt), nxt, new_pr, new_nr, total))
        if found:
            return budget
    return 2 * m  # unreachable


def _exposed_options(nets: tuple[str, str], right: str) -> list[tuple[str, int]]:
    """Ways to append a device after an exposed net: (new exposed net, gap)."""
    a, b = nets
    shares = []
    if right == a:
        shares.append((b, 0))
    if right == b:
        shares.append((a, 0))
    return shares or [(a, 1), (b, 1)]


def _greedy_breaks(columns: list[tuple[Device, Device]]) -> int:
    """Deterministic greedy chaining: best over all starting columns,
    preferring extensions that keep both rows sharing diffusion."""
    m = len(columns)
    if m <= 1:
        return 0
    p_nets = [(c[0].drain.name, c[0].source.name) for c in columns]
    n_nets = [(c[1].drain.name, c[1].source.name) for c in columns]

    def run(first: int, pr0: str, nr0: str) -> int:
        placed = {first}
        pr, nr = pr0, nr0
        breaks = 0
        while len(placed) < m:
            best = None
            for nxt in range(m):
                if nxt in placed:
                    continue
                for new_pr, cp in _exposed_options(p_nets[nxt], pr):
                    for new_nr, cn in _exposed_options(n_nets[nxt], nr):
                        cand = (cp + cn, nxt, new_pr, new_nr)
                        if best is None or cand < best:
                            best = cand
            cost, nxt, pr, nr = best[0], best[1], best[2], best[3]
            breaks += cost
            placed.add(nxt)
        return breaks

    best = 2 * m
    for first in range(m):
        pa, pb = p_nets[first]
        na, nb = n_nets[first]
        for pr in (pa, pb):
            for nr in (na, nb):
                best = min(best, run(first, pr, nr))
    return best


def proxy_score(cell: CellNetlist, mode: str = "auto") -> ProxyScore:
    """Diffusion-break proxy: ``breaks`` is the minimal number of diffusion
    gaps over single-row orderings of the two pull networks sharing one gate
    column order; ``score`` is -breaks.  Input-inverter stages sit outside
    the pull networks and do not contribute (their gaps are invariant under
    topology swaps).  ``mode`` is "auto" (exact up to 8 devices per network,
    greedy beyond), "exhaustive" (exact, <= 12) or "greedy"."""
    if mode not in ("auto", "exhaustive", "greedy"):
        raise ValueError(f"unknown proxy mode {mode!r}")
    stage = pull_network_devices(cell)
    pmos = [d for d in stage if d.dtype is DeviceType.PMOS]
    nmos = [d for d in stage if d.dtype is DeviceType.NMOS]
    m = len(pmos)
    if mode == "exhaustive" and m > HARD_LIMIT:
        raise TooLargeError(
            f"{m} devices per network exceeds the exhaustive limit {HARD_LIMIT}")
    exact = mode == "exhaustive" or (mode == "auto" and m <= EXHAUSTIVE_LIMIT)

    pairings = _gate_columns(pmos, nmos, cell.cell_name)
    if not exact:
        pairings = pairings[:1]
    best = None
    for columns in pairings:
        breaks = _min_breaks_for_pairing(columns) if exact else _greedy_breaks(columns)
        if best is None or breaks < best:
            best = breaks
        if best == 0:
            break
    return ProxyScore(best, -float(best))


# -----------------------------
# Reward sources
# -----------------------------

@dataclass(frozen=True)
class GnnReward:
    params: GnnParams


@dataclass(frozen=True)
class ProxyReward:
    mode: str = "auto"


@dataclass(frozen=True)
class TableReward:
    table: dict[int, float]


RewardSource = GnnReward | ProxyReward | TableReward


def reward_of(source: RewardSource, cell: CellNetlist) -> float:
    if isinstance(source, GnnReward):
        return gnn_forward(encode_cell_graph(cell), source.params)
    if isinstance(source, ProxyReward):
        return proxy_score(cell, mode=source.mode).score
    if isinstance(source, TableReward):
        key = canonical_hash(cell)
        if key not in source.table:
            raise MissingTableEntryError(f"no table entry for {cell.cell_name} ({key:#x})")
        return source.table[key]
    raise TypeError(f"unknown reward source {source!r}")
