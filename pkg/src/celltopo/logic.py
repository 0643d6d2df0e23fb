"""Boolean functions and their static CMOS realizations.

The pipeline is: truth table -> canonical sum of products -> two-level
minimization (Quine-McCluskey with a greedy cover) -> multi-level factoring
by repeated division with the most frequent literal -> complementary CMOS
netlist.  A deterministic switch-level simulator closes the loop by checking
every synthesized or transformed cell against its truth table.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from itertools import permutations

from .netlist import (
    CellNetlist, Device, DeviceType, NetKind, NetRef,
)


INPUT_NAMES = "ABCDEF"
OUTPUT_NAME = "Y"
MAX_INPUTS = 6


class LogicError(Exception):
    pass


class TrivialFunctionError(LogicError):
    pass


class UnsupportedExprError(LogicError):
    pass


class UnresolvedGateError(LogicError):
    pass


# -----------------------------
# Truth tables
# -----------------------------

@dataclass(frozen=True, order=True)
class TruthTable:
    """Semantics of an n-input single-output function.

    Bit i of ``bits`` is the output for input assignment i, where input 0
    is the least significant position of the assignment index.
    """
    n_inputs: int
    bits: int

    def __post_init__(self):
        if not 1 <= self.n_inputs <= MAX_INPUTS:
            raise ValueError(f"n_inputs must be in [1, {MAX_INPUTS}]")
        if not 0 <= self.bits < (1 << (1 << self.n_inputs)):
            raise ValueError("bits out of range for table width")

    @property
    def n_rows(self) -> int:
        return 1 << self.n_inputs

    def value(self, assignment: int) -> int:
        return (self.bits >> assignment) & 1

    @property
    def is_trivial(self) -> bool:
        return self.bits == 0 or self.bits == (1 << self.n_rows) - 1

    def complement(self) -> "TruthTable":
        return TruthTable(self.n_inputs, self.bits ^ ((1 << self.n_rows) - 1))

    def to_text(self) -> str:
        width = max(1, self.n_rows // 4)
        return f"{self.n_inputs}:{self.bits:0{width}X}"

    @classmethod
    def from_text(cls, text: str) -> "TruthTable":
        try:
            n_str, hex_str = text.split(":")
            return cls(int(n_str), int(hex_str, 16))
        except ValueError as exc:
            raise ValueError(f"bad truth-table spec {text!r} (want <n>:<hex>)") from exc


# -----------------------------
# Expressions (negation-normal form)
# -----------------------------

@dataclass(frozen=True)
class Lit:
    var: int
    positive: bool = True


@dataclass(frozen=True)
class And:
    children: tuple

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("And needs >= 2 children")


@dataclass(frozen=True)
class Or:
    children: tuple

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("Or needs >= 2 children")


@dataclass(frozen=True)
class Const:
    value: int


BoolExpr = Lit | And | Or | Const


def make_and(children) -> BoolExpr:
    flat = []
    for c in children:
        if isinstance(c, Const):
            if c.value == 0:
                return Const(0)
            continue
        if isinstance(c, And):
            flat.extend(c.children)
        else:
            flat.append(c)
    if not flat:
        return Const(1)
    if len(flat) == 1:
        return flat[0]
    return And(tuple(flat))


def make_or(children) -> BoolExpr:
    flat = []
    for c in children:
        if isinstance(c, Const):
            if c.value == 1:
                return Const(1)
            continue
        if isinstance(c, Or):
            flat.extend(c.children)
        else:
            flat.append(c)
    if not flat:
        return Const(0)
    if len(flat) == 1:
        return flat[0]
    return Or(tuple(flat))


def eval_expr(expr: BoolExpr, assignment: int) -> int:
    if isinstance(expr, Lit):
        bit = (assignment >> expr.var) & 1
        return bit if expr.positive else bit ^ 1
    if isinstance(expr, And):
        return int(all(eval_expr(c, assignment) for c in expr.children))
    if isinstance(expr, Or):
        return int(any(eval_expr(c, assignment) for c in expr.children))
    return expr.value


def expr_vars(expr: BoolExpr) -> set[int]:
    if isinstance(expr, Lit):
        return {expr.var}
    if isinstance(expr, (And, Or)):
        out: set[int] = set()
        for c in expr.children:
            out |= expr_vars(c)
        return out
    return set()


def literal_count(expr: BoolExpr) -> int:
    if isinstance(expr, Lit):
        return 1
    if isinstance(expr, (And, Or)):
        return sum(literal_count(c) for c in expr.children)
    return 0


def contains_const(expr: BoolExpr) -> bool:
    if isinstance(expr, Const):
        return True
    if isinstance(expr, (And, Or)):
        return any(contains_const(c) for c in expr.children)
    return False


def expr_to_table(expr: BoolExpr, n_inputs: int) -> TruthTable:
    bits = 0
    for a in range(1 << n_inputs):
        bits |= eval_expr(expr, a) << a
    return TruthTable(n_inputs, bits)


def _minterm_expr(minterm: int, n: int) -> BoolExpr:
    lits = [Lit(v, positive=bool((minterm >> v) & 1)) for v in range(n)]
    return make_and(lits)


def table_to_sop(tt: TruthTable) -> BoolExpr:
    """Canonical SOP: one product per 1-minterm, ascending minterm order."""
    if tt.is_trivial:
        raise TrivialFunctionError(f"table {tt.to_text()} is constant")
    terms = [_minterm_expr(m, tt.n_inputs) for m in range(tt.n_rows) if tt.value(m)]
    return make_or(terms)


# -----------------------------
# Quine-McCluskey minimization
# -----------------------------

@dataclass(frozen=True, order=True)
class Implicant:
    """A cube over n variables: ``mask`` bits mark fixed variables and
    ``value`` holds their values (zero wherever mask is zero)."""
    value: int
    mask: int

    def __post_init__(self):
        if self.value & ~self.mask:
            raise ValueError("value bits outside mask")

    def covers(self, minterm: int) -> bool:
        return (minterm & self.mask) == self.value

    def n_literals(self) -> int:
        return bin(self.mask).count("1")


def prime_implicants(on_set: list[int], n: int) -> list[Implicant]:
    full = (1 << n) - 1
    level = {Implicant(m, full) for m in on_set}
    primes: set[Implicant] = set()
    while level:
        merged: set[Implicant] = set()
        next_level: set[Implicant] = set()
        items = sorted(level)
        by_mask: dict[int, list[Implicant]] = {}
        for imp in items:
            by_mask.setdefault(imp.mask, []).append(imp)
        for mask, group in by_mask.items():
            values = {imp.value for imp in group}
            for imp in group:
                for bit_pos in range(n):
                    bit = 1 << bit_pos
                    if not mask & bit:
                        continue
                    other = imp.value ^ bit
                    if other in values and imp.value < other:
                        next_level.add(Implicant(imp.value & ~bit, mask & ~bit))
                        merged.add(imp)
                        merged.add(Implicant(other, mask))
        primes |= level - merged
        level = next_level
    return sorted(primes)


def _greedy_cover(primes: list[Implicant], on_set: list[int]) -> list[Implicant]:
    uncovered = set(on_set)
    chosen: list[Implicant] = []

    # Essential primes first.
    changed = True
    while changed and uncovered:
        changed = False
        for m in sorted(uncovered):
            covering = [p for p in primes if p.covers(m)]
            if len(covering) == 1:
                p = covering[0]
                if p not in chosen:
                    chosen.append(p)
                uncovered -= {x for x in uncovered if p.covers(x)}
                changed = True
                break

    # Greedy fill: max new coverage, fewer literals, then cube order.
    while uncovered:
        best = max(
            primes,
            key=lambda p: (len([m for m in uncovered if p.covers(m)]),
                           -p.n_literals(), (-p.value, -p.mask)),
        )
        gain = [m for m in uncovered if best.covers(m)]
        if not gain:
            raise LogicError("prime cover failed")  # unreachable for valid input
        chosen.append(best)
        uncovered -= set(gain)
    return sorted(chosen)


def _implicant_expr(imp: Implicant, n: int) -> BoolExpr:
    lits = [Lit(v, positive=bool((imp.value >> v) & 1))
            for v in range(n) if (imp.mask >> v) & 1]
    return make_and(lits)


def minimize_sop(expr: BoolExpr) -> BoolExpr:
    """Two-level minimization: prime implicants plus a greedy cover."""
    variables = expr_vars(expr)
    if not variables:
        return expr
    n = max(variables) + 1
    on_set = [a for a in range(1 << n) if eval_expr(expr, a)]
    if not on_set:
        return Const(0)
    if len(on_set) == 1 << n:
        return Const(1)
    primes = prime_implicants(on_set, n)
    cover = _greedy_cover(primes, on_set)
    return make_or([_implicant_expr(p, n) for p in cover])


# -----------------------------
# Factoring by most-frequent-literal division
# -----------------------------

Cube = tuple  # tuple of (var, positive) pairs, ordered by (var, phase)


def _expr_to_cubes(expr: BoolExpr) -> list[Cube]:
    def cube_of(term: BoolExpr) -> Cube:
        if isinstance(term, Lit):
            lits = [(term.var, term.positive)]
        elif isinstance(term, And):
            lits = []
            for c in term.children:
                if not isinstance(c, Lit):
                    raise ValueError("not a flat SOP")
                lits.append((c.var, c.positive))
        else:
            raise ValueError("not a flat SOP")
        return tuple(sorted(lits, key=lambda lv: (lv[0], not lv[1])))

    if isinstance(expr, Or):
        return [cube_of(t) for t in expr.children]
    return [cube_of(expr)]


def _factor_cubes(cubes: list[Cube]) -> BoolExpr:
    if not cubes:
        return Const(0)
    if any(len(c) == 0 for c in cubes):
        return Const(1)
    if len(cubes) == 1:
        return make_and([Lit(v, pos) for v, pos in cubes[0]])

    counts: dict[tuple[int, bool], int] = {}
    for cube in cubes:
        for lit in cube:
            counts[lit] = counts.get(lit, 0) + 1
    # Most frequent literal; ties prefer the lowest variable, positive first.
    best = min(counts, key=lambda lv: (-counts[lv], lv[0], not lv[1]))
    if counts[best] < 2:
        terms = [make_and([Lit(v, pos) for v, pos in cube]) for cube in cubes]
        return make_or(terms)

    quotient = [tuple(l for l in cube if l != best) for cube in cubes if best in cube]
    remainder = [cube for cube in cubes if best not in cube]
    var, pos = best
    factored = make_and([Lit(var, pos), _factor_cubes(quotient)])
    if remainder:
        return make_or([factored, _factor_cubes(remainder)])
    return factored


def factor_expr(expr: BoolExpr) -> BoolExpr:
    """Multi-level factored form by recursive most-frequent-literal division."""
    if isinstance(expr, Const):
        return expr
    return _factor_cubes(_expr_to_cubes(expr))


def factored_form(tt: TruthTable) -> BoolExpr:
    return factor_expr(minimize_sop(table_to_sop(tt)))


# -----------------------------
# Complementary CMOS synthesis
# -----------------------------

def synth_cell(name: str, expr: BoolExpr, tt: TruthTable) -> CellNetlist:
    """Build a single-stage static CMOS cell computing ``tt`` at pin Y.

    The output is realized as the complement of a pull-down function g,
    where g is the factored form of the table's complement: And maps to a
    series NMOS group, Or to a parallel group, and the PMOS pull-up is the
    series/parallel dual.  Negated inputs are driven by shared two-transistor
    input inverters.  Devices come out already drain-up oriented.
    """
    if contains_const(expr):
        raise UnsupportedExprError("constant nodes cannot be synthesized")
    if tt.is_trivial:
        raise TrivialFunctionError(f"table {tt.to_text()} is constant")
    if expr_to_table(expr, tt.n_inputs) != tt:
        raise ValueError("expression does not match the truth table")

    n = tt.n_inputs
    g = factored_form(tt.complement())

    power = NetRef("VDD", NetKind.POWER)
    ground = NetRef("GND", NetKind.GROUND)
    out = NetRef(OUTPUT_NAME, NetKind.OUTPUT)
    inputs = [NetRef(INPUT_NAMES[v], NetKind.INPUT) for v in range(n)]

    inverted_vars = sorted({l[0] for cube in _expr_to_cubes_safe(g) for l in cube if not l[1]})
    inv_nets = {v: NetRef(INPUT_NAMES[v] + "N", NetKind.INTERNAL) for v in inverted_vars}

    def gate_net(lit: Lit) -> NetRef:
        return inputs[lit.var] if lit.positive else inv_nets[lit.var]

    counter = [0]

    def fresh_net() -> NetRef:
        counter[0] += 1
        return NetRef(f"N{counter[0]}", NetKind.INTERNAL)

    def build(node: BoolExpr, top: NetRef, bottom: NetRef,
              and_is_series: bool, sink: list[tuple[NetRef, NetRef, NetRef]]):
        if isinstance(node, Lit):
            sink.append((top, gate_net(node), bottom))
            return
        series = (isinstance(node, And) and and_is_series) or \
                 (isinstance(node, Or) and not and_is_series)
        if series:
            cur = top
            for i, child in enumerate(node.children):
                nxt = bottom if i == len(node.children) - 1 else fresh_net()
                build(child, cur, nxt, and_is_series, sink)
                cur = nxt
        else:
            for child in node.children:
                build(child, top, bottom, and_is_series, sink)

    nmos_edges: list[tuple[NetRef, NetRef, NetRef]] = []
    build(g, out, ground, True, nmos_edges)       # pull-down: And=series
    pmos_edges: list[tuple[NetRef, NetRef, NetRef]] = []
    build(g, power, out, False, pmos_edges)       # pull-up dual: Or=series

    devices: list[Device] = []
    p_idx = n_idx = 0
    for top, gate, bottom in pmos_edges:
        p_idx += 1
        devices.append(Device(f"MP{p_idx}", DeviceType.PMOS, top, gate, bottom, power))
    for v in inverted_vars:
        p_idx += 1
        devices.append(Device(f"MP{p_idx}", DeviceType.PMOS, power, inputs[v], inv_nets[v], power))
    nmos_block: list[Device] = []
    for top, gate, bottom in nmos_edges:
        n_idx += 1
        nmos_block.append(Device(f"MN{n_idx}", DeviceType.NMOS, top, gate, bottom, ground))
    for v in inverted_vars:
        n_idx += 1
        nmos_block.append(Device(f"MN{n_idx}", DeviceType.NMOS, inv_nets[v], inputs[v], ground, ground))
    devices.extend(nmos_block)

    pins = tuple(inputs) + (out, power, ground)
    return CellNetlist(name.upper(), pins, tuple(devices))


def _expr_to_cubes_safe(expr: BoolExpr) -> list[Cube]:
    """Literal occurrences of an arbitrary NNF expression as pseudo-cubes."""
    if isinstance(expr, Lit):
        return [((expr.var, expr.positive),)]
    if isinstance(expr, (And, Or)):
        out = []
        for c in expr.children:
            out.extend(_expr_to_cubes_safe(c))
        return out
    return []


# -----------------------------
# Switch-level simulation
# -----------------------------

class LogicValue(Enum):
    ZERO = 0
    ONE = 1
    X = "X"


@dataclass(frozen=True)
class EquivReport:
    passed: bool
    failures: tuple[tuple[int, int, str], ...]  # (assignment, expected, got)


class _SwitchSim:
    """Per-cell simulator state: stage cones and their evaluation order."""

    def __init__(self, cell: CellNetlist):
        self.cell = cell
        self.power = cell.power_net().name
        self.ground = cell.ground_net().name
        outs = cell.output_pins()
        if len(outs) != 1:
            raise UnresolvedGateError("simulation needs exactly one output pin")
        self.out = outs[0].name
        self.inputs = [p.name for p in cell.input_pins()]

        self.adj: dict[str, list[tuple[Device, str]]] = {}
        for d in cell.devices:
            a, b = d.drain.name, d.source.name
            self.adj.setdefault(a, []).append((d, b))
            self.adj.setdefault(b, []).append((d, a))

        known = set(self.inputs) | {self.power, self.ground}
        gate_nets = {d.gate.name for d in cell.devices}
        stage_nets = sorted((gate_nets | {self.out}) - known)

        self.cones: dict[str, list[Device]] = {}
        deps: dict[str, set[str]] = {}
        for net in stage_nets:
            cone = self._cone(net)
            if not cone:
                raise UnresolvedGateError(f"net {net} has no driving devices")
            self.cones[net] = cone
            deps[net] = {d.gate.name for d in cone} & set(stage_nets)

        self.order: list[str] = []
        ready = deque(sorted(n for n in stage_nets if not deps[n]))
        remaining = {n: set(d) for n, d in deps.items()}
        while ready:
            net = ready.popleft()
            self.order.append(net)
            for other in stage_nets:
                if net in remaining.get(other, ()):
                    remaining[other].discard(net)
                    if not remaining[other]:
                        ready.append(other)
        if len(self.order) != len(stage_nets):
            cyclic = sorted(set(stage_nets) - set(self.order))
            raise UnresolvedGateError(f"cyclic or pass-gate structure at {cyclic}")

    def _cone(self, net: str) -> list[Device]:
        seen_nets = {net}
        cone: list[Device] = []
        seen_devs: set[str] = set()
        queue = deque([net])
        while queue:
            u = queue.popleft()
            for dev, other in self.adj.get(u, ()):
                if dev.name in seen_devs:
                    continue
                seen_devs.add(dev.name)
                cone.append(dev)
                if other not in (self.power, self.ground) and other not in seen_nets:
                    seen_nets.add(other)
                    queue.append(other)
        return sorted(cone, key=lambda d: d.name)

    def run(self, assignment: int) -> LogicValue:
        values: dict[str, LogicValue] = {
            self.power: LogicValue.ONE, self.ground: LogicValue.ZERO}
        for i, name in enumerate(self.inputs):
            values[name] = LogicValue.ONE if (assignment >> i) & 1 else LogicValue.ZERO
        for net in self.order:
            values[net] = self._eval_stage(net, values)
        return values[self.out]

    def _conducts(self, dev: Device, values: dict[str, LogicValue]) -> bool | None:
        g = values.get(dev.gate.name)
        if g is None or g is LogicValue.X:
            return None
        if dev.dtype is DeviceType.PMOS:
            return g is LogicValue.ZERO
        return g is LogicValue.ONE

    def _eval_stage(self, net: str, values: dict[str, LogicValue]) -> LogicValue:
        cone_names = {d.name for d in self.cones[net]}
        for d in self.cones[net]:
            if self._conducts(d, values) is None:
                return LogicValue.X

        def reaches(target: str) -> bool:
            seen = {net}
            queue = deque([net])
            while queue:
                u = queue.popleft()
                for dev, other in self.adj.get(u, ()):
                    if dev.name not in cone_names or not self._conducts(dev, values):
                        continue
                    if other == target:
                        return True
                    if other in (self.power, self.ground):
                        continue
                    if other not in seen:
                        seen.add(other)
                        queue.append(other)
            return False

        up = reaches(self.power)
        down = reaches(self.ground)
        if up and not down:
            return LogicValue.ONE
        if down and not up:
            return LogicValue.ZERO
        return LogicValue.X


def switch_sim(cell: CellNetlist, assignment: int) -> LogicValue:
    """Evaluate the cell output for one input assignment (bit i of
    ``assignment`` drives the i-th input pin)."""
    sim = _SwitchSim(cell)
    if not 0 <= assignment < (1 << len(sim.inputs)):
        raise ValueError("assignment out of range for input-pin count")
    return sim.run(assignment)


def equiv_check(cell: CellNetlist, tt: TruthTable) -> EquivReport:
    """Exhaustively compare the cell against a truth table; X is a failure."""
    sim = _SwitchSim(cell)
    if len(sim.inputs) != tt.n_inputs:
        raise ValueError(
            f"cell has {len(sim.inputs)} input pins, table has {tt.n_inputs}")
    failures = []
    for a in range(tt.n_rows):
        got = sim.run(a)
        expected = tt.value(a)
        if got is LogicValue.X or got.value != expected:
            failures.append((a, expected, "X" if got is LogicValue.X else str(got.value)))
    return EquivReport(not failures, tuple(failures))
