"""Transistor-level standard-cell netlists in a small SPICE subset.

Grammar (one cell per file):

    .SUBCKT <cell_name> <pin>+
    M<name> <drain> <gate> <source> <bulk> <PMOS|NMOS> [W=<int>n] [L=<int>n]
    .ENDS

Lines starting with ``*`` are comments, blank lines are skipped, a leading
``+`` continues the previous line.  Identifiers are upper-cased on parse.
Net kinds are inferred from reserved names (VDD/VCC power, VSS/GND/0 ground)
and from the pin line; everything else is an internal net.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum


POWER_NAMES = frozenset({"VDD", "VCC"})
GROUND_NAMES = frozenset({"VSS", "GND", "0"})


class NetKind(Enum):
    POWER = "power"
    GROUND = "ground"
    INPUT = "input"
    OUTPUT = "output"
    INTERNAL = "internal"


class DeviceType(Enum):
    PMOS = "PMOS"
    NMOS = "NMOS"


class NetlistError(Exception):
    """Base class for netlist parsing/validation failures."""


class SpiceSyntaxError(NetlistError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DuplicateDeviceError(NetlistError):
    pass


class MissingRailError(NetlistError):
    pass


class DisconnectedNetworkError(NetlistError):
    pass


@dataclass(frozen=True, order=True)
class NetRef:
    name: str
    kind: NetKind = field(compare=False)

    def __post_init__(self):
        if not self.name or any(c.isspace() for c in self.name):
            raise ValueError(f"bad net name {self.name!r}")

    @property
    def is_rail(self) -> bool:
        return self.kind in (NetKind.POWER, NetKind.GROUND)


@dataclass(frozen=True)
class Device:
    name: str
    dtype: DeviceType
    drain: NetRef
    gate: NetRef
    source: NetRef
    bulk: NetRef
    width_nm: int | None = None
    length_nm: int | None = None

    def __post_init__(self):
        if self.drain.name == self.source.name:
            raise ValueError(f"device {self.name}: drain equals source ({self.drain.name})")
        for dim in (self.width_nm, self.length_nm):
            if dim is not None and dim <= 0:
                raise ValueError(f"device {self.name}: non-positive W/L")

    def channel_nets(self) -> tuple[NetRef, NetRef]:
        return (self.drain, self.source)

    def flipped(self) -> "Device":
        return Device(self.name, self.dtype, self.source, self.gate, self.drain,
                      self.bulk, self.width_nm, self.length_nm)


@dataclass(frozen=True)
class CellNetlist:
    cell_name: str
    pins: tuple[NetRef, ...]
    devices: tuple[Device, ...]

    def nets(self) -> dict[str, NetRef]:
        """All distinct nets of the cell, keyed by name."""
        out = {p.name: p for p in self.pins}
        for d in self.devices:
            for n in (d.drain, d.gate, d.source, d.bulk):
                out.setdefault(n.name, n)
        return out

    def net(self, name: str) -> NetRef:
        try:
            return self.nets()[name.upper()]
        except KeyError:
            raise KeyError(f"no net {name!r} in cell {self.cell_name}") from None

    def input_pins(self) -> tuple[NetRef, ...]:
        return tuple(p for p in self.pins if p.kind is NetKind.INPUT)

    def output_pins(self) -> tuple[NetRef, ...]:
        return tuple(p for p in self.pins if p.kind is NetKind.OUTPUT)

    def power_net(self) -> NetRef:
        return next(n for n in self.nets().values() if n.kind is NetKind.POWER)

    def ground_net(self) -> NetRef:
        return next(n for n in self.nets().values() if n.kind is NetKind.GROUND)

    def devices_of(self, dtype: DeviceType) -> tuple[Device, ...]:
        return tuple(d for d in self.devices if d.dtype is dtype)


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


# -----------------------------
# Parsing
# -----------------------------

def _logical_lines(text: str):
    """Yield (line_no, line) after comment stripping and + continuation."""
    pending: tuple[int, str] | None = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("*"):
            continue
        if line.startswith("+"):
            if pending is None:
                raise SpiceSyntaxError("continuation with no previous line", i)
            pending = (pending[0], pending[1] + " " + line[1:].strip())
            continue
        if pending is not None:
            yield pending
        pending = (i, line)
    if pending is not None:
        yield pending


def _infer_kind(name: str, pin_names: dict[str, NetKind]) -> NetKind:
    if name in POWER_NAMES:
        return NetKind.POWER
    if name in GROUND_NAMES:
        return NetKind.GROUND
    if name in pin_names:
        return pin_names[name]
    return NetKind.INTERNAL


def _parse_dim(token: str, key: str, line_no: int) -> int:
    body = token[len(key):]
    if body.endswith(("N", "n")):
        body = body[:-1]
    try:
        value = int(body)
    except ValueError:
        raise SpiceSyntaxError(f"bad {key.rstrip('=')} value {token!r}", line_no) from None
    if value <= 0:
        raise SpiceSyntaxError(f"{key.rstrip('=')} must be positive", line_no)
    return value


def parse_spice(text: str) -> CellNetlist:
    """Parse one ``.SUBCKT`` cell from SPICE text.

    Raises SpiceSyntaxError, DuplicateDeviceError or MissingRailError.
    """
    lines = list(_logical_lines(text))
    if not lines:
        raise SpiceSyntaxError("empty netlist", 1)

    header_no, header = lines[0]
    tokens = header.upper().split()
    if tokens[0] != ".SUBCKT":
        raise SpiceSyntaxError("expected .SUBCKT header", header_no)
    if len(tokens) < 3:
        raise SpiceSyntaxError(".SUBCKT needs a cell name and at least one pin", header_no)
    cell_name = tokens[1]
    pin_names = tokens[2:]
    if len(set(pin_names)) != len(pin_names):
        raise SpiceSyntaxError("duplicate pin on .SUBCKT line", header_no)

    ends_no, ends = lines[-1]
    if ends.upper().split()[0] != ".ENDS":
        raise SpiceSyntaxError("expected .ENDS terminator", ends_no)

    # First pass: raw device tuples, to learn which pins sit on channels.
    raw = []
    seen_names: set[str] = set()
    for line_no, line in lines[1:-1]:
        toks = line.upper().split()
        head = toks[0]
        if head.startswith("."):
            raise SpiceSyntaxError(f"unsupported directive {head}", line_no)
        if not head.startswith("M"):
            raise SpiceSyntaxError(f"unsupported element {head!r} (only M devices)", line_no)
        if len(toks) < 6:
            raise SpiceSyntaxError("device line needs D G S B and a model", line_no)
        name, d, g, s, b, model = toks[:6]
        if model not in ("PMOS", "NMOS"):
            raise SpiceSyntaxError(f"unknown model {model!r}", line_no)
        width = length = None
        for extra in toks[6:]:
            if extra.startswith("W="):
                width = _parse_dim(extra, "W=", line_no)
            elif extra.startswith("L="):
                length = _parse_dim(extra, "L=", line_no)
            else:
                raise SpiceSyntaxError(f"unexpected token {extra!r}", line_no)
        if name in seen_names:
            raise DuplicateDeviceError(f"device {name} defined twice")
        seen_names.add(name)
        raw.append((line_no, name, DeviceType[model], d, g, s, b, width, length))

    # Pins on a channel terminal are outputs, gate-only pins are inputs.
    channel_names = set()
    for _, _, _, d, _, s, _, _, _ in raw:
        channel_names.update((d, s))
    pin_kinds: dict[str, NetKind] = {}
    for p in pin_names:
        if p in POWER_NAMES:
            pin_kinds[p] = NetKind.POWER
        elif p in GROUND_NAMES:
            pin_kinds[p] = NetKind.GROUND
        elif p in channel_names:
            pin_kinds[p] = NetKind.OUTPUT
        else:
            pin_kinds[p] = NetKind.INPUT

    nets: dict[str, NetRef] = {}

    def intern(name: str) -> NetRef:
        ref = nets.get(name)
        if ref is None:
            ref = NetRef(name, _infer_kind(name, pin_kinds))
            nets[name] = ref
        return ref

    pins = tuple(intern(p) for p in pin_names)
    devices = []
    for line_no, name, dtype, d, g, s, b, width, length in raw:
        try:
            devices.append(Device(name, dtype, intern(d), intern(g), intern(s),
                                  intern(b), width, length))
        except ValueError as exc:
            raise SpiceSyntaxError(str(exc), line_no) from None

    kinds = [n.kind for n in nets.values()]
    if kinds.count(NetKind.POWER) != 1 or kinds.count(NetKind.GROUND) != 1:
        present = {k.value for k in kinds}
        raise MissingRailError(
            f"cell {cell_name} needs exactly one power and one ground net, saw {sorted(present)}")
    if not devices:
        raise SpiceSyntaxError("cell has no devices", ends_no)
    return CellNetlist(cell_name, pins, tuple(devices))


def serialize_spice(cell: CellNetlist) -> str:
    """Deterministic text form; parse_spice of the output equals the input."""
    out = [".SUBCKT " + cell.cell_name + " " + " ".join(p.name for p in cell.pins)]
    for d in cell.devices:
        line = f"{d.name} {d.drain.name} {d.gate.name} {d.source.name} {d.bulk.name} {d.dtype.value}"
        if d.width_nm is not None:
            line += f" W={d.width_nm}n"
        if d.length_nm is not None:
            line += f" L={d.length_nm}n"
        out.append(line)
    out.append(".ENDS")
    return "\n".join(out) + "\n"


# -----------------------------
# Validation
# -----------------------------

def validate_cell(cell: CellNetlist) -> ValidationReport:
    """Report structural violations; an empty report means the cell is
    safe for orientation normalization and topology transforms."""
    violations: list[Violation] = []

    for d in cell.devices:
        if d.gate.is_rail:
            violations.append(Violation(
                "rail-gated-device", f"{d.name} gate tied to {d.gate.name}"))

    # Terminal attachment counts per net (drain/source/gate, bulk excluded).
    attach: dict[str, int] = {}
    channel_attach: dict[str, int] = {}
    for d in cell.devices:
        for n in (d.drain, d.gate, d.source):
            attach[n.name] = attach.get(n.name, 0) + 1
        for n in (d.drain, d.source):
            channel_attach[n.name] = channel_attach.get(n.name, 0) + 1

    for name, ref in sorted(cell.nets().items()):
        if ref.kind is NetKind.INTERNAL and attach.get(name, 0) == 1:
            violations.append(Violation("floating-net", f"{name} has a single attachment"))

    outputs = cell.output_pins()
    if not outputs:
        violations.append(Violation("no-output", "cell has no output pin"))
    elif len(outputs) > 1:
        violations.append(Violation(
            "multi-output", ", ".join(p.name for p in outputs)))
    for p in outputs:
        if channel_attach.get(p.name, 0) == 0:
            violations.append(Violation("unattached-output", p.name))

    n_p = len(cell.devices_of(DeviceType.PMOS))
    n_n = len(cell.devices_of(DeviceType.NMOS))
    if n_p != n_n:
        violations.append(Violation("count-mismatch", f"{n_p} PMOS vs {n_n} NMOS"))

    return ValidationReport(tuple(violations))


# -----------------------------
# Drain/source orientation
# -----------------------------

def _channel_distances(devices: tuple[Device, ...], start: str) -> dict[str, int]:
    adj: dict[str, set[str]] = {}
    for d in devices:
        adj.setdefault(d.drain.name, set()).add(d.source.name)
        adj.setdefault(d.source.name, set()).add(d.drain.name)
    dist = {start: 0}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj.get(u, ()):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def normalize_orientation(cell: CellNetlist) -> CellNetlist:
    """Flip devices so the drain is the "up" terminal of its pull network.

    PMOS: drain is the terminal nearer the power rail (ties lean away from
    the output).  NMOS: source is the terminal nearer ground (ties put the
    drain nearer the output).  Channel symmetry makes this a functional
    no-op; it fixes the directional convention the permutation graph needs.
    """
    outputs = cell.output_pins()
    if len(outputs) != 1:
        raise DisconnectedNetworkError(
            f"cell {cell.cell_name} needs exactly one output pin to orient")
    out_name = outputs[0].name

    plan: dict[str, tuple[DeviceType, str, str]] = {
        DeviceType.PMOS: cell.power_net().name,
        DeviceType.NMOS: cell.ground_net().name,
    }

    new_devices = []
    for dtype in (DeviceType.PMOS, DeviceType.NMOS):
        rail = plan[dtype]
        group = cell.devices_of(dtype)
        d_rail = _channel_distances(group, rail)
        d_out = _channel_distances(group, out_name)
        inf = float("inf")
        for dev in group:
            a, b = dev.drain.name, dev.source.name
            ra, rb = d_rail.get(a, inf), d_rail.get(b, inf)
            oa, ob = d_out.get(a, inf), d_out.get(b, inf)
            if ra == rb == inf and oa == ob == inf:
                raise DisconnectedNetworkError(
                    f"device {dev.name}: terminals unreachable from {rail} and {out_name}")
            if dtype is DeviceType.PMOS:
                # drain = nearer to power; tie: drain = farther from output
                if ra < rb:
                    flip = False
                elif rb < ra:
                    flip = True
                elif oa > ob:
                    flip = False
                elif ob > oa:
                    flip = True
                else:
                    flip = False  # fully symmetric, keep as written
            else:
                # source = nearer to ground; tie: drain = nearer to output
                if rb < ra:
                    flip = False
                elif ra < rb:
                    flip = True
                elif oa < ob:
                    flip = False
                elif ob < oa:
                    flip = True
                else:
                    flip = False
            new_devices.append(dev.flipped() if flip else dev)

    by_name = {d.name: d for d in new_devices}
    ordered = tuple(by_name[d.name] for d in cell.devices)
    return CellNetlist(cell.cell_name, cell.pins, ordered)
