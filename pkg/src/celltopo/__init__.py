"""Standard-cell transistor topology toolkit."""

__version__ = "0.1.0"

from .netlist import (  # noqa: F401
    CellNetlist, Device, DeviceType, NetKind, NetRef, ValidationReport,
    parse_spice, serialize_spice, validate_cell, normalize_orientation,
)
from .logic import (  # noqa: F401
    TruthTable, LogicValue, table_to_sop, minimize_sop, factor_expr,
    factored_form, synth_cell, switch_sim, equiv_check,
)
from .permute import (  # noqa: F401
    Network, PivotCandidate, SwapRegion, build_graph, validate_pivot,
    find_swap_region, swap_net, list_valid_pivots, enumerate_topologies,
    canonical_hash,
)
