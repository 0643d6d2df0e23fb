import pytest

from celltopo.logic import TruthTable, factored_form, synth_cell
from celltopo.netlist import parse_spice


INVERTER_TEXT = """\
.SUBCKT INV A Y VDD GND
MP1 Y A VDD VDD PMOS
MN1 Y A GND GND NMOS
.ENDS
"""


def aoi221_table() -> TruthTable:
    """Y = not((A1*A2) + (B1*B2) + C), variables 0..4."""
    bits = 0
    for a in range(32):
        v = ((a >> 0) & 1 and (a >> 1) & 1) or ((a >> 2) & 1 and (a >> 3) & 1) or ((a >> 4) & 1)
        bits |= (0 if v else 1) << a
    return TruthTable(5, bits)


@pytest.fixture
def inverter():
    return parse_spice(INVERTER_TEXT)


@pytest.fixture(scope="session")
def aoi221():
    tt = aoi221_table()
    return synth_cell("AOI221", factored_form(tt), tt), tt


@pytest.fixture(scope="session")
def majority():
    tt = TruthTable.from_text("3:E8")
    return synth_cell("MAJ3", factored_form(tt), tt), tt
