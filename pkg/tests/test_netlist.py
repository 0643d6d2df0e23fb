import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from celltopo.netlist import (
    CellNetlist, DeviceType, DisconnectedNetworkError, MissingRailError, NetKind,
    NetRef, SpiceSyntaxError, DuplicateDeviceError, normalize_orientation,
    parse_spice, serialize_spice, validate_cell,
)
from tests.conftest import INVERTER_TEXT


class TestParse:
    def test_inverter(self, inverter):
        assert inverter.cell_name == "INV"
        assert len(inverter.devices_of(DeviceType.PMOS)) == 1
        assert len(inverter.devices_of(DeviceType.NMOS)) == 1
        assert {p.name: p.kind for p in inverter.pins} == {
            "A": NetKind.INPUT, "Y": NetKind.OUTPUT,
            "VDD": NetKind.POWER, "GND": NetKind.GROUND,
        }

    def test_aoi221_counts(self, aoi221):
        # 5-input AND-OR-invert family member: 5 PMOS + 5 NMOS, 5 input pins
        cell, _ = aoi221
        reparsed = parse_spice(serialize_spice(cell))
        assert len(reparsed.devices_of(DeviceType.PMOS)) == 5
        assert len(reparsed.devices_of(DeviceType.NMOS)) == 5
        assert len(reparsed.input_pins()) == 5

    def test_case_insensitive_upper_cased(self):
        cell = parse_spice(".subckt inv a y vdd gnd\nmp1 y a vdd vdd pmos\nmn1 y a gnd gnd nmos\n.ends\n")
        assert cell.cell_name == "INV"
        assert cell.devices[0].name == "MP1"

    def test_continuation_and_comments(self):
        text = ("* a comment\n.SUBCKT INV A Y\n+ VDD GND\n\n"
                "MP1 Y A VDD\n+ VDD PMOS\nMN1 Y A GND GND NMOS\n.ENDS\n")
        cell = parse_spice(text)
        assert [p.name for p in cell.pins] == ["A", "Y", "VDD", "GND"]

    def test_width_length_suffixes(self):
        cell = parse_spice(".SUBCKT INV A Y VDD GND\nMP1 Y A VDD VDD PMOS W=200n L=30n\n"
                           "MN1 Y A GND GND NMOS W=100n\n.ENDS\n")
        assert cell.devices[0].width_nm == 200
        assert cell.devices[0].length_nm == 30
        assert cell.devices[1].length_nm is None
        assert parse_spice(serialize_spice(cell)) == cell

    def test_rail_gated_parses_but_fails_validation(self):
        text = (".SUBCKT BAD A Y VDD GND\nMP1 Y VDD VDD VDD PMOS\n"
                "MN1 Y A GND GND NMOS\n.ENDS\n")
        cell = parse_spice(text)  # MissingRail not raised
        report = validate_cell(cell)
        assert any(v.kind == "rail-gated-device" for v in report.violations)

    @pytest.mark.parametrize("text,exc", [
        ("MP1 Y A VDD VDD PMOS\n.ENDS\n", SpiceSyntaxError),
        (".SUBCKT X\n.ENDS\n", SpiceSyntaxError),
        (".SUBCKT X A Y VDD GND\nMP1 Y A VDD VDD\n.ENDS\n", SpiceSyntaxError),
        (".SUBCKT X A Y VDD GND\nMP1 Y A VDD VDD CMOS\n.ENDS\n", SpiceSyntaxError),
        (".SUBCKT X A Y VDD GND\nRX Y A 10\n.ENDS\n", SpiceSyntaxError),
        (".SUBCKT X A Y VDD GND\nMP1 Y Y A VDD VDD PMOS\n.ENDS\n", SpiceSyntaxError),
        (".SUBCKT X A Y VDD GND\nMP1 Y A VDD VDD PMOS W=0n\n.ENDS\n", SpiceSyntaxError),
        (".SUBCKT X A Y VDD GND\nMP1 Y A Y VDD PMOS\n.ENDS\n", SpiceSyntaxError),
        (".SUBCKT X A Y VDD GND\nMP1 Y A VDD VDD PMOS\nMP1 Y A VDD VDD PMOS\n.ENDS\n",
         DuplicateDeviceError),
        (".SUBCKT X A Y GND\nMN1 Y A GND GND NMOS\n.ENDS\n", MissingRailError),
        (".SUBCKT X A Y VDD\nMP1 Y A VDD VDD PMOS\n.ENDS\n", MissingRailError),
    ])
    def test_malformed_inputs(self, text, exc):
        with pytest.raises(exc):
            parse_spice(text)

    def test_syntax_error_carries_line_number(self):
        with pytest.raises(SpiceSyntaxError) as err:
            parse_spice(".SUBCKT X A Y VDD GND\nMP1 Y A VDD VDD PMOS\nJUNK\n.ENDS\n")
        assert err.value.line_no == 3

    @given(st.binary(max_size=300))
    @settings(max_examples=200, deadline=None)
    def test_fuzz_never_crashes(self, blob):
        try:
            parse_spice(blob.decode("latin-1"))
        except (SpiceSyntaxError, DuplicateDeviceError, MissingRailError):
            pass


class TestSerialize:
    def test_round_trip_inverter(self, inverter):
        assert parse_spice(serialize_spice(inverter)) == inverter

    def test_deterministic(self, majority):
        cell, _ = majority
        assert serialize_spice(cell) == serialize_spice(cell)

    def test_exact_inverter_text(self, inverter):
        assert serialize_spice(inverter) == INVERTER_TEXT


class TestValidate:
    def test_well_formed_inverter(self, inverter):
        assert validate_cell(inverter).ok

    def test_synthesized_cells_pass(self, aoi221, majority):
        assert validate_cell(aoi221[0]).ok
        assert validate_cell(majority[0]).ok

    def test_count_mismatch(self):
        cell = parse_spice(".SUBCKT X A Y VDD GND\nMP1 Y A VDD VDD PMOS\n"
                           "MP2 Y A VDD VDD PMOS\nMN1 Y A GND GND NMOS\n.ENDS\n")
        assert any(v.kind == "count-mismatch" for v in validate_cell(cell).violations)

    def test_floating_internal_net(self):
        cell = parse_spice(".SUBCKT X A Y VDD GND\nMP1 Y A VDD VDD PMOS\n"
                           "MN1 Y A N1 GND NMOS\nMN2 N2 A GND GND NMOS\n.ENDS\n")
        kinds = {v.kind for v in validate_cell(cell).violations}
        assert "floating-net" in kinds

    def test_unattached_output(self):
        # built by hand: pin-kind inference would never parse one
        base = parse_spice(INVERTER_TEXT)
        pins = tuple(
            NetRef(p.name, NetKind.OUTPUT) if p.name == "A" else p
            for p in base.pins)
        cell = CellNetlist(base.cell_name, pins, base.devices)
        kinds = {v.kind for v in validate_cell(cell).violations}
        assert "multi-output" in kinds and "unattached-output" in kinds


class TestNormalize:
    def test_fixed_point_on_normalized(self, inverter):
        norm = normalize_orientation(inverter)
        assert normalize_orientation(norm) == norm

    def test_flips_swapped_nmos(self):
        cell = parse_spice(".SUBCKT INV A Y VDD GND\nMP1 Y A VDD VDD PMOS\n"
                           "MN1 GND A Y GND NMOS\n.ENDS\n")
        norm = normalize_orientation(cell)
        nmos = norm.devices_of(DeviceType.NMOS)[0]
        assert (nmos.drain.name, nmos.source.name) == ("Y", "GND")
        pmos = norm.devices_of(DeviceType.PMOS)[0]
        assert (pmos.drain.name, pmos.source.name) == ("VDD", "Y")

    def test_only_orientation_changes(self, majority):
        cell, _ = majority
        norm = normalize_orientation(cell)
        assert {d.name for d in norm.devices} == {d.name for d in cell.devices}
        for before, after in zip(cell.devices, norm.devices):
            assert {before.drain.name, before.source.name} == \
                   {after.drain.name, after.source.name}
            assert before.gate == after.gate

    def test_disconnected_device_rejected(self):
        cell = parse_spice(".SUBCKT X A Y VDD GND\nMP1 Y A VDD VDD PMOS\n"
                           "MN1 Y A GND GND NMOS\nMN2 N1 A N2 GND NMOS\n.ENDS\n")
        with pytest.raises(DisconnectedNetworkError):
            normalize_orientation(cell)
