"""Corpus construction over the 3-input Boolean function space.

For each of the 254 non-constant 3-input functions the pipeline synthesizes
a seed cell, enumerates capped pivot-subset variants, verifies each variant
against the truth table by exhaustive switch-level simulation, labels it
with the diffusion-break proxy, and persists one JSON-Lines record per
unique variant.  Builds are fully deterministic; an equivalence failure
aborts the build because it can only mean a transformation bug.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .logic import TruthTable, equiv_check, factored_form, synth_cell
from .netlist import CellNetlist, parse_spice, serialize_spice
from .permute import canonical_hash, enumerate_topologies
from .reward import proxy_score


RECORDS_FILENAME = "records.jsonl"
STATS_FILENAME = "stats.json"
DEFAULT_CAP = 100
DEFAULT_SPLIT_FRACTION = 0.8
DEFAULT_SPLIT_SEED = 42


class DatasetError(Exception):
    pass


class TooFewFunctionsError(DatasetError):
    pass


@dataclass(frozen=True, order=True)
class FunctionId:
    n_inputs: int
    table_bits: int

    def table(self) -> TruthTable:
        return TruthTable(self.n_inputs, self.table_bits)

    def cell_name(self) -> str:
        width = max(1, (1 << self.n_inputs) // 4)
        return f"F{self.table_bits:0{width}X}"


@dataclass(frozen=True)
class CorpusRecord:
    function: FunctionId
    variant_index: int
    netlist_text: str
    canonical_digest: int
    proxy_breaks: int
    label: int  # +1 routable-proxy, -1 unroutable-proxy
    equiv_verified: bool

    @property
    def key(self) -> str:
        return f"{self.function.n_inputs}:{self.function.table_bits:X}:{self.variant_index}"

    def cell(self) -> CellNetlist:
        return parse_spice(self.netlist_text)

    def to_json(self) -> str:
        doc = {
            "function": {"n_inputs": self.function.n_inputs,
                         "table_bits": self.function.table_bits},
            "variant_index": self.variant_index,
            "netlist_text": self.netlist_text,
            "canonical_digest": f"{self.canonical_digest:016x}",
            "proxy_breaks": self.proxy_breaks,
            "label": self.label,
            "equiv_verified": self.equiv_verified,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "CorpusRecord":
        doc = json.loads(line)
        return cls(
            FunctionId(doc["function"]["n_inputs"], doc["function"]["table_bits"]),
            doc["variant_index"], doc["netlist_text"],
            int(doc["canonical_digest"], 16), doc["proxy_breaks"],
            doc["label"], doc["equiv_verified"],
        )


@dataclass(frozen=True)
class FunctionStats:
    function: FunctionId
    n_pivots: int
    emitted: int
    unique: int
    routable: int
    unroutable: int


@dataclass(frozen=True)
class CorpusStats:
    per_function: tuple[FunctionStats, ...]

    @property
    def n_functions(self) -> int:
        return len(self.per_function)

    @property
    def total_records(self) -> int:
        return sum(s.unique for s in self.per_function)

    @property
    def total_emitted(self) -> int:
        return sum(s.emitted for s in self.per_function)

    @property
    def total_duplicates(self) -> int:
        return self.total_emitted - self.total_records

    @property
    def n_routable(self) -> int:
        return sum(s.routable for s in self.per_function)

    @property
    def n_unroutable(self) -> int:
        return sum(s.unroutable for s in self.per_function)


@dataclass(frozen=True)
class SplitManifest:
    train: tuple[str, ...]
    eval: tuple[str, ...]
    seed: int
    split_fraction: float

    def to_json(self) -> str:
        doc = {"train": list(self.train), "eval": list(self.eval),
               "seed": self.seed, "split_fraction": self.split_fraction}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        doc = json.loads(text)
        return cls(tuple(doc["train"]), tuple(doc["eval"]),
                   doc["seed"], doc["split_fraction"])


def enumerate_functions() -> list[FunctionId]:
    """All 254 non-constant 3-input functions, ascending by table bits."""
    return [FunctionId(3, bits) for bits in range(1, 0xFF)]


def build_function(fid: FunctionId, cap: int) -> tuple[list[CorpusRecord], FunctionStats]:
    """Synthesize, enumerate, verify and label one function's variants."""
    tt = fid.table()
    seed_cell = synth_cell(fid.cell_name(), factored_form(tt), tt)
    enum = enumerate_topologies(seed_cell, cap)
    records = []
    routable = unroutable = 0
    for variant, index in zip(enum.variants, enum.variant_indices):
        report = equiv_check(variant, tt)
        if not report.passed:
            raise DatasetError(
                f"{fid.cell_name()} variant {index} failed equivalence: "
                f"{report.failures[:3]} (transformation bug)")
        breaks = proxy_score(variant).breaks
        label = 1 if breaks == 0 else -1
        routable += label == 1
        unroutable += label == -1
        records.append(CorpusRecord(fid, index, serialize_spice(variant),
                                    canonical_hash(variant), breaks, label, True))
    stats = FunctionStats(fid, enum.n_pivots, enum.emitted, len(enum.variants),
                          routable, unroutable)
    return records, stats


def _build_function_task(args):
    fid, cap = args
    return build_function(fid, cap)


def build_corpus(out_dir: str, cap: int = DEFAULT_CAP,
                 functions: list[FunctionId] | None = None,
                 jobs: int = 1) -> CorpusStats:
    """Build and persist the corpus; returns per-function statistics.

    Records land in ``records.jsonl`` and stats in ``stats.json``, both with
    sorted keys and LF endings so identical configs give identical bytes.
    """
    functions = sorted(functions) if functions else enumerate_functions()
    os.makedirs(out_dir, exist_ok=True)

    results: list[tuple[list[CorpusRecord], FunctionStats]] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_build_function_task,
                                    [(fid, cap) for fid in functions],
                                    chunksize=8))
    else:
        results = [build_function(fid, cap) for fid in functions]

    with open(os.path.join(out_dir, RECORDS_FILENAME), "w",
              encoding="utf-8", newline="\n") as f:
        for records, _ in results:
            for rec in records:
                f.write(rec.to_json() + "\n")

    stats = CorpusStats(tuple(s for _, s in results))
    stats_doc = {
        "n_functions": stats.n_functions,
        "total_records": stats.total_records,
        "total_emitted": stats.total_emitted,
        "total_duplicates": stats.total_duplicates,
        "n_routable": stats.n_routable,
        "n_unroutable": stats.n_unroutable,
        "per_function": [
            {"n_inputs": s.function.n_inputs, "table_bits": s.function.table_bits,
             "n_pivots": s.n_pivots, "emitted": s.emitted, "unique": s.unique,
             "routable": s.routable, "unroutable": s.unroutable}
            for s in stats.per_function
        ],
    }
    with open(os.path.join(out_dir, STATS_FILENAME), "w",
              encoding="utf-8", newline="\n") as f:
        json.dump(stats_doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    return stats


def load_records(path: str) -> list[CorpusRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(CorpusRecord.from_json(line))
    return records


def select_unroutable(records: list[CorpusRecord]) -> list[CorpusRecord]:
    return [r for r in records if r.label == -1]


def split(records: list[CorpusRecord], fraction: float = DEFAULT_SPLIT_FRACTION,
          seed: int = DEFAULT_SPLIT_SEED) -> SplitManifest:
    """Function-level split: every variant of a function lands on one side,
    so no topology family leaks across the boundary."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    functions = sorted({r.function for r in records})
    if len(functions) < 2:
        raise TooFewFunctionsError(
            f"split needs records from >= 2 functions, got {len(functions)}")
    rng = np.random.default_rng(seed)
    order = [functions[i] for i in rng.permutation(len(functions))]
    n_train = math.ceil(fraction * len(functions))
    train_funcs = set(order[:n_train])
    train = tuple(r.key for r in records if r.function in train_funcs)
    eval_ = tuple(r.key for r in records if r.function not in train_funcs)
    return SplitManifest(train, eval_, seed, fraction)


def records_by_key(records: list[CorpusRecord]) -> dict[str, CorpusRecord]:
    return {r.key: r for r in records}
