"""Command-line surface for batch runs and reproduction.

Exit codes: 0 success, 2 usage or input error, 3 domain error (invalid
pivot, failed verification, ...), 4 internal invariant violation.  Every
artifact-producing command writes a run-manifest JSON next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

import numpy as np

from . import dataset as ds
from . import grpo as gr
from . import reward as rw
from .logic import (
    LogicError, TrivialFunctionError, TruthTable, equiv_check, factored_form,
    synth_cell,
)
from .netlist import (
    NetlistError, normalize_orientation, parse_spice, serialize_spice, validate_cell,
)
from .permute import (
    PermuteError, build_graph, enumerate_topologies, find_swap_region, swap_net,
    validate_pivot,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DOMAIN = 3
EXIT_INTERNAL = 4

SEED_ENV_VAR = "TOPCELL_SEED"

_DOMAIN_ERRORS = (
    NetlistError, LogicError, PermuteError, rw.RewardError, gr.GrpoError,
    ds.DatasetError,
)


class UsageError(Exception):
    pass


def _default_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV_VAR} must be an integer, got {env!r}")
    return 0


def _read_cell(path: str):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise UsageError(str(exc))
    return parse_spice(text)


def _parse_function(spec: str) -> TruthTable:
    try:
        return TruthTable.from_text(spec)
    except ValueError as exc:
        raise UsageError(str(exc))


def _ensure_out(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        if res.returncode == 0:
            return res.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _write_manifest(out_dir: str, command: str, config: dict):
    doc = {"command": command, "config": config, "git": _git_describe()}
    path = os.path.join(out_dir, f"run_manifest_{command.replace('-', '_')}.json")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


# -----------------------------
# Commands
# -----------------------------

def cmd_synth(args) -> int:
    tt = _parse_function(args.function)
    if tt.is_trivial:
        raise UsageError(f"trivial function {args.function}: nothing to synthesize")
    out = _ensure_out(args)
    name = args.name or f"F{tt.bits:0{max(1, tt.n_rows // 4)}X}"
    cell = synth_cell(name, factored_form(tt), tt)
    report = equiv_check(cell, tt)
    if not report.passed:
        print(f"internal error: synthesized cell fails verification: {report.failures[:4]}",
              file=sys.stderr)
        return EXIT_INTERNAL
    path = os.path.join(out, f"{cell.cell_name}.sp")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize_spice(cell))
    print(f"wrote {path}  transistors={len(cell.devices)}")
    return EXIT_OK


def cmd_swap(args) -> int:
    cell = _read_cell(args.file)
    candidate = validate_pivot(cell, args.pivot)
    region = find_swap_region(build_graph(normalize_orientation(cell)), candidate)
    swapped = swap_net(cell, args.pivot)
    path = args.file + ".swapped.sp"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize_spice(swapped))
    print(f"pivot={region.pivot} network={region.network.value} "
          f"nca={region.nca} ncd={region.ncd} delta={len(region.delta)}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_enumerate(args) -> int:
    cell = _read_cell(args.file)
    out = _ensure_out(args)
    result = enumerate_topologies(cell, args.cap)
    for variant, index in zip(result.variants, result.variant_indices):
        path = os.path.join(out, f"{variant.cell_name}__v{index}.sp")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(serialize_spice(variant))
    print(f"n_pivots={result.n_pivots} emitted={result.emitted} "
          f"unique={len(result.variants)}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cell = _read_cell(args.file)
    tt = _parse_function(args.function)
    if len(cell.input_pins()) != tt.n_inputs:
        raise UsageError(
            f"cell has {len(cell.input_pins())} input pins, table expects {tt.n_inputs}")
    report = equiv_check(cell, tt)
    if report.passed:
        print("equivalent")
        return EXIT_OK
    print("NOT equivalent; failing assignments:")
    for assignment, expected, got in report.failures:
        bits = format(assignment, f"0{tt.n_inputs}b")[::-1]
        print(f"  inputs={bits} expected={expected} got={got}")
    return EXIT_DOMAIN


def _reward_source(spec: str) -> rw.RewardSource:
    if spec == "proxy":
        return rw.ProxyReward()
    if spec.startswith("gnn:"):
        return rw.GnnReward(rw.load_model(spec[len("gnn:"):]))
    raise UsageError(f"unknown reward source {spec!r} (want proxy or gnn:<model.json>)")


def cmd_score(args) -> int:
    cell = _read_cell(args.file)
    report = validate_cell(cell)
    if not report.ok:
        raise UsageError(f"cell fails validation: {report.violations[0].kind}")
    if args.reward == "proxy":
        result = rw.proxy_score(normalize_orientation(cell))
        print(f"breaks={result.breaks} score={result.score}")
    else:
        source = _reward_source(args.reward)
        logit = rw.reward_of(source, normalize_orientation(cell))
        print(f"logit={logit}")
    return EXIT_OK


def cmd_dataset_build(args) -> int:
    out = _ensure_out(args)
    stats = ds.build_corpus(out, cap=args.cap, jobs=args.jobs)
    _write_manifest(out, "dataset-build",
                    {"cap": args.cap, "jobs": args.jobs, "seed": _default_seed(args)})
    print(f"functions={stats.n_functions} records={stats.total_records} "
          f"emitted={stats.total_emitted} duplicates={stats.total_duplicates} "
          f"routable={stats.n_routable} unroutable={stats.n_unroutable}")
    return EXIT_OK


def cmd_train_reward(args) -> int:
    records = ds.load_records(args.records)
    if not records:
        raise UsageError(f"no records in {args.records}")
    out = _ensure_out(args)
    seed = _default_seed(args)
    config = rw.GnnTrainConfig(d=args.dim, k_layers=args.layers, lr=args.lr,
                               epochs=args.epochs, seed=seed)
    pairs = [(rw.encode_cell_graph(r.cell()), r.label) for r in records]
    trained = rw.train_reward_model(pairs, config)
    model_path = os.path.join(out, "reward_model.json")
    rw.save_model(trained.params, model_path)
    _write_manifest(out, "train-reward", {
        "records": args.records, "dim": args.dim, "layers": args.layers,
        "lr": args.lr, "epochs": args.epochs, "seed": seed,
    })
    print(f"wrote {model_path}  train_accuracy={trained.final_accuracy:.3f}")
    return EXIT_OK


def _load_training_cells(records_path: str, split_path: str | None,
                         which: str) -> list:
    records = ds.select_unroutable(ds.load_records(records_path))
    if split_path:
        with open(split_path, encoding="utf-8") as f:
            manifest = ds.SplitManifest.from_json(f.read())
        keys = set(manifest.train if which == "train" else manifest.eval)
        records = [r for r in records if r.key in keys]
    return [r.cell() for r in records]


def cmd_train_policy(args) -> int:
    cells = _load_training_cells(args.records, args.split, "train")
    if not cells:
        raise UsageError("no unroutable training cells found")
    out = _ensure_out(args)
    seed = _default_seed(args)
    config = gr.GrpoConfig(group_size=args.group_size, iterations=args.iterations,
                           inner_steps=args.inner_steps, clip_range=args.clip,
                           kl_coef=args.kl_coef, lr=args.lr, seed=seed)
    source = _reward_source(args.reward)
    policy = gr.ToySoftmaxPolicy.uniform()
    reference = gr.ToySoftmaxPolicy.uniform()
    result = gr.train_policy(cells, policy, reference, source, config)
    policy_path = os.path.join(out, "policy.json")
    gr.save_policy(result.policy, policy_path)
    gr.write_history_csv(result.history, os.path.join(out, "history.csv"))
    _write_manifest(out, "train-policy", {
        "records": args.records, "split": args.split, "reward": args.reward,
        "group_size": args.group_size, "iterations": args.iterations,
        "inner_steps": args.inner_steps, "clip": args.clip,
        "kl_coef": args.kl_coef, "lr": args.lr, "seed": seed,
    })
    final = [h.mean_reward for h in result.history if not np.isnan(h.mean_reward)]
    mean_final = float(np.mean(final[-20:])) if final else float("nan")
    print(f"wrote {policy_path}  iterations={len(result.history)} "
          f"recent_mean_reward={mean_final:.3f}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    cell = _read_cell(args.file)
    out = _ensure_out(args)
    seed = _default_seed(args)
    policy = gr.load_policy(args.policy) if args.policy else gr.ToySoftmaxPolicy.uniform()
    source = _reward_source(args.reward)
    trace = gr.optimize_cell(cell, policy, source, budget=args.budget,
                             mode=args.mode, rng=np.random.default_rng(seed))
    cell_path = os.path.join(out, f"{trace.cell.cell_name}.optimized.sp")
    with open(cell_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize_spice(trace.cell))
    trace_path = os.path.join(out, f"{trace.cell.cell_name}.trace.json")
    with open(trace_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(trace.to_json() + "\n")
    _write_manifest(out, "optimize", {
        "file": args.file, "policy": args.policy, "reward": args.reward,
        "budget": args.budget, "mode": args.mode, "seed": seed,
    })
    final_breaks = rw.proxy_score(trace.cell).breaks
    print(f"stop={trace.stop_reason} swaps={sum(s.accepted for s in trace.steps)} "
          f"proposals={len(trace.steps)} final_breaks={final_breaks}")
    print(f"wrote {cell_path}")
    return EXIT_OK


# -----------------------------
# Parser
# -----------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="celltopo",
        description="Standard-cell topology toolkit: synthesize, permute, "
                    "verify, score, and optimize transistor netlists.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_seed=True):
        p.add_argument("--out", help="output directory (default: current)")
        if with_seed:
            p.add_argument("--seed", type=int,
                           help=f"RNG seed (falls back to ${SEED_ENV_VAR}, then 0)")

    p = sub.add_parser("synth", help="synthesize a seed cell from a truth table")
    p.add_argument("--function", required=True, metavar="N:HEX",
                   help="truth table, e.g. 3:E8 for 3-input majority")
    p.add_argument("--name", help="cell name (default from the table)")
    add_common(p, with_seed=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("swap", help="apply one pivot-net swap to a cell")
    p.add_argument("file", help="input .sp netlist")
    p.add_argument("--pivot", required=True, help="pivot net name")
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("enumerate", help="enumerate capped topology variants")
    p.add_argument("file")
    p.add_argument("--cap", type=int, default=100)
    add_common(p, with_seed=False)
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("verify", help="switch-level equivalence against a table")
    p.add_argument("file")
    p.add_argument("--function", required=True, metavar="N:HEX")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("score", help="score a cell with the proxy or a model")
    p.add_argument("file")
    p.add_argument("--reward", default="proxy", metavar="proxy|gnn:<model>")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("dataset-build", help="build the 3-input corpus")
    p.add_argument("--cap", type=int, default=ds.DEFAULT_CAP)
    p.add_argument("--jobs", type=int, default=1)
    add_common(p)
    p.set_defaults(func=cmd_dataset_build)

    p = sub.add_parser("train-reward", help="train the routability reward model")
    p.add_argument("records", help="records.jsonl from dataset-build")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=60)
    add_common(p)
    p.set_defaults(func=cmd_train_reward)

    p = sub.add_parser("train-policy", help="GRPO-train the pivot policy")
    p.add_argument("records")
    p.add_argument("--split", help="split manifest JSON; train side is used")
    p.add_argument("--reward", default="proxy")
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--inner-steps", type=int, default=4)
    p.add_argument("--clip", type=float, default=0.2)
    p.add_argument("--kl-coef", type=float, default=0.05)
    p.add_argument("--lr", type=float, default=0.1)
    add_common(p)
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("optimize", help="policy-guided topology optimization")
    p.add_argument("file")
    p.add_argument("--policy", help="policy.json (default: uniform)")
    p.add_argument("--reward", default="proxy")
    p.add_argument("--budget", type=int, default=5)
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    add_common(p)
    p.set_defaults(func=cmd_optimize)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except Exception as exc:  # invariant violations and bugs
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
