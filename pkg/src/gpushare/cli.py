"""Command line front end.

Subcommands:
  run           simulate one workload under one policy, emit a JSON report
  gen-workload  sample a seeded workload to JSONL
  build-tasks   parse a trace and show (or dump) its GPU tasks
  compare       run a (workload x policy x seed) grid, emit CSV

Exit codes: 0 ok, 2 bad input/config, 3 internal contract violation.
"""

from __future__ import annotations

import argparse
import json
import sys

from .device_model import MIB, PRESETS, DeviceSpec, device_spec
from .errors import ConfigError, ContractViolation, GpuShareError
from .metrics import compare, compute_metrics, run_workload
from .schedulers import parse_policy
from .task_builder import analyze_program
from .trace_model import parse_program
from .workload_gen import (
    STANDARD_SUITE,
    Workload,
    gen_workload,
    load_catalog,
    standard_workload,
    workload_from_jsonl,
)


def parse_devices(spec: str) -> list[DeviceSpec]:
    """Parse 'p100:2' / 'p100:2,v100:1' or '@inventory.json'."""
    if spec.startswith("@"):
        try:
            with open(spec[1:]) as fh:
                items = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read device inventory: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"device inventory is not valid JSON: {exc}") from None
        devices = []
        for item in items:
            if "preset" in item:
                base = device_spec(item["preset"])
                item = {**base.__dict__, **{k: v for k, v in item.items()
                                            if k != "preset"}}
            try:
                devices.append(DeviceSpec(**item))
            except TypeError as exc:
                raise ConfigError(f"bad device entry: {exc}") from None
        if not devices:
            raise ConfigError("device inventory is empty")
        return devices
    devices = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, count = part.partition(":")
        n = 1
        if count:
            try:
                n = int(count)
            except ValueError:
                raise ConfigError(f"bad device count in {part!r}") from None
        if n < 1:
            raise ConfigError(f"bad device count in {part!r}")
        devices.extend([device_spec(name)] * n)
    if not devices:
        raise ConfigError(f"no devices in {spec!r}")
    return devices


def parse_seeds(text: str) -> list[int]:
    """Parse '3', '1,2,5' or '1-5'."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, dash, hi = part.partition("-")
        try:
            if dash:
                a, b = int(lo), int(hi)
                if b < a:
                    raise ValueError
                seeds.extend(range(a, b + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"bad seed spec {part!r}") from None
    if not seeds:
        raise ConfigError(f"no seeds in {text!r}")
    return seeds


def _resolve_workload(args, seed: int) -> Workload:
    catalog = load_catalog(args.catalog)
    if args.workload_file:
        try:
            with open(args.workload_file) as fh:
                return workload_from_jsonl(fh.read(), seed=seed)
        except OSError as exc:
            raise ConfigError(f"cannot read workload: {exc}") from None
    if args.workload:
        return standard_workload(args.workload, seed, catalog)
    if args.mix:
        return gen_workload(args.mix, args.n, seed, catalog)
    raise ConfigError("give --workload, --workload-file, or --mix/--n")


def _write_out(text: str, path: str | None) -> None:
    if path and path != "-":
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- subcommands -----------------------------------------------------------


def _cmd_run(args) -> int:
    parse_policy(args.policy)  # fail fast on typos
    workload = _resolve_workload(args, args.seed)
    devices = parse_devices(args.devices)
    report = run_workload(
        workload, args.policy, devices, args.workers, args.seed,
        skip_ahead=not args.strict_fifo,
        interference_model=args.interference,
        collect_decision_log=args.decision_log,
        check_invariants=args.check_invariants,
        name=args.workload or args.mix or "custom",
    )
    _write_out(report.to_json(), args.out)
    if args.summary:
        m = compute_metrics(report)
        print(
            f"# completed {m.completed}/{m.n_jobs} crashed {m.crashed} "
            f"makespan {m.makespan_ms / 1000.0:.1f}s "
            f"throughput {m.throughput_jps:.4f} jobs/s "
            f"slowdown {m.slowdown_pct:.2f}%",
            file=sys.stderr,
        )
    return 0


def _cmd_gen_workload(args) -> int:
    catalog = load_catalog(args.catalog)
    if args.workload:
        wl = standard_workload(args.workload, args.seed, catalog)
    else:
        wl = gen_workload(args.mix, args.n, args.seed, catalog)
    _write_out(wl.to_jsonl(), args.out)
    return 0


def _cmd_build_tasks(args) -> int:
    try:
        with open(args.trace) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read trace: {exc}") from None
    analysis = analyze_program(parse_program(text))
    if args.dump_tasks:
        lines = []
        for task in analysis.tasks:
            lines.append(json.dumps({
                "task_id": task.task_id,
                "kernels": [u.kernel for u in task.units],
                "launch_ops": list(task.launch_ops),
                "mem_objs": sorted(task.mem_objs),
                "lazy": task.lazy,
                "probe": ({"block": task.probe.block, "index": task.probe.index}
                          if task.probe else None),
                "resources": {
                    "mem_bytes": task.resources.mem_bytes,
                    "heap_limit_bytes": task.resources.heap_limit_bytes,
                    "thread_blocks": task.resources.thread_blocks,
                    "warps_per_block": task.resources.warps_per_block,
                    "total_warps": task.resources.total_warps,
                    "regs_per_thread": task.resources.regs_per_thread,
                    "smem_per_block": task.resources.smem_per_block,
                    "est_duration_ms": task.resources.est_duration_ms,
                },
            }, sort_keys=True))
        _write_out("\n".join(lines) + "\n", args.out)
        return 0
    out = [f"program {analysis.program.name}: {len(analysis.tasks)} tasks"]
    for task in analysis.tasks:
        probe = (f"{task.probe.block}@{task.probe.index}" if task.probe
                 else "none")
        out.append(
            f"  task {task.task_id}: kernels {','.join(u.kernel for u in task.units)}"
            f"; mem {task.resources.mem_bytes / MIB:.1f} MiB"
            f"; blocks {task.resources.thread_blocks}"
            f" x {task.resources.threads_per_block}t"
            f"; probe {probe}; {'lazy' if task.lazy else 'static'}"
        )
        out.append(f"    objs: {', '.join(sorted(task.mem_objs)) or '-'}")
    _write_out("\n".join(out) + "\n", args.out)
    return 0


def _cmd_compare(args) -> int:
    catalog = load_catalog(args.catalog)
    seeds = parse_seeds(args.seeds)
    devices = parse_devices(args.devices)
    names = (list(STANDARD_SUITE) if args.workloads == "all"
             else [w.strip() for w in args.workloads.split(",") if w.strip()])
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    for p in policies:
        parse_policy(p)
    workloads = {
        name: {seed: standard_workload(name, seed, catalog) for seed in seeds}
        for name in names
    }
    result = compare(workloads, policies, devices, args.workers,
                     skip_ahead=not args.strict_fifo)
    _write_out(result.to_csv(), args.out)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpushare",
        description="Compiler-guided GPU sharing: task analysis, scheduling "
                    "policies, and a deterministic device simulator.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add_common(p):
        p.add_argument("--catalog", default="std",
                       help="builtin catalog (std, neural) or a JSON path")
        p.add_argument("--out", default="-", help="output path (default stdout)")

    p_run = sub.add_parser("run", help="simulate one workload")
    add_common(p_run)
    p_run.add_argument("--workload", help=f"standard name ({', '.join(STANDARD_SUITE)})")
    p_run.add_argument("--workload-file", help="JSONL workload path")
    p_run.add_argument("--mix", help="custom mix like 3:1 (with --n)")
    p_run.add_argument("--n", type=int, default=16, help="jobs for --mix")
    p_run.add_argument("--policy", required=True,
                       help="sa, cg:<ratio>, mgb-sm, or mgb-warps")
    p_run.add_argument("--devices", default="p100:2",
                       help="like p100:2,v100:1 or @inventory.json")
    p_run.add_argument("--workers", type=int, default=10)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--strict-fifo", action="store_true",
                       help="stop repacking at the first deferred task")
    p_run.add_argument("--interference", choices=["ps", "none"], default="ps",
                       help="kernel contention model (default ps)")
    p_run.add_argument("--decision-log", action="store_true",
                       help="include every scheduling decision in the report")
    p_run.add_argument("--check-invariants", action="store_true",
                       help="verify device ledgers after every event")
    p_run.add_argument("--summary", action="store_true",
                       help="print a one-line summary to stderr")

    p_gen = sub.add_parser("gen-workload", help="emit a workload as JSONL")
    add_common(p_gen)
    p_gen.add_argument("--workload", help="standard name (w1..w8)")
    p_gen.add_argument("--mix", default="3:1")
    p_gen.add_argument("--n", type=int, default=16)
    p_gen.add_argument("--seed", type=int, default=0)

    p_bt = sub.add_parser("build-tasks", help="analyze one trace file")
    p_bt.add_argument("trace", help="trace file path")
    p_bt.add_argument("--dump-tasks", action="store_true",
                      help="emit tasks as JSONL instead of a summary")
    p_bt.add_argument("--out", default="-")

    p_cmp = sub.add_parser("compare", help="policy comparison grid to CSV")
    add_common(p_cmp)
    p_cmp.add_argument("--workloads", default="all",
                       help="comma list of standard names, or 'all'")
    p_cmp.add_argument("--policies", default="sa,cg:2,cg:3,mgb-sm,mgb-warps")
    p_cmp.add_argument("--seeds", default="1-5", help="like 1-5 or 0,2,4")
    p_cmp.add_argument("--devices", default="p100:2")
    p_cmp.add_argument("--workers", type=int, default=10)
    p_cmp.add_argument("--strict-fifo", action="store_true")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "gen-workload": _cmd_gen_workload,
        "build-tasks": _cmd_build_tasks,
        "compare": _cmd_compare,
    }
    try:
        return handlers[args.cmd](args)
    except ContractViolation as exc:
        print(f"gpushare: contract violation: {exc}", file=sys.stderr)
        return 3
    except GpuShareError as exc:
        print(f"gpushare: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
