"""Metric extraction and the policy comparison harness.

Throughput counts completed jobs per second of makespan.  Normalized
throughput and turnaround speedup are relative to the sa run of the same
(workload, seed), which the harness runs implicitly when sa is not in
the requested policy list.  Crashed jobs count against crash_pct and are
excluded from turnaround.  Kernel slowdown is the mean of
(actual/solo - 1) over all finished kernels.
"""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass

from .device_model import DeviceSpec
from .errors import ConfigError
from .schedulers import parse_policy
from .sim_engine import SimConfig, SimJob, SimReport, run_sim
from .workload_gen import Workload

CSV_COLUMNS = [
    "workload", "policy", "workers", "seed", "throughput", "norm_throughput",
    "avg_turnaround_ms", "speedup", "crash_pct", "slowdown_pct", "makespan_ms",
]


@dataclass(frozen=True)
class RunMetrics:
    workload: str
    policy: str
    workers: int
    seed: int
    n_jobs: int
    completed: int
    crashed: int
    makespan_ms: float
    throughput_jps: float
    norm_throughput: float
    avg_turnaround_ms: float
    avg_wait_ms: float
    speedup: float
    crash_pct: float
    slowdown_pct: float


def _raw(report: SimReport) -> tuple[float, float, float]:
    """(throughput jobs/s, avg turnaround ms, avg wait ms), completed only."""
    done = [j for j in report.jobs if j["state"] == "done"]
    turnarounds = [j["turnaround_ms"] for j in done]
    waits = [j["wait_ms"] for j in done]
    makespan_s = report.makespan_ms / 1000.0
    return (
        (report.completed / makespan_s) if makespan_s > 0 else 0.0,
        statistics.fmean(turnarounds) if turnarounds else 0.0,
        statistics.fmean(waits) if waits else 0.0,
    )


def compute_metrics(report: SimReport, baseline: SimReport | None = None,
                    workload: str = "") -> RunMetrics:
    """Extract a run's metric row, normalized against a baseline run.

    The baseline (usually the sa run) must be from the same workload;
    with no baseline the run is normalized against itself.
    """
    if baseline is None:
        baseline = report
    if (report.workload_digest and baseline.workload_digest
            and report.workload_digest != baseline.workload_digest):
        raise ConfigError("baseline report is from a different workload")
    n = len(report.jobs)
    slowdowns = [
        (k["actual_ms"] / k["solo_ms"] - 1.0) * 100.0
        for k in report.kernels
        if k["solo_ms"] > 0
    ]
    tput, turnaround, wait = _raw(report)
    base_tput, base_turnaround, _ = _raw(baseline)
    return RunMetrics(
        workload=workload or report.workload_name,
        policy=report.policy,
        workers=report.workers,
        seed=report.seed,
        n_jobs=n,
        completed=report.completed,
        crashed=report.crashed,
        makespan_ms=report.makespan_ms,
        throughput_jps=tput,
        norm_throughput=(tput / base_tput) if base_tput > 0 else 0.0,
        avg_turnaround_ms=turnaround,
        avg_wait_ms=wait,
        speedup=(base_turnaround / turnaround) if turnaround > 0 else 0.0,
        crash_pct=(report.crashed / n * 100.0) if n else 0.0,
        slowdown_pct=statistics.fmean(slowdowns) if slowdowns else 0.0,
    )


def run_workload(workload: Workload, policy: str, devices: list[DeviceSpec],
                 workers: int, seed: int, *, skip_ahead: bool = True,
                 interference_model: str = "ps",
                 collect_decision_log: bool = False,
                 check_invariants: bool = False, name: str = "") -> SimReport:
    jobs = [SimJob(j.job_id, j.trace_text, j.template, j.job_class)
            for j in workload.jobs]
    config = SimConfig(
        policy=parse_policy(policy),
        devices=list(devices),
        workers=workers,
        seed=seed,
        skip_ahead=skip_ahead,
        interference_model=interference_model,
        collect_decision_log=collect_decision_log,
        check_invariants=check_invariants,
    )
    return run_sim(jobs, config, workload_digest=workload.digest,
                   workload_name=name or f"{workload.mix}x{workload.n_jobs}")


@dataclass
class CompareResult:
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            out = {}
            for col in CSV_COLUMNS:
                v = row[col]
                if isinstance(v, float):
                    out[col] = f"{v:.3f}" if col.endswith("_ms") else f"{v:.6g}"
                else:
                    out[col] = v
            writer.writerow(out)
        return buf.getvalue()


def compare(workloads: dict[str, dict[int, Workload]], policies: list[str],
            devices: list[DeviceSpec], workers: int, *,
            skip_ahead: bool = True) -> CompareResult:
    """Run the full (workload x policy x seed) grid.

    `workloads` maps name -> {seed -> Workload}.  Appends per-(workload,
    policy) mean and stddev rows after each seed group.
    """
    baselines: dict[tuple[str, int], SimReport] = {}
    for wname in sorted(workloads):
        for seed, wl in sorted(workloads[wname].items()):
            baselines[(wname, seed)] = run_workload(
                wl, "sa", devices, workers, seed,
                skip_ahead=skip_ahead, name=wname)

    rows: list[dict] = []
    for wname in sorted(workloads):
        for policy in sorted(policies):
            group: list[dict] = []
            for seed, wl in sorted(workloads[wname].items()):
                base = baselines[(wname, seed)]
                if policy == "sa":
                    report = base
                else:
                    report = run_workload(wl, policy, devices, workers, seed,
                                          skip_ahead=skip_ahead, name=wname)
                group.append(_row(compute_metrics(report, base, wname)))
            rows.extend(group)
            rows.append(_aggregate(group, "mean", statistics.fmean))
            rows.append(_aggregate(group, "stddev", statistics.pstdev))
    return CompareResult(rows)


def _row(m: RunMetrics) -> dict:
    return {
        "workload": m.workload,
        "policy": m.policy,
        "workers": m.workers,
        "seed": m.seed,
        "throughput": m.throughput_jps,
        "norm_throughput": m.norm_throughput,
        "avg_turnaround_ms": m.avg_turnaround_ms,
        "speedup": m.speedup,
        "crash_pct": m.crash_pct,
        "slowdown_pct": m.slowdown_pct,
        "makespan_ms": m.makespan_ms,
    }


def _aggregate(group: list[dict], label: str, fn) -> dict:
    out = dict(group[0])
    out["seed"] = label
    for col in CSV_COLUMNS:
        if col in ("workload", "policy", "workers", "seed"):
            continue
        out[col] = float(fn([row[col] for row in group]))
    return out
