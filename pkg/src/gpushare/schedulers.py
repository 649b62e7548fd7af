"""Admission policies over a shared device fleet.

Two task-granular policies know resource requests: mgb-sm packs thread
blocks onto SMs and admits on the first device where both memory and
placement succeed; mgb-warps checks memory only and picks the
memory-feasible device with the fewest warps in use.  Two job-granular
baselines know nothing about resources: sa gives each job a whole device,
cg round-robins jobs onto devices up to a fixed ratio.  Deferred requests
wait in one FIFO queue that is re-evaluated whenever something releases.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .device_model import DeviceState
from .errors import ConfigError, ContractViolation
from .task_builder import ResourceRequest

ASSIGN = "assign"
DEFER = "defer"
REJECT = "reject"


@dataclass(frozen=True)
class PolicyConfig:
    kind: str  # sa | cg | mgb-sm | mgb-warps
    cg_ratio: int = 6

    @property
    def task_level(self) -> bool:
        return self.kind in ("mgb-sm", "mgb-warps")

    @property
    def label(self) -> str:
        return f"cg:{self.cg_ratio}" if self.kind == "cg" else self.kind


def parse_policy(text: str) -> PolicyConfig:
    if text in ("sa", "mgb-sm", "mgb-warps"):
        return PolicyConfig(text)
    if text == "cg" or text.startswith("cg:"):
        ratio = 6
        if ":" in text:
            try:
                ratio = int(text.split(":", 1)[1])
            except ValueError:
                raise ConfigError(f"bad cg ratio in {text!r}") from None
        if ratio < 1:
            raise ConfigError("cg ratio must be >= 1")
        return PolicyConfig("cg", ratio)
    raise ConfigError(f"unknown scheduling policy {text!r}")


@dataclass(frozen=True)
class ScheduleRequest:
    job_id: str
    task_uid: str
    resources: ResourceRequest
    level: str  # "task" or "job"
    submitted_ms: float


@dataclass(frozen=True)
class Decision:
    outcome: str
    device: int | None = None


@dataclass
class Scheduler:
    devices: list[DeviceState]
    policy: PolicyConfig
    skip_ahead: bool = True
    log: list[dict] | None = None

    pending: deque = field(default_factory=deque)
    sa_owner: dict[int, str] = field(default_factory=dict)
    cg_counts: list[int] = field(init=False)
    cg_cursor: int = 0
    _cg_claims: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.cg_counts = [0] * len(self.devices)

    # -- admission ---------------------------------------------------------

    def submit(self, req: ScheduleRequest, now: float) -> Decision:
        """Decide a fresh request; Defer queues it for later repacking."""
        decision = self._try(req, now)
        if decision.outcome == DEFER:
            self.pending.append(req)
        self._log(now, req, decision)
        return decision

    def on_release(self, now: float) -> list[tuple[ScheduleRequest, int]]:
        """Re-evaluate deferred requests in FIFO order after a release.

        Admits greedily; with skip_ahead (the default) a still-infeasible
        request is skipped so later fits can proceed, otherwise evaluation
        stops at the first Defer.
        """
        admitted: list[tuple[ScheduleRequest, int]] = []
        for req in list(self.pending):
            decision = self._try(req, now)
            self._log(now, req, decision)
            if decision.outcome == ASSIGN:
                self.pending.remove(req)
                admitted.append((req, decision.device))  # type: ignore[arg-type]
            elif not self.skip_ahead:
                break
        return admitted

    def job_ended(self, job_id: str) -> None:
        """Release job-granular claims (sa device ownership, cg slots)."""
        for idx, owner in list(self.sa_owner.items()):
            if owner == job_id:
                del self.sa_owner[idx]
        if self.policy.kind == "cg":
            idx = self._cg_claims.pop(job_id, None)
            if idx is not None:
                self.cg_counts[idx] -= 1

    # -- policy cores ------------------------------------------------------

    def _try(self, req: ScheduleRequest, now: float) -> Decision:
        kind = self.policy.kind
        if kind == "mgb-sm":
            return self._try_mgb_sm(req)
        if kind == "mgb-warps":
            return self._try_mgb_warps(req)
        if kind == "sa":
            return self._try_sa(req)
        return self._try_cg(req)

    def _try_mgb_sm(self, req: ScheduleRequest) -> Decision:
        res = req.resources
        for idx, dev in enumerate(self.devices):
            if dev.free_mem < res.mem_bytes:
                continue
            plan = dev.try_place_blocks(res)
            if plan is None:
                continue
            dev.commit_placement(plan, req.task_uid, res)
            if not dev.reserve_memory(res.mem_bytes):
                raise ContractViolation("memory vanished between check and reserve")
            dev.assign_memory(req.task_uid, res.mem_bytes)
            dev.add_warps(req.task_uid, res.total_warps)
            return Decision(ASSIGN, idx)
        if self._impossible_everywhere(res, check_compute=True):
            return Decision(REJECT)
        return Decision(DEFER)

    def _try_mgb_warps(self, req: ScheduleRequest) -> Decision:
        res = req.resources
        feasible = [
            (dev.in_use_warps, idx)
            for idx, dev in enumerate(self.devices)
            if dev.free_mem >= res.mem_bytes
        ]
        if not feasible:
            if self._impossible_everywhere(res, check_compute=False):
                return Decision(REJECT)
            return Decision(DEFER)
        _, idx = min(feasible)
        dev = self.devices[idx]
        dev.reserve_memory(res.mem_bytes)
        dev.assign_memory(req.task_uid, res.mem_bytes)
        dev.add_warps(req.task_uid, res.total_warps)
        return Decision(ASSIGN, idx)

    def _try_sa(self, req: ScheduleRequest) -> Decision:
        for idx in range(len(self.devices)):
            if idx not in self.sa_owner:
                self.sa_owner[idx] = req.job_id
                return Decision(ASSIGN, idx)
        return Decision(DEFER)

    def _try_cg(self, req: ScheduleRequest) -> Decision:
        n = len(self.devices)
        for step in range(n):
            idx = (self.cg_cursor + step) % n
            if self.cg_counts[idx] < self.policy.cg_ratio:
                self.cg_counts[idx] += 1
                self._cg_claims[req.job_id] = idx
                self.cg_cursor = (idx + 1) % n
                return Decision(ASSIGN, idx)
        return Decision(DEFER)

    def _impossible_everywhere(self, res: ResourceRequest, check_compute: bool) -> bool:
        """True when no device could satisfy the request even when empty."""
        for dev in self.devices:
            if res.mem_bytes > dev.spec.mem_bytes:
                continue
            if check_compute and dev.empty_capacity_blocks(res) < res.thread_blocks:
                continue
            return False
        return True

    # -- logging -----------------------------------------------------------

    def _log(self, now: float, req: ScheduleRequest, decision: Decision) -> None:
        if self.log is None:
            return
        dev = self.devices[decision.device] if decision.device is not None else None
        self.log.append(
            {
                "time_ms": now,
                "job_id": req.job_id,
                "task": req.task_uid,
                "policy": self.policy.label,
                "outcome": decision.outcome,
                "device": decision.device,
                "mem_bytes": req.resources.mem_bytes,
                "free_mem_after": dev.free_mem if dev else None,
                "in_use_warps_after": dev.in_use_warps if dev else None,
            }
        )
