"""Discrete-event simulation of jobs sharing a fleet of devices.

Each job is one program walked op by op: host-side ops cost nothing,
kernel launches occupy a device for their duration and the walker waits
for each kernel before moving on.  Task admission happens at the probe
point for statically analyzable tasks and at the first launch for lazy
ones.  Kernels co-resident on a device all slow down by the same factor
once the in-flight warps exceed what the SMs can run concurrently:
rate = min(1, capacity / active_warps).

Everything is deterministic: events tie-break on (kind, seq) and all
randomness comes from per-job generators seeded from the run seed.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from functools import lru_cache

from . import lazy_runtime as lrt
from .device_model import DeviceSpec, DeviceState
from .errors import ConfigError, ContractViolation
from .lazy_runtime import LazyState, PseudoAddress
from .schedulers import DEFER, REJECT, PolicyConfig, ScheduleRequest, Scheduler
from .task_builder import (
    GpuTask,
    ProgramPoint,
    ResourceRequest,
    TaskAnalysis,
    analyze_program,
)
from .trace_model import GpuOp, OpKind, parse_program

WARP_SIZE = 32

# event kinds, in tie-break priority order at equal timestamps
KERNEL_END = 0
WORKER_PULL = 1

_ZERO_RES = ResourceRequest(
    mem_bytes=0, heap_limit_bytes=0, thread_blocks=0, warps_per_block=0,
    total_warps=0, threads_per_block=0, regs_per_thread=0, smem_per_block=0,
    est_duration_ms=0.0)


@lru_cache(maxsize=512)
def analyze_trace(text: str) -> TaskAnalysis:
    """Parse and analyze a trace, cached so repeated templates are free."""
    return analyze_program(parse_program(text))


@dataclass(frozen=True)
class SimJob:
    job_id: str
    trace_text: str
    template: str = ""
    job_class: str = ""


@dataclass
class SimConfig:
    policy: PolicyConfig
    devices: list[DeviceSpec]
    workers: int
    seed: int = 0
    skip_ahead: bool = True
    interference_model: str = "ps"
    collect_decision_log: bool = False
    check_invariants: bool = False

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError("need at least one worker")
        if self.interference_model not in ("ps", "none"):
            raise ConfigError(
                f"unknown interference model {self.interference_model!r}; "
                "use 'ps' (processor sharing) or 'none'")


@dataclass
class SimReport:
    policy: str
    seed: int
    workers: int
    devices: list[dict]
    jobs: list[dict]
    kernels: list[dict]
    crashes: list[dict]
    decisions: list[dict] | None
    makespan_ms: float
    completed: int
    crashed: int
    workload_digest: str = ""
    workload_name: str = ""

    def to_dict(self) -> dict:
        d = {
            "policy": self.policy,
            "seed": self.seed,
            "workers": self.workers,
            "devices": self.devices,
            "jobs": self.jobs,
            "kernels": self.kernels,
            "crashes": self.crashes,
            "makespan_ms": self.makespan_ms,
            "completed": self.completed,
            "crashed": self.crashed,
            "workload_digest": self.workload_digest,
            "workload_name": self.workload_name,
        }
        if self.decisions is not None:
            d["decisions"] = self.decisions
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


# -- internal runtime records -------------------------------------------------


@dataclass
class _Instance:
    """One dynamic occurrence of a task inside a running job."""
    uid: str
    task: GpuTask
    request: ResourceRequest | None = None
    device: int | None = None
    admitted: bool = False
    prepared: bool = False
    finished: bool = False
    launches_left: int = 0
    pending_static: set[int] = field(default_factory=set)
    live_lazy: set[PseudoAddress] = field(default_factory=set)


@dataclass
class _Job:
    job_id: str
    spec: SimJob
    analysis: TaskAnalysis
    rng: random.Random
    state: str = "queued"  # queued running blocked waiting_kernel done crashed
    cur_block: str = ""
    op_idx: int = 0
    probe_queue: list[int] | None = None
    blocked_kind: str | None = None  # claim | probe | launch
    blocked_req: ScheduleRequest | None = None
    blocked_inst: _Instance | None = None
    claimed: int | None = None
    lazystate: LazyState = field(default_factory=LazyState)
    instances: list[_Instance] = field(default_factory=list)
    open_by_task: dict[int, _Instance] = field(default_factory=dict)
    occurrences: dict[int, int] = field(default_factory=dict)
    addr_owner: dict[PseudoAddress, _Instance] = field(default_factory=dict)
    sym_task: dict[str, GpuTask] = field(default_factory=dict)
    pull_ms: float = 0.0
    end_ms: float = 0.0
    wait_ms: float = 0.0

    def new_instance(self, task: GpuTask) -> _Instance:
        occ = self.occurrences.get(task.task_id, 0)
        self.occurrences[task.task_id] = occ + 1
        inst = _Instance(
            uid=f"{self.job_id}.t{task.task_id}.{occ}",
            task=task,
            launches_left=len(task.launch_ops),
            pending_static=set() if task.lazy else set(task.bound_mem_ops()),
        )
        self.instances.append(inst)
        self.open_by_task[task.task_id] = inst
        return inst


@dataclass
class _Kernel:
    kid: int
    job: _Job
    inst: _Instance
    op: GpuOp
    warps: int
    solo_ms: float
    remaining_ms: float
    start_ms: float
    oversub: bool = False


class _Pool:
    """Kernels resident on one device plus the shared progress rate."""

    def __init__(self, spec: DeviceSpec, shared: bool = True):
        self.w_cap = spec.sm_count * spec.max_warps_per_sm
        self.shared = shared
        self.kernels: dict[int, _Kernel] = {}
        self.rate = 1.0
        self.last_ms = 0.0
        self.epoch = 0

    def advance(self, now: float) -> None:
        dt = now - self.last_ms
        if dt > 0:
            for k in self.kernels.values():
                k.remaining_ms = max(0.0, k.remaining_ms - self.rate * dt)
        self.last_ms = now

    def recompute(self) -> None:
        active = sum(k.warps for k in self.kernels.values())
        if not self.shared:
            self.rate = 1.0
        else:
            self.rate = 1.0 if active <= self.w_cap else self.w_cap / active
        if self.rate < 1.0:
            for k in self.kernels.values():
                k.oversub = True
        self.epoch += 1


class SimEngine:
    def __init__(self, jobs: list[SimJob], config: SimConfig):
        self.config = config
        self.devices = [DeviceState(spec, i) for i, spec in enumerate(config.devices)]
        shared = config.interference_model == "ps"
        self.pools = [_Pool(spec, shared) for spec in config.devices]
        log: list[dict] | None = [] if config.collect_decision_log else None
        self.sched = Scheduler(self.devices, config.policy,
                               skip_ahead=config.skip_ahead, log=log)
        self.jobs = []
        for j in jobs:
            analysis = analyze_trace(j.trace_text)
            job = _Job(j.job_id, j, analysis,
                       random.Random(f"{config.seed}|{j.job_id}|branch"))
            for task in analysis.tasks:
                for sym in task.mem_objs:
                    job.sym_task.setdefault(sym, task)
            self.jobs.append(job)
        self.queue = list(self.jobs)
        self.queue_pos = 0
        self.free_workers = config.workers
        self.workload_digest = ""
        self.workload_name = ""
        self.heap: list[tuple[float, int, int, tuple]] = []
        self.seq = 0
        self.now = 0.0
        self.next_kid = 1
        self.waiting: dict[str, _Job] = {}  # blocked request uid -> job
        self.release_dirty = False
        self.kernel_records: list[dict] = []
        self.crash_records: list[dict] = []

    # -- event plumbing ------------------------------------------------------

    def _push(self, time_ms: float, kind: int, payload: tuple) -> None:
        heapq.heappush(self.heap, (time_ms, kind, self.seq, payload))
        self.seq += 1

    def run(self) -> SimReport:
        self._push(0.0, WORKER_PULL, ())
        while self.heap:
            time_ms, kind, _, payload = heapq.heappop(self.heap)
            self.now = time_ms
            if kind == KERNEL_END:
                self._on_kernel_end(*payload)
            else:
                self._on_pull()
            self._drain_releases()
            if self.config.check_invariants:
                self._check_invariants()
        unfinished = [j.job_id for j in self.jobs if j.state not in ("done", "crashed")]
        if unfinished:
            raise ContractViolation(
                f"simulation stalled with unfinished jobs: {unfinished} "
                f"(states {[j.state for j in self.jobs if j.job_id in unfinished]})")
        return self._report()

    def _drain_releases(self) -> None:
        while self.release_dirty:
            self.release_dirty = False
            for req, device in self.sched.on_release(self.now):
                self._resume(req, device)

    # -- workers -------------------------------------------------------------

    def _on_pull(self) -> None:
        while self.free_workers > 0 and self.queue_pos < len(self.queue):
            job = self.queue[self.queue_pos]
            self.queue_pos += 1
            self.free_workers -= 1
            job.pull_ms = self.now
            job.state = "running"
            job.cur_block = job.analysis.fn.entry
            job.op_idx = 0
            if not self.config.policy.task_level:
                req = ScheduleRequest(job.job_id, f"{job.job_id}.claim",
                                      _ZERO_RES, "job", self.now)
                dec = self.sched.submit(req, self.now)
                if dec.outcome == DEFER:
                    self._block(job, "claim", req, None)
                    continue
                job.claimed = dec.device
            self._run_steps(job)

    def _free_worker(self) -> None:
        self.free_workers += 1
        if self.queue_pos < len(self.queue):
            self._push(self.now, WORKER_PULL, ())

    # -- admission -----------------------------------------------------------

    def _block(self, job: _Job, kind: str, req: ScheduleRequest,
               inst: _Instance | None) -> None:
        job.state = "blocked"
        job.blocked_kind = kind
        job.blocked_req = req
        job.blocked_inst = inst
        self.waiting[req.task_uid] = job

    def _resume(self, req: ScheduleRequest, device: int) -> None:
        job = self.waiting.pop(req.task_uid)
        wait = self.now - req.submitted_ms
        job.wait_ms += wait
        kind = job.blocked_kind
        inst = job.blocked_inst
        job.blocked_kind = job.blocked_req = job.blocked_inst = None
        job.state = "running"
        if kind == "claim":
            job.claimed = device
        else:
            assert inst is not None
            self._mark_admitted(inst, device)
            if kind == "probe":
                assert job.probe_queue
                job.probe_queue.pop(0)
        self._run_steps(job)

    def _mark_admitted(self, inst: _Instance, device: int) -> None:
        inst.admitted = True
        inst.device = device

    def _admit_on_claim(self, job: _Job, inst: _Instance,
                        res: ResourceRequest) -> bool:
        """Chunk allocation for the job-granular policies; False means OOM."""
        dev = self.devices[job.claimed]  # type: ignore[index]
        if not dev.allocate_raw(inst.uid, res.mem_bytes):
            self._crash(job, "oom", res.mem_bytes, job.claimed)
            return False
        self._mark_admitted(inst, job.claimed)  # type: ignore[arg-type]
        return True

    # -- walker --------------------------------------------------------------

    def _run_steps(self, job: _Job) -> None:
        fn = job.analysis.fn
        while job.state == "running":
            block = fn.blocks[job.cur_block]
            if job.probe_queue is None:
                point = ProgramPoint(job.cur_block, job.op_idx)
                job.probe_queue = list(job.analysis.probes.get(point, ()))
            if job.probe_queue:
                if not self._handle_probe(job):
                    return
                continue
            if job.op_idx >= len(block.ops):
                job.probe_queue = None
                if not self._advance_block(job, block):
                    return
                continue
            op = block.ops[job.op_idx]
            if op.kind is OpKind.LAUNCH:
                self._handle_launch(job, op)
                return  # waiting_kernel, blocked, or crashed
            self._exec_mem_op(job, op)
            if job.state != "running":
                return  # crashed on a chunk allocation
            job.op_idx += 1
            job.probe_queue = None

    def _advance_block(self, job: _Job, block) -> bool:
        succs = block.succs
        if not succs:
            self._finish_job(job)
            return False
        if len(succs) == 1:
            job.cur_block = succs[0]
        else:
            r = job.rng.random()
            job.cur_block = succs[0] if r < block.branch_prob else succs[1]
        job.op_idx = 0
        return True

    def _handle_probe(self, job: _Job) -> bool:
        """Admit the next static task probed at the current point.
        Returns False when the walker must stop (blocked or crashed)."""
        tid = job.probe_queue[0]  # type: ignore[index]
        task = job.analysis.tasks[tid]
        inst = job.new_instance(task)
        inst.request = task.resources
        if self.config.policy.task_level:
            req = ScheduleRequest(job.job_id, inst.uid, task.resources,
                                  "task", self.now)
            dec = self.sched.submit(req, self.now)
            if dec.outcome == DEFER:
                self._block(job, "probe", req, inst)
                return False
            if dec.outcome == REJECT:
                self._crash(job, "rejected", task.resources.mem_bytes, None)
                return False
            self._mark_admitted(inst, dec.device)  # type: ignore[arg-type]
        else:
            if not self._admit_on_claim(job, inst, task.resources):
                return False
        job.probe_queue.pop(0)  # type: ignore[union-attr]
        return True

    def _handle_launch(self, job: _Job, op: GpuOp) -> None:
        task = job.analysis.task_of_launch(op.op_id)
        inst = job.open_by_task.get(task.task_id)
        if inst is None or inst.finished:
            inst = job.new_instance(task)
        if not inst.admitted:
            if not inst.prepared:
                inst.request = lrt.kernel_launch_prepare(
                    job.lazystate, op, static_req=None,
                    objs=tuple(sorted(task.mem_objs)))
                inst.prepared = True
            if self.config.policy.task_level:
                req = ScheduleRequest(job.job_id, inst.uid, inst.request,
                                      "task", self.now)
                dec = self.sched.submit(req, self.now)
                if dec.outcome == DEFER:
                    self._block(job, "launch", req, inst)
                    return
                if dec.outcome == REJECT:
                    self._crash(job, "rejected", inst.request.mem_bytes, None)
                    return
                self._mark_admitted(inst, dec.device)  # type: ignore[arg-type]
            else:
                if not self._admit_on_claim(job, inst, inst.request):
                    return
        if job.lazystate.pending_bind:
            for addr, rop in lrt.replay(job.lazystate, inst.device):
                if rop.kind is OpKind.MALLOC:
                    inst.live_lazy.add(addr)
                    job.addr_owner[addr] = inst
        self._start_kernel(job, inst, op)
        job.op_idx += 1
        job.probe_queue = None

    # -- op execution ----------------------------------------------------------

    def _exec_mem_op(self, job: _Job, op: GpuOp) -> None:
        state = job.lazystate
        if op.kind is OpKind.SET_HEAP_LIMIT:
            lrt.set_heap_limit(state, op.bytes)
            return
        if op.kind is OpKind.CALL:
            raise ContractViolation("call op survived inlining")
        sym = op.symbol
        task = job.sym_task.get(sym) if sym is not None else None
        if task is not None and not task.lazy and not op.lazy:
            inst = job.open_by_task.get(task.task_id)
            if inst is not None and op.op_id in inst.pending_static:
                inst.pending_static.remove(op.op_id)
                self._maybe_complete(job, inst)
                return
        # lazy path: queue against a pseudo address until a launch binds it
        if op.kind is OpKind.MALLOC:
            lrt.lazy_alloc(state, sym, op.bytes, op)
            return
        addr = state.addr_of(sym)
        if addr is None:
            return  # object handled statically (or already gone): no-op here
        st = state.addrs[addr]
        if st.bound:
            if op.kind is OpKind.FREE:
                lrt.release_bound(state, addr)
                inst = job.addr_owner.pop(addr, None)
                if inst is not None:
                    inst.live_lazy.discard(addr)
                    self._maybe_complete(job, inst)
            return
        lrt.record_op(state, addr, op)

    # -- kernels ---------------------------------------------------------------

    def _start_kernel(self, job: _Job, inst: _Instance, op: GpuOp) -> None:
        wpb = -(-op.threads_per_block // WARP_SIZE)
        warps = wpb * op.thread_blocks
        kid = self.next_kid
        self.next_kid += 1
        k = _Kernel(kid, job, inst, op, warps, op.base_duration_ms,
                    op.base_duration_ms, self.now)
        pool = self.pools[inst.device]  # type: ignore[index]
        pool.advance(self.now)
        pool.kernels[kid] = k
        self._repost_pool(inst.device)  # type: ignore[arg-type]
        job.state = "waiting_kernel"

    def _repost_pool(self, device: int) -> None:
        pool = self.pools[device]
        pool.recompute()
        for kid, k in pool.kernels.items():
            eta = self.now + k.remaining_ms / pool.rate
            self._push(eta, KERNEL_END, (device, kid, pool.epoch))

    def _on_kernel_end(self, device: int, kid: int, epoch: int) -> None:
        pool = self.pools[device]
        if epoch != pool.epoch or kid not in pool.kernels:
            return  # superseded by a later pool change
        pool.advance(self.now)
        k = pool.kernels.pop(kid)
        actual = k.solo_ms if not k.oversub else self.now - k.start_ms
        self.kernel_records.append({
            "job_id": k.job.job_id,
            "task": k.inst.uid,
            "kernel": k.op.kernel,
            "device": device,
            "start_ms": k.start_ms,
            "end_ms": self.now,
            "solo_ms": k.solo_ms,
            "actual_ms": actual,
        })
        self._repost_pool(device)
        k.inst.launches_left -= 1
        job = k.job
        job.state = "running"
        self._maybe_complete(job, k.inst)
        self._run_steps(job)

    # -- completion and teardown ------------------------------------------------

    def _maybe_complete(self, job: _Job, inst: _Instance) -> None:
        if not inst.admitted or inst.finished:
            return
        if inst.launches_left > 0 or inst.pending_static or inst.live_lazy:
            return
        self._release_instance(job, inst)

    def _release_instance(self, job: _Job, inst: _Instance) -> None:
        inst.finished = True
        if job.open_by_task.get(inst.task.task_id) is inst:
            del job.open_by_task[inst.task.task_id]
        if inst.admitted and inst.device is not None:
            self.devices[inst.device].release_task(inst.uid)
            self.release_dirty = True

    def _finish_job(self, job: _Job) -> None:
        job.state = "done"
        job.end_ms = self.now
        self._teardown(job)

    def _crash(self, job: _Job, reason: str, requested: int,
               device: int | None) -> None:
        job.state = "crashed"
        job.end_ms = self.now
        self.crash_records.append({
            "job_id": job.job_id,
            "time_ms": self.now,
            "reason": reason,
            "requested_bytes": requested,
            "free_bytes": (self.devices[device].free_mem
                           if device is not None else None),
            "device": device,
        })
        self._teardown(job)

    def _teardown(self, job: _Job) -> None:
        for inst in job.instances:
            if not inst.finished:
                self._release_instance(job, inst)
        if not self.config.policy.task_level:
            self.sched.job_ended(job.job_id)
            self.release_dirty = True
        self._free_worker()

    # -- invariants ---------------------------------------------------------------

    def _check_invariants(self) -> None:
        for dev in self.devices:
            dev.check_conservation()
        if self.config.policy.task_level and self.config.skip_ahead:
            for req in self.sched.pending:
                for dev in self.devices:
                    if dev.free_mem < req.resources.mem_bytes:
                        continue
                    if (self.config.policy.kind == "mgb-sm"
                            and dev.try_place_blocks(req.resources) is None):
                        continue
                    raise ContractViolation(
                        f"deferred task {req.task_uid} fits device "
                        f"{dev.index} but was not admitted")

    # -- report ---------------------------------------------------------------------

    def _report(self) -> SimReport:
        jobs_out = []
        for job in self.jobs:
            jobs_out.append({
                "job_id": job.job_id,
                "template": job.spec.template,
                "class": job.spec.job_class,
                "state": job.state,
                "pull_ms": job.pull_ms,
                "end_ms": job.end_ms,
                "turnaround_ms": job.end_ms,
                "wait_ms": job.wait_ms,
            })
        makespan = max((j.end_ms for j in self.jobs), default=0.0)
        return SimReport(
            policy=self.config.policy.label,
            seed=self.config.seed,
            workers=self.config.workers,
            devices=[{
                "name": d.name,
                "sm_count": d.sm_count,
                "mem_bytes": d.mem_bytes,
            } for d in self.config.devices],
            jobs=jobs_out,
            kernels=self.kernel_records,
            crashes=self.crash_records,
            decisions=self.sched.log,
            makespan_ms=makespan,
            completed=sum(1 for j in self.jobs if j.state == "done"),
            crashed=sum(1 for j in self.jobs if j.state == "crashed"),
            workload_digest=self.workload_digest,
            workload_name=self.workload_name,
        )


def run_sim(jobs: list[SimJob], config: SimConfig,
            workload_digest: str = "", workload_name: str = "") -> SimReport:
    engine = SimEngine(jobs, config)
    engine.workload_digest = workload_digest
    engine.workload_name = workload_name
    return engine.run()
