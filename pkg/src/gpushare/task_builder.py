"""Build device-independent GPU tasks from an inlined trace program.

A launch anchors a unit task.  Memory ops join it only when the CFG
proves they always accompany the launch: allocations and host-to-device
transfers must dominate it, frees and device-to-host transfers must
post-dominate it.  Unit tasks sharing a memory object merge (the
shares-an-object relation is closed transitively), every op the analysis
could not bind is handed to the lazy runtime, and each task gets a probe
point plus an aggregate resource request.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import AnalysisError
from .trace_model import (
    DominatorMap,
    FunctionGraph,
    GpuOp,
    LAZY_ELIGIBLE,
    OpKind,
    Program,
    compute_dominators,
    compute_postdominators,
    inline_calls,
)

DEFAULT_HEAP_LIMIT = 8 * 2**20
BYTE_LIMIT = 2**63  # byte arithmetic past this is treated as corrupt input
WARP_SIZE = 32


@dataclass(frozen=True)
class ProgramPoint:
    """A position before the op at `index` in block `block`.

    index == len(block.ops) means the point after the last op.
    """

    block: str
    index: int


@dataclass(frozen=True)
class ResourceRequest:
    mem_bytes: int
    heap_limit_bytes: int
    thread_blocks: int
    warps_per_block: int
    total_warps: int
    threads_per_block: int
    regs_per_thread: int
    smem_per_block: int
    est_duration_ms: float


@dataclass(frozen=True)
class UnitTask:
    launch_op: int
    kernel: str
    order: int  # program-order rank of the launch
    mem_objs: frozenset[str]
    alloc_ops: frozenset[int]
    h2d_ops: frozenset[int]
    memset_ops: frozenset[int]
    d2h_ops: frozenset[int]
    free_ops: frozenset[int]
    heap_ops: frozenset[int]
    grid: tuple[int, int, int]
    block: tuple[int, int, int]


@dataclass(frozen=True)
class GpuTask:
    task_id: int
    units: tuple[UnitTask, ...]
    mem_objs: frozenset[str]
    probe: ProgramPoint | None
    resources: ResourceRequest
    lazy: bool

    @property
    def launch_ops(self) -> tuple[int, ...]:
        return tuple(u.launch_op for u in self.units)

    def bound_mem_ops(self) -> frozenset[int]:
        """Bound non-launch member ops; heap ops excluded (they run first)."""
        out: set[int] = set()
        for u in self.units:
            out |= u.alloc_ops | u.h2d_ops | u.memset_ops | u.d2h_ops | u.free_ops
        return frozenset(out)

    def member_ops(self) -> frozenset[int]:
        return self.bound_mem_ops() | set(self.launch_ops)


@dataclass(frozen=True)
class TaskAnalysis:
    """Everything the runtime needs to execute one program's tasks."""

    program: Program  # inlined, lazy-marked
    fn: FunctionGraph
    tasks: tuple[GpuTask, ...]
    dom: DominatorMap
    pdom: DominatorMap
    probes: dict[ProgramPoint, tuple[int, ...]]  # point -> task ids
    launch_task: dict[int, int]  # launch op_id -> task id
    positions: dict[int, tuple[str, int]]  # op_id -> (block, index)

    def task_of_launch(self, op_id: int) -> GpuTask:
        return self.tasks[self.launch_task[op_id]]


def _op_positions(fn: FunctionGraph) -> dict[int, tuple[str, int]]:
    pos = {}
    for label, blk in fn.blocks.items():
        for i, op in enumerate(blk.ops):
            pos[op.op_id] = (label, i)
    return pos


def _dominates_point(dom: DominatorMap, a: tuple[str, int], b: tuple[str, int]) -> bool:
    """Does the op/point at position a execute before b on every path to b?"""
    (ba, ia), (bb, ib) = a, b
    if ba == bb:
        return ia < ib
    return dom.dominates(ba, bb)


def _postdominates_op(pdom: DominatorMap, a: tuple[str, int], b: tuple[str, int]) -> bool:
    """Does the op at position a execute after b on every path b takes to exit?"""
    (ba, ia), (bb, ib) = a, b
    if ba == bb:
        return ia > ib
    return pdom.dominates(ba, bb)


def build_unit_tasks(p: Program) -> list[UnitTask]:
    """One UnitTask per launch, with CFG-proven memory op bindings.

    `p` must be a single-function (inlined) program.  Ops already flagged
    lazy never bind.  A launch referencing a symbol no malloc declares is
    an analysis error.
    """
    fn = p.main
    dom = compute_dominators(fn)
    pdom = compute_postdominators(fn)
    return _build_units(fn, dom, pdom)


def _build_units(fn: FunctionGraph, dom: DominatorMap, pdom: DominatorMap) -> list[UnitTask]:
    pos = _op_positions(fn)
    ops_in_order = [op for blk in fn.blocks.values() for op in blk.ops]
    declared = {op.symbol for op in ops_in_order if op.kind is OpKind.MALLOC}
    launches = [op for op in ops_in_order if op.kind is OpKind.LAUNCH]

    units = []
    for order, launch in enumerate(launches):
        for sym in launch.args:
            if sym not in declared:
                raise AnalysisError(
                    f"launch {launch.kernel} references symbol {sym!r} with no malloc"
                )
        lpos = pos[launch.op_id]
        args = frozenset(launch.args)
        alloc: set[int] = set()
        h2d: set[int] = set()
        memset: set[int] = set()
        d2h: set[int] = set()
        free: set[int] = set()
        for op in ops_in_order:
            if op.lazy or op.kind in (OpKind.LAUNCH, OpKind.CALL, OpKind.SET_HEAP_LIMIT):
                continue
            if op.symbol not in args:
                continue
            opos = pos[op.op_id]
            if op.kind in (OpKind.MALLOC, OpKind.MEMCPY_H2D, OpKind.MEMSET):
                # setup ops must precede the launch on every path
                if _dominates_point(dom, opos, lpos):
                    {OpKind.MALLOC: alloc, OpKind.MEMCPY_H2D: h2d, OpKind.MEMSET: memset}[
                        op.kind
                    ].add(op.op_id)
            else:
                # teardown ops must follow the launch on every path
                if _postdominates_op(pdom, opos, lpos):
                    {OpKind.MEMCPY_D2H: d2h, OpKind.FREE: free}[op.kind].add(op.op_id)

        heap = _heap_op_for(ops_in_order, pos, dom, lpos)
        units.append(
            UnitTask(
                launch_op=launch.op_id,
                kernel=launch.kernel or "",
                order=order,
                mem_objs=args,
                alloc_ops=frozenset(alloc),
                h2d_ops=frozenset(h2d),
                memset_ops=frozenset(memset),
                d2h_ops=frozenset(d2h),
                free_ops=frozenset(free),
                heap_ops=frozenset({heap.op_id} if heap else ()),
                grid=launch.grid,
                block=launch.block,
            )
        )
    return units


def _heap_op_for(ops_in_order, pos, dom: DominatorMap, lpos) -> GpuOp | None:
    """The last set_heap_limit that executes before the launch on every path."""
    best = None
    best_key = None
    for op in ops_in_order:
        if op.kind is not OpKind.SET_HEAP_LIMIT or op.lazy:
            continue
        opos = pos[op.op_id]
        if not _dominates_point(dom, opos, lpos):
            continue
        key = (len(dom.doms[opos[0]]), opos[1])
        if best_key is None or key > best_key:
            best, best_key = op, key
    return best


def merge_unit_tasks(units: list[UnitTask]) -> list[tuple[UnitTask, ...]]:
    """Group unit tasks into connected components of the shares-an-object
    relation.  Two launches that never share a symbol directly still merge
    when a chain of shared objects links them.
    """
    parent = list(range(len(units)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    owner: dict[str, int] = {}
    for i, u in enumerate(units):
        for sym in u.mem_objs:
            if sym in owner:
                union(owner[sym], i)
            else:
                owner[sym] = i

    groups: dict[int, list[UnitTask]] = {}
    for i, u in enumerate(units):
        groups.setdefault(find(i), []).append(u)
    ordered = sorted(groups.values(), key=lambda g: min(u.order for u in g))
    return [tuple(sorted(g, key=lambda u: u.order)) for g in ordered]


def compute_resource_request(units: tuple[UnitTask, ...], fn: FunctionGraph) -> ResourceRequest:
    """Aggregate a merged task's static footprint and widest launch shape."""
    by_id = {op.op_id: op for blk in fn.blocks.values() for op in blk.ops}
    alloc_ids = sorted({a for u in units for a in u.alloc_ops})
    mem = sum(by_id[a].bytes for a in alloc_ids)

    first = min(units, key=lambda u: u.order)
    heap = DEFAULT_HEAP_LIMIT
    if first.heap_ops:
        heap = by_id[next(iter(first.heap_ops))].bytes
    mem += heap
    if mem >= BYTE_LIMIT:
        raise AnalysisError(f"task memory request {mem} bytes overflows the byte limit")

    launches = [by_id[u.launch_op] for u in units]

    def warps_of(op: GpuOp) -> tuple[int, int]:
        wpb = -(-op.threads_per_block // WARP_SIZE)
        return op.thread_blocks, wpb

    widest = max(launches, key=lambda op: warps_of(op)[0] * warps_of(op)[1])
    tbs, wpb = warps_of(widest)
    return ResourceRequest(
        mem_bytes=mem,
        heap_limit_bytes=heap,
        thread_blocks=tbs,
        warps_per_block=wpb,
        total_warps=tbs * wpb,
        threads_per_block=widest.threads_per_block,
        regs_per_thread=max(op.regs_per_thread for op in launches),
        smem_per_block=max(op.smem_per_block for op in launches),
        est_duration_ms=sum(op.base_duration_ms for op in launches),
    )


def place_probe(
    units: tuple[UnitTask, ...], fn: FunctionGraph, dom: DominatorMap, pdom: DominatorMap
) -> ProgramPoint | None:
    """Latest program point that still sees the task's resources settle.

    The point must post-dominate every bound set_heap_limit (the only ops
    feeding resource values in this language; byte counts are literals)
    and dominate every bound GPU op of the task.  None means no such
    point exists and the whole task falls back to lazy binding.
    """
    pos = _op_positions(fn)
    member: set[int] = set()
    heap_ops: set[int] = set()
    for u in units:
        member.add(u.launch_op)
        member |= u.alloc_ops | u.h2d_ops | u.memset_ops | u.d2h_ops | u.free_ops
        heap_ops |= u.heap_ops

    member_pos = [pos[o] for o in member]
    heap_pos = [pos[o] for o in heap_ops]

    def valid(point: tuple[str, int]) -> bool:
        b, i = point
        for (ob, oi) in member_pos:
            if b == ob:
                if i > oi:
                    return False
            elif not dom.dominates(b, ob):
                return False
        for (ob, oi) in heap_pos:
            if b == ob:
                if i <= oi:
                    return False
            elif not pdom.dominates(b, ob):
                return False
        return True

    candidates = []
    for label, blk in fn.blocks.items():
        for i in range(len(blk.ops) + 1):
            if valid((label, i)):
                candidates.append((label, i))
    if not candidates:
        return None
    # latest point: valid points dominate the task's first op, so they sit on
    # one dominator chain; deepest block wins, ties go to the smaller label
    candidates.sort(key=lambda c: (-len(dom.doms[c[0]]), -c[1], c[0]))
    label, i = candidates[0]
    return ProgramPoint(label, i)


def mark_lazy_ops(p: Program) -> Program:
    """Flag every GPU op the static analysis left unbound as lazy.

    Idempotent: bound ops never gain the flag, already-lazy ops keep it.
    The result partitions ops: each one is either bound to a task or lazy.
    """
    fn = p.main
    units = build_unit_tasks(p)
    bound: set[int] = set()
    for u in units:
        bound.add(u.launch_op)
        bound |= u.alloc_ops | u.h2d_ops | u.memset_ops | u.d2h_ops | u.free_ops | u.heap_ops

    new_blocks = {}
    for label, blk in fn.blocks.items():
        ops = tuple(
            op
            if op.lazy or op.kind is OpKind.LAUNCH or op.op_id in bound
            else replace(op, lazy=True)
            for op in blk.ops
        )
        new_blocks[label] = replace(blk, ops=ops)
    new_fn = FunctionGraph(fn.name, fn.entry, new_blocks)
    return Program(p.name, {p.name: new_fn}, p.job_class)


def analyze_program(p: Program) -> TaskAnalysis:
    """Full pipeline: inline, bind, merge, place probes, mark lazy ops."""
    inlined = inline_calls(p)
    fn = inlined.main
    dom = compute_dominators(fn)
    pdom = compute_postdominators(fn)
    units = _build_units(fn, dom, pdom)
    marked = mark_lazy_ops(inlined)
    fn = marked.main

    lazy_syms = {
        op.symbol
        for blk in fn.blocks.values()
        for op in blk.ops
        if op.lazy and op.symbol is not None
    }

    tasks = []
    probes: dict[ProgramPoint, tuple[int, ...]] = {}
    launch_task: dict[int, int] = {}
    for tid, group in enumerate(merge_unit_tasks(units)):
        mem_objs = frozenset().union(*(u.mem_objs for u in group)) if group else frozenset()
        res = compute_resource_request(group, fn)
        probe = place_probe(group, fn, dom, pdom)
        lazy = probe is None or bool(mem_objs & lazy_syms)
        task = GpuTask(tid, group, mem_objs, probe, res, lazy)
        tasks.append(task)
        for u in group:
            launch_task[u.launch_op] = tid
        if probe is not None and not lazy:
            probes[probe] = probes.get(probe, ()) + (tid,)

    return TaskAnalysis(
        program=marked,
        fn=fn,
        tasks=tuple(tasks),
        dom=dom,
        pdom=pdom,
        probes=probes,
        launch_task=launch_task,
        positions=_op_positions(fn),
    )
