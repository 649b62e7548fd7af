"""Lazy binding runtime: defer unbound GPU ops until a launch needs them.

Ops the static analysis could not attach to a task do not touch any
device when they execute.  A malloc hands back a pseudo address (a tag
from its own id space, never a real pointer) and every later op on that
address is queued.  When a kernel launch arrives, kernel_launch_prepare
folds the queued allocation bytes into the task's resource request; once
the scheduler picks a device, replay materializes the queues there in
recorded order, exactly once.

A free that arrives while its address is still unbound cancels the whole
queue: the allocation never materializes anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import LazyBindingError
from .task_builder import DEFAULT_HEAP_LIMIT, ResourceRequest, WARP_SIZE
from .trace_model import GpuOp, OpKind


@dataclass(frozen=True)
class PseudoAddress:
    id: int
    symbol: str


@dataclass
class _AddrState:
    addr: PseudoAddress
    queue: list[tuple[int, GpuOp]] = field(default_factory=list)
    bound_device: int | None = None
    canceled: bool = False

    @property
    def bound(self) -> bool:
        return self.bound_device is not None


@dataclass
class LazyState:
    heap_limit_bytes: int = DEFAULT_HEAP_LIMIT
    next_id: int = 1
    seq: int = 0
    addrs: dict[PseudoAddress, _AddrState] = field(default_factory=dict)
    by_symbol: dict[str, PseudoAddress] = field(default_factory=dict)
    heap_log: list[tuple[int, int]] = field(default_factory=list)
    pending_bind: list[PseudoAddress] = field(default_factory=list)

    def addr_of(self, symbol: str) -> PseudoAddress | None:
        return self.by_symbol.get(symbol)


def lazy_alloc(state: LazyState, symbol: str, nbytes: int, op: GpuOp | None = None) -> PseudoAddress:
    """Defer an allocation: mint a fresh pseudo address and queue the malloc."""
    addr = PseudoAddress(state.next_id, symbol)
    state.next_id += 1
    rec = op if op is not None else GpuOp(-1, OpKind.MALLOC, symbol=symbol, bytes=nbytes)
    st = _AddrState(addr)
    st.queue.append((state.seq, rec))
    state.seq += 1
    state.addrs[addr] = st
    state.by_symbol[symbol] = addr
    return addr


def record_op(state: LazyState, addr: PseudoAddress, op: GpuOp) -> None:
    """Queue an op against an unbound pseudo address (FIFO per address)."""
    st = state.addrs.get(addr)
    if st is None:
        raise LazyBindingError(f"record on unknown pseudo address {addr}")
    if st.bound:
        raise LazyBindingError(f"record on already-bound pseudo address {addr}")
    if st.canceled:
        raise LazyBindingError(f"record on canceled pseudo address {addr}")
    if op.kind is OpKind.FREE:
        # free before any launch used it: the allocation never happens
        st.canceled = True
        state.seq += 1
        if state.by_symbol.get(addr.symbol) == addr:
            del state.by_symbol[addr.symbol]
        return
    st.queue.append((state.seq, op))
    state.seq += 1


def set_heap_limit(state: LazyState, nbytes: int) -> None:
    """Heap limit changes apply immediately and are logged for replay."""
    state.heap_limit_bytes = nbytes
    state.heap_log.append((state.seq, nbytes))
    state.seq += 1


def queued_bytes(state: LazyState, addr: PseudoAddress) -> int:
    st = state.addrs[addr]
    if st.canceled or st.bound:
        return 0
    return sum(op.bytes for _, op in st.queue if op.kind is OpKind.MALLOC)


def kernel_launch_prepare(
    state: LazyState,
    launch: GpuOp,
    static_req: ResourceRequest | None = None,
    objs: tuple[str, ...] | None = None,
) -> ResourceRequest:
    """Assemble the full resource request just before a launch.

    The request is the static part (when the task had one) plus the bytes
    still queued behind the launch's objects, with the device heap counted
    once.  `objs` widens the search to a whole merged task's objects so a
    multi-launch task is admitted as a unit; it defaults to the launch
    args.  Addresses folded in are staged for the next replay().
    """
    names = objs if objs is not None else launch.args
    lazy_bytes = 0
    stage: list[PseudoAddress] = []
    for sym in names:
        addr = state.by_symbol.get(sym)
        if addr is None:
            if static_req is None:
                raise LazyBindingError(
                    f"launch {launch.kernel}: no allocation queued for {sym!r}"
                )
            continue  # the static part covers this object
        st = state.addrs[addr]
        if st.bound or st.canceled:
            continue
        if not st.queue:
            raise LazyBindingError(f"launch {launch.kernel}: empty queue for {sym!r}")
        lazy_bytes += queued_bytes(state, addr)
        stage.append(addr)

    stage.sort(key=lambda a: a.id)
    state.pending_bind = stage

    if static_req is not None:
        base = static_req
        mem = static_req.mem_bytes + lazy_bytes
        heap = static_req.heap_limit_bytes
    else:
        heap = state.heap_limit_bytes
        mem = lazy_bytes + heap
        wpb = -(-launch.threads_per_block // WARP_SIZE)
        base = ResourceRequest(
            mem_bytes=0,
            heap_limit_bytes=heap,
            thread_blocks=launch.thread_blocks,
            warps_per_block=wpb,
            total_warps=launch.thread_blocks * wpb,
            threads_per_block=launch.threads_per_block,
            regs_per_thread=launch.regs_per_thread,
            smem_per_block=launch.smem_per_block,
            est_duration_ms=launch.base_duration_ms,
        )
    return ResourceRequest(
        mem_bytes=mem,
        heap_limit_bytes=heap,
        thread_blocks=base.thread_blocks,
        warps_per_block=base.warps_per_block,
        total_warps=base.total_warps,
        threads_per_block=base.threads_per_block,
        regs_per_thread=base.regs_per_thread,
        smem_per_block=base.smem_per_block,
        est_duration_ms=base.est_duration_ms,
    )


def release_bound(state: LazyState, addr: PseudoAddress) -> None:
    """Forget a bound address once the program frees its object for real."""
    st = state.addrs.get(addr)
    if st is None or not st.bound:
        raise LazyBindingError(f"release of unbound pseudo address {addr}")
    if state.by_symbol.get(addr.symbol) == addr:
        del state.by_symbol[addr.symbol]
    del state.addrs[addr]


def replay(state: LazyState, device: int) -> list[tuple[PseudoAddress, GpuOp]]:
    """Bind staged addresses to `device` and drain their queues in recorded
    order.  Each recorded op executes exactly once across all replays."""
    entries: list[tuple[int, PseudoAddress, GpuOp]] = []
    for addr in state.pending_bind:
        st = state.addrs[addr]
        if st.bound or st.canceled:
            continue
        st.bound_device = device
        for seq, op in st.queue:
            entries.append((seq, addr, op))
        st.queue = []
    state.pending_bind = []
    entries.sort(key=lambda e: e[0])
    return [(addr, op) for _, addr, op in entries]
