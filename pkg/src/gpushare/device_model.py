"""Multi-SM device model with occupancy-aware thread block placement.

A device is a bag of identical SMs plus a flat memory pool.  Placement
spreads a kernel's thread blocks round robin across SMs, one block per
visit, honoring per-SM warp, block, register, and shared memory ceilings.
All mutations bump a version counter so that a placement plan computed
against a stale state is refused instead of silently misapplied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError, ContractViolation
from .task_builder import ResourceRequest

KIB = 1024
MIB = 1024 * KIB
GIB = 1024 * MIB


@dataclass(frozen=True)
class DeviceSpec:
    name: str
    sm_count: int
    mem_bytes: int
    max_warps_per_sm: int = 64
    max_tbs_per_sm: int = 32
    regs_per_sm: int = 65536
    smem_per_sm_bytes: int = 96 * KIB


PRESETS = {
    "p100": DeviceSpec("p100", sm_count=56, mem_bytes=16 * GIB,
                       smem_per_sm_bytes=64 * KIB),
    "v100": DeviceSpec("v100", sm_count=80, mem_bytes=16 * GIB,
                       smem_per_sm_bytes=96 * KIB),
}


def device_spec(name: str) -> DeviceSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown device preset {name!r}") from None


def occupancy_limit_per_sm(spec: DeviceSpec, res: ResourceRequest) -> int:
    """Max thread blocks of this shape one SM can host when empty."""
    limits = [spec.max_tbs_per_sm]
    if res.warps_per_block > 0:
        limits.append(spec.max_warps_per_sm // res.warps_per_block)
    regs_per_block = res.regs_per_thread * res.threads_per_block
    if regs_per_block > 0:
        limits.append(spec.regs_per_sm // regs_per_block)
    if res.smem_per_block > 0:
        limits.append(spec.smem_per_sm_bytes // res.smem_per_block)
    return max(0, min(limits))


@dataclass(frozen=True)
class PlacementPlan:
    """Pure result of try_place_blocks: blocks per SM plus the cursor after."""
    blocks_per_sm: tuple[int, ...]
    final_cursor: int
    version: int


@dataclass
class _Residency:
    task_uid: str
    mem_bytes: int = 0
    warps: int = 0
    blocks_per_sm: list[int] | None = None
    regs_per_block: int = 0
    smem_per_block: int = 0
    warps_per_block: int = 0


@dataclass
class DeviceState:
    spec: DeviceSpec
    index: int = 0

    free_mem: int = field(init=False)
    in_use_warps: int = 0
    rr_cursor: int = 0
    version: int = 0
    sm_warps: list[int] = field(init=False)
    sm_tbs: list[int] = field(init=False)
    sm_regs: list[int] = field(init=False)
    sm_smem: list[int] = field(init=False)
    resident: dict[str, _Residency] = field(default_factory=dict)

    def __post_init__(self):
        self.free_mem = self.spec.mem_bytes
        n = self.spec.sm_count
        self.sm_warps = [0] * n
        self.sm_tbs = [0] * n
        self.sm_regs = [0] * n
        self.sm_smem = [0] * n

    # -- placement ---------------------------------------------------------

    def _sm_admits(self, sm: int, res: ResourceRequest, extra: list[int]) -> bool:
        spec = self.spec
        if self.sm_tbs[sm] + extra[sm] + 1 > spec.max_tbs_per_sm:
            return False
        wpb = res.warps_per_block
        if self.sm_warps[sm] + extra[sm] * wpb + wpb > spec.max_warps_per_sm:
            return False
        rpb = res.regs_per_thread * res.threads_per_block
        if rpb and self.sm_regs[sm] + extra[sm] * rpb + rpb > spec.regs_per_sm:
            return False
        spb = res.smem_per_block
        if spb and self.sm_smem[sm] + extra[sm] * spb + spb > spec.smem_per_sm_bytes:
            return False
        return True

    def try_place_blocks(self, res: ResourceRequest) -> PlacementPlan | None:
        """Plan a round-robin placement of res.thread_blocks; None if it
        cannot fit alongside current residents.  Does not mutate state."""
        n = self.spec.sm_count
        placed = [0] * n
        remaining = res.thread_blocks
        cursor = self.rr_cursor
        misses = 0
        while remaining > 0:
            sm = cursor % n
            cursor += 1
            if self._sm_admits(sm, res, placed):
                placed[sm] += 1
                remaining -= 1
                misses = 0
            else:
                misses += 1
                if misses >= n:
                    return None
        return PlacementPlan(tuple(placed), cursor % n, self.version)

    def commit_placement(self, plan: PlacementPlan, task_uid: str,
                         res: ResourceRequest) -> None:
        if plan.version != self.version:
            raise ContractViolation(
                f"placement plan is stale (device {self.index} version "
                f"{self.version}, plan version {plan.version})")
        rpb = res.regs_per_thread * res.threads_per_block
        for sm, count in enumerate(plan.blocks_per_sm):
            if not count:
                continue
            self.sm_tbs[sm] += count
            self.sm_warps[sm] += count * res.warps_per_block
            self.sm_regs[sm] += count * rpb
            self.sm_smem[sm] += count * res.smem_per_block
        self.rr_cursor = plan.final_cursor
        entry = self._entry(task_uid)
        entry.blocks_per_sm = list(plan.blocks_per_sm)
        entry.regs_per_block = rpb
        entry.smem_per_block = res.smem_per_block
        entry.warps_per_block = res.warps_per_block
        self.version += 1

    def empty_capacity_blocks(self, res: ResourceRequest) -> int:
        """Thread blocks of this shape the device could hold if empty."""
        return occupancy_limit_per_sm(self.spec, res) * self.spec.sm_count

    # -- memory and warp accounting -----------------------------------------

    def reserve_memory(self, nbytes: int) -> bool:
        if nbytes > self.free_mem:
            return False
        self.free_mem -= nbytes
        self.version += 1
        return True

    def assign_memory(self, task_uid: str, nbytes: int) -> None:
        self._entry(task_uid).mem_bytes += nbytes
        self.version += 1

    def add_warps(self, task_uid: str, warps: int) -> None:
        self._entry(task_uid).warps += warps
        self.in_use_warps += warps
        self.version += 1

    def allocate_raw(self, task_uid: str, nbytes: int) -> bool:
        """Memory-only grab used by the job-granular policies."""
        if not self.reserve_memory(nbytes):
            return False
        self.assign_memory(task_uid, nbytes)
        return True

    def release_task(self, task_uid: str) -> int:
        """Return every resource held under task_uid; gives back its bytes."""
        entry = self.resident.pop(task_uid, None)
        if entry is None:
            raise ContractViolation(
                f"release of unknown task {task_uid!r} on device {self.index}")
        self.free_mem += entry.mem_bytes
        self.in_use_warps -= entry.warps
        if entry.blocks_per_sm:
            for sm, count in enumerate(entry.blocks_per_sm):
                if not count:
                    continue
                self.sm_tbs[sm] -= count
                self.sm_warps[sm] -= count * entry.warps_per_block
                self.sm_regs[sm] -= count * entry.regs_per_block
                self.sm_smem[sm] -= count * entry.smem_per_block
        self.version += 1
        return entry.mem_bytes

    def _entry(self, task_uid: str) -> _Residency:
        entry = self.resident.get(task_uid)
        if entry is None:
            entry = _Residency(task_uid)
            self.resident[task_uid] = entry
        return entry

    # -- invariants ----------------------------------------------------------

    def check_conservation(self) -> None:
        """Raise ContractViolation if any ledger stopped balancing."""
        spec = self.spec
        held = sum(e.mem_bytes for e in self.resident.values())
        if self.free_mem < 0 or self.free_mem + held != spec.mem_bytes:
            raise ContractViolation(
                f"device {self.index}: free {self.free_mem} + held {held} "
                f"!= capacity {spec.mem_bytes}")
        warps = sum(e.warps for e in self.resident.values())
        if warps != self.in_use_warps:
            raise ContractViolation(
                f"device {self.index}: warp ledger {self.in_use_warps} "
                f"!= sum of residents {warps}")
        for sm in range(spec.sm_count):
            if not (0 <= self.sm_tbs[sm] <= spec.max_tbs_per_sm):
                raise ContractViolation(
                    f"device {self.index} sm {sm}: {self.sm_tbs[sm]} blocks")
            if not (0 <= self.sm_warps[sm] <= spec.max_warps_per_sm):
                raise ContractViolation(
                    f"device {self.index} sm {sm}: {self.sm_warps[sm]} warps")
            if not (0 <= self.sm_regs[sm] <= spec.regs_per_sm):
                raise ContractViolation(
                    f"device {self.index} sm {sm}: {self.sm_regs[sm]} regs")
            if not (0 <= self.sm_smem[sm] <= spec.smem_per_sm_bytes):
                raise ContractViolation(
                    f"device {self.index} sm {sm}: {self.sm_smem[sm]} smem")
