"""Scheduler-side control plane: per-function trees, VM pools and placement."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .ftree import FunctionTree, Rotation, UnknownVm, VmId

REGISTRY = "REGISTRY"

DEFAULT_VM_MEMORY_MB = 4096
DEFAULT_NIC_BPS = 125_000_000
DEFAULT_FUNCTION_CAP = 20
DEFAULT_IDLE_TIMEOUT_S = 900.0


class ManagerError(Exception):
    pass


class DuplicateFunction(ManagerError, KeyError):
    pass


class UnknownFunction(ManagerError, KeyError):
    pass


class PoolExhausted(ManagerError):
    pass


@dataclass(frozen=True)
class FunctionId:
    id: str
    image: str = ""
    memory_mb: int = 128

    def __post_init__(self):
        if self.memory_mb <= 0:
            raise ValueError(f"memory_mb must be positive: {self.memory_mb}")

    def __str__(self) -> str:
        return self.id


@dataclass
class VmState:
    vm: VmId
    memory_capacity_mb: int = DEFAULT_VM_MEMORY_MB
    nic_capacity_Bps: float = DEFAULT_NIC_BPS
    resident_functions: set = field(default_factory=set)
    busy_count: int = 0
    last_active: float = 0.0
    memory_used_mb: int = 0


@dataclass
class ProvisionPlan:
    function: str
    entries: list = field(default_factory=list)  # (VmId, upstream VmId or REGISTRY)
    exhausted: bool = False

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class ManagerConfig:
    idle_timeout_s: float = DEFAULT_IDLE_TIMEOUT_S
    per_vm_function_cap: int = DEFAULT_FUNCTION_CAP
    ping_interval_s: float = 1.0
    vm_memory_mb: int = DEFAULT_VM_MEMORY_MB
    vm_nic_gbps: float = 1.0
    placement: str = "binpack"

    @property
    def vm_nic_Bps(self) -> float:
        return self.vm_nic_gbps * 1e9 / 8


class FtManager:
    """Per-function tree map plus free/active VM pools.

    Not thread-safe: the simulation loop is the only writer.
    """

    def __init__(self, vms, config: ManagerConfig | None = None):
        self.config = config or ManagerConfig()
        self.trees: dict[str, FunctionTree] = {}
        self.functions: dict[str, FunctionId] = {}
        self.vms: dict[VmId, VmState] = {}
        self.free_pool: deque[VmId] = deque()
        self.active_pool: set[VmId] = set()
        self.failed: set[VmId] = set()
        for vm in vms:
            self.vms[vm] = VmState(
                vm, self.config.vm_memory_mb, self.config.vm_nic_Bps
            )
            self.free_pool.append(vm)

    @classmethod
    def with_pool(cls, n: int, config: ManagerConfig | None = None, first_id: int = 1):
        vms = [VmId(i, f"10.0.{i // 256}.{i % 256}:7000") for i in range(first_id, first_id + n)]
        return cls(vms, config)

    # --------------------------------------------------------- functions
    def register_function(self, fid: str, image: str = "", memory_mb: int = 128) -> None:
        if fid in self.functions:
            raise DuplicateFunction(fid)
        self.functions[fid] = FunctionId(fid, image or fid, memory_mb)
        self.trees[fid] = FunctionTree(fid)

    def tree(self, fid: str) -> FunctionTree:
        try:
            return self.trees[fid]
        except KeyError:
            raise UnknownFunction(fid) from None

    def upstream(self, fid: str, vm):
        parent = self.tree(fid).upstream_of(vm)
        return REGISTRY if parent is None else parent

    # --------------------------------------------------------- placement
    def _fits(self, st: VmState, fn: FunctionId) -> bool:
        return (
            len(st.resident_functions) < self.config.per_vm_function_cap
            and st.memory_used_mb + fn.memory_mb <= st.memory_capacity_mb
        )

    def _reserve(self) -> VmId:
        if not self.free_pool:
            raise PoolExhausted("free VM pool is empty")
        vm = self.free_pool.popleft()
        self.active_pool.add(vm)
        return vm

    def place_function(self, fid: str) -> VmId:
        """Pick a host for one more container of ``fid``.

        Binpacking prefers the most loaded active VM that still fits; a VM
        already in the function's tree is never chosen twice.
        """
        fn = self.functions.get(fid)
        if fn is None:
            raise UnknownFunction(fid)
        tree = self.trees[fid]
        cands = [
            self.vms[v] for v in self.active_pool
            if v not in tree and self._fits(self.vms[v], fn)
        ]
        if self.config.placement == "spread":
            if self.free_pool:
                vm = self._reserve()
            elif cands:
                vm = min(cands, key=lambda s: (len(s.resident_functions), s.memory_used_mb, s.vm)).vm
            else:
                raise PoolExhausted("no VM can host another function")
        elif cands:
            vm = max(cands, key=lambda s: (len(s.resident_functions), s.memory_used_mb, -s.vm.id)).vm
        else:
            vm = self._reserve()
        st = self.vms[vm]
        st.resident_functions.add(fid)
        st.memory_used_mb += fn.memory_mb
        return vm

    def scale_out(self, fid: str, demand: int, now: float = 0.0) -> ProvisionPlan:
        """Grow ``fid``'s tree toward ``demand`` nodes; returns the new (vm, upstream) pairs."""
        tree = self.tree(fid)
        plan = ProvisionPlan(fid)
        deficit = demand - len(tree)
        for _ in range(max(0, deficit)):
            try:
                vm = self.place_function(fid)
            except PoolExhausted:
                plan.exhausted = True
                break
            parent = tree.insert(vm)
            st = self.vms[vm]
            st.last_active = max(st.last_active, now)
            plan.entries.append((vm, REGISTRY if parent is None else parent))
        return plan

    def attach(self, fid: str, vm: VmId, now: float = 0.0):
        """Place ``fid`` on a specific VM (used to seed warm roots in scenarios)."""
        fn = self.functions[fid]
        if vm in self.free_pool:
            self.free_pool.remove(vm)
            self.active_pool.add(vm)
        st = self.vms[vm]
        st.resident_functions.add(fid)
        st.memory_used_mb += fn.memory_mb
        st.last_active = max(st.last_active, now)
        parent = self.trees[fid].insert(vm)
        return REGISTRY if parent is None else parent

    # ---------------------------------------------------------- activity
    def mark_busy(self, vm: VmId, now: float) -> None:
        st = self.vms[vm]
        st.busy_count += 1
        st.last_active = now

    def mark_idle(self, vm: VmId, now: float) -> None:
        st = self.vms[vm]
        st.busy_count -= 1
        st.last_active = now

    def _detach(self, vm: VmId) -> list[tuple[str, list[Rotation]]]:
        st = self.vms[vm]
        reports = []
        for fid in sorted(st.resident_functions):
            tree = self.trees[fid]
            if vm in tree:
                reports.append((fid, tree.delete(vm)))
        st.resident_functions.clear()
        st.memory_used_mb = 0
        st.busy_count = 0
        return reports

    def reclaim_idle(self, now: float) -> list[VmId]:
        timeout = self.config.idle_timeout_s
        idle = sorted(
            v for v in self.active_pool
            if self.vms[v].busy_count == 0 and now - self.vms[v].last_active >= timeout
        )
        for vm in idle:
            self._detach(vm)
            self.active_pool.discard(vm)
            self.free_pool.append(vm)
        return idle

    def release(self, vm: VmId) -> list[tuple[str, list[Rotation]]]:
        """Return one VM to the free pool regardless of idleness."""
        if vm not in self.active_pool:
            raise UnknownVm(vm)
        reports = self._detach(vm)
        self.active_pool.discard(vm)
        self.free_pool.append(vm)
        return reports

    def on_vm_failure(self, vm: VmId) -> list[tuple[str, list[Rotation]]]:
        if vm not in self.active_pool:
            raise UnknownVm(vm)
        reports = self._detach(vm)
        self.active_pool.discard(vm)
        self.failed.add(vm)
        return reports

    # ------------------------------------------------------------ checks
    def check_invariants(self) -> list[str]:
        problems = []
        free = set(self.free_pool)
        if len(free) != len(self.free_pool):
            problems.append("duplicate VM in free pool")
        if free & self.active_pool:
            problems.append(f"VMs in both pools: {sorted(free & self.active_pool)}")
        unpooled = set(self.vms) - free - self.active_pool - self.failed
        if unpooled:
            problems.append(f"VMs in no pool: {sorted(unpooled)}")
        cap = self.config.per_vm_function_cap
        for st in self.vms.values():
            if len(st.resident_functions) > cap:
                problems.append(f"{st.vm} hosts {len(st.resident_functions)} functions > {cap}")
            if st.memory_used_mb > st.memory_capacity_mb:
                problems.append(f"{st.vm} memory {st.memory_used_mb} > {st.memory_capacity_mb}")
        for fid, tree in self.trees.items():
            for vm in tree.nodes:
                if vm not in self.active_pool:
                    problems.append(f"{vm} in tree {fid} but not active")
            problems.extend(f"{fid}: {p}" for p in tree.check_invariants())
        return problems


def containers_needed(rps: float, mean_duration_s: float) -> int:
    return math.ceil(rps * mean_duration_s - 1e-9) if rps > 0 else 0
