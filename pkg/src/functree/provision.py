"""Container provisioning protocol and block streaming over simulated links.

The scheduler drives each reserved VM through seven steps: insert into the
function tree, send PrepareFunction, the worker loads the manifest from the
metadata store and answers WorkerReady, the scheduler sends CreateContainer,
the worker pulls blocks from its upstream and reports ContainerCreated.

Each worker forwards every block it has fully received to its children in
the tree as soon as it lands (``stream_forward``), so deep nodes receive data
while their ancestors are still downloading.
"""
from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import wire
from .blockstore import CODEC_STORE, BlockFile, Manifest, decompress_block, n_blocks_for
from .ftree import FunctionTree, VmId
from .manager import REGISTRY, FtManager, ProvisionPlan
from .simnet import PRIO_BACKGROUND, PRIO_STARTUP, Host, SimWorld

POLICIES = (
    "faasnet_ft",
    "registry_full_pull",
    "registry_on_demand",
    "layer_tree_root",
    "all_to_all_tracker",
)


class SessionTimeout(RuntimeError):
    pass


class Phase(IntEnum):
    CREATED = 0
    MANIFEST_LOADED = 1
    READY_REPORTED = 2
    CONTAINER_REQUESTED = 3
    FETCHING = 4
    CONTAINER_STARTED = 5
    COMPLETED = 6
    FAILED = 7


class PhaseError(RuntimeError):
    pass


@dataclass
class ProvisionSession:
    function: str
    vm: VmId
    upstream: object
    phase: Phase = Phase.CREATED
    t_request: float = 0.0
    t_manifest_done: float = math.nan
    t_ready: float = math.nan
    t_started: float = math.nan
    t_completed: float = math.nan
    t_failed: float = math.nan
    digest_ok: bool | None = None
    prewarmed: bool = False
    failure: str = ""
    replica: "Replica" = field(default=None, repr=False)
    progress: int = 0

    def advance(self, phase: Phase) -> None:
        if self.phase == Phase.FAILED:
            raise PhaseError(f"session {self.function}@{self.vm} already failed")
        if phase != Phase.FAILED and phase != self.phase + 1:
            raise PhaseError(f"illegal transition {self.phase.name} -> {phase.name}")
        if phase == Phase.CONTAINER_STARTED and self.replica.gate_missing:
            raise PhaseError("container start before the startup blocks arrived")
        self.phase = phase
        self.progress += 1

    @property
    def blocks_received(self):
        return self.replica.have

    @property
    def latency(self) -> float:
        return self.t_started - self.t_request


# ---------------------------------------------------------------- images
@dataclass
class SimImage:
    """Block layout of one image as seen by the network.

    Synthetic profiles carry a per-block token instead of bytes; a replica's
    reassembled digest is the SHA-256 over its tokens in block order.  Images
    built from a real block file carry the compressed payloads themselves.
    """
    image_id: str
    block_size: int
    uncompressed_size: int
    clens: np.ndarray
    startup: np.ndarray
    content_digest: bytes
    payloads: list | None = None
    codec: int = CODEC_STORE
    _tokens: list | None = field(default=None, repr=False)

    @property
    def n_blocks(self) -> int:
        return len(self.clens)

    @property
    def compressed_size(self) -> int:
        return int(self.clens.sum())

    def raw_len(self, i: int) -> int:
        if i == self.n_blocks - 1:
            return self.uncompressed_size - i * self.block_size
        return self.block_size

    def tokens(self) -> list:
        if self.payloads is not None:
            return self.payloads
        if self._tokens is None:
            base = hashlib.sha256(self.image_id.encode()).digest()
            self._tokens = [
                hashlib.sha256(base + i.to_bytes(8, "little")).digest()
                for i in range(self.n_blocks)
            ]
        return self._tokens

    def digest_of(self, store: list) -> bytes:
        h = hashlib.sha256()
        if self.payloads is not None:
            for i, comp in enumerate(store):
                raw = decompress_block(self.codec, comp, self.raw_len(i))
                h.update(raw)
            return h.digest()
        for tok in store:
            h.update(tok)
        return h.digest()

    @classmethod
    def from_profile(cls, image_id: str, size: int, block_size: int = 524288,
                     compression_ratio: float = 0.5, startup_fraction: float | None = 0.161,
                     startup_ranges=None) -> "SimImage":
        n = n_blocks_for(size, block_size)
        raw = np.full(n, block_size, dtype=np.int64)
        raw[-1] = size - (n - 1) * block_size
        clens = np.maximum(1, np.ceil(raw * compression_ratio)).astype(np.int64)
        startup = np.zeros(n, dtype=bool)
        if startup_ranges is None:
            frac = 0.161 if startup_fraction is None else startup_fraction
            startup_ranges = [(0, max(1, min(size, round(size * frac))))]
        for off, length in startup_ranges:
            startup[off // block_size:(off + length - 1) // block_size + 1] = True
        img = cls(image_id, block_size, size, clens, startup, b"")
        img.content_digest = img.digest_of(img.tokens())
        return img

    @classmethod
    def from_blockfile(cls, bf: BlockFile, manifest: Manifest) -> "SimImage":
        n = bf.n_blocks
        clens = np.diff(np.asarray(bf.offsets, dtype=np.int64))
        startup = np.zeros(n, dtype=bool)
        for off, length in manifest.startup_ranges:
            startup[off // bf.block_size:(off + length - 1) // bf.block_size + 1] = True
        payloads = [bf.compressed_block(i) for i in range(n)]
        return cls(manifest.image_id, bf.block_size, bf.uncompressed_size, clens, startup,
                   manifest.content_digest, payloads, bf.codec)


# -------------------------------------------------------------- holders
class RegistrySource:
    """The central registry: holds every block of every image."""

    def __init__(self, host: Host):
        self.host = host
        self.vm = REGISTRY
        self.alive = True

    def has(self, image: SimImage, i: int) -> bool:
        return True


class Replica:
    """Worker-side state for one image on one VM."""

    def __init__(self, vm, fid: str, image: SimImage, host: Host, gate: np.ndarray):
        n = image.n_blocks
        self.vm = vm
        self.fid = fid
        self.image = image
        self.host = host
        self.have = np.zeros(n, dtype=bool)
        self.pending = np.zeros(n, dtype=bool)
        self.store: list = [None] * n
        self.n_have = 0
        self.gate = gate
        self.gate_missing = int(gate.sum())
        self.inbound: Lane | None = None
        self.outbound: dict = {}
        self.upstream = None
        self.alive = True
        self.started = False
        self.session: ProvisionSession | None = None
        self.t_first_block = math.nan
        self.t_last_block = math.nan
        self.bytes_in = 0
        self.bytes_at_gate = 0

    def has(self, image: SimImage, i: int) -> bool:
        return bool(self.have[i])

    def fill_all(self) -> None:
        self.store = list(self.image.tokens())
        self.have[:] = True
        self.n_have = self.image.n_blocks
        self.gate_missing = 0

    def wanted_from(self, src) -> list[int]:
        """Missing, unrequested blocks ``src`` can serve: startup set first, then ascending."""
        need = ~self.have & ~self.pending
        if isinstance(src, Replica):
            need &= src.have
        first = np.flatnonzero(need & self.gate)
        rest = np.flatnonzero(need & ~self.gate)
        return first.tolist() + rest.tolist()


class Lane:
    """An ordered block stream from one holder to one replica over one flow."""

    def __init__(self, plat: "Platform", src, dst: Replica):
        self.plat = plat
        self.src = src
        self.dst = dst
        self.queue: deque = deque()
        self.flow = None
        self.current: int | None = None
        self.in_flight = 0
        self.closed = False
        self.blocks_sent = 0
        self.bytes_sent = 0

    def offer(self, i: int) -> None:
        d = self.dst
        if self.closed or d.have[i] or d.pending[i]:
            return
        d.pending[i] = True
        self.queue.append(i)
        if self.current is None:
            self._kick()

    def offer_many(self, blocks) -> None:
        d = self.dst
        for i in blocks:
            if not (d.have[i] or d.pending[i]):
                d.pending[i] = True
                self.queue.append(i)
        self._kick()

    def _kick(self) -> None:
        if self.closed or self.current is not None or not self.queue:
            return
        if self.in_flight >= self.plat.config.window:
            return
        self._send(self.queue.popleft())

    def _send(self, i: int) -> None:
        self.current = i
        nbytes = int(self.dst.image.clens[i])
        prio = PRIO_STARTUP if self.dst.gate[i] else PRIO_BACKGROUND
        if self.flow is None:
            self.flow = self.plat.world.open_flow(
                self.src.host, self.dst.host, nbytes, prio, self._done, tag=self)
        else:
            self.flow.set_priority(prio)
            self.flow.refill(nbytes)

    def _done(self, flow) -> None:
        i = self.current
        self.current = None
        self.in_flight += 1
        nbytes = int(self.dst.image.clens[i])
        token = self.src.store[i] if isinstance(self.src, Replica) else self.dst.image.tokens()[i]
        self.plat._account(self.src, self.dst, i, nbytes)
        self.blocks_sent += 1
        self.bytes_sent += nbytes
        self.plat.world.schedule(self.plat.delivery_delay(self.dst.image, i), self._deliver, i, token)
        if self.queue and self.in_flight < self.plat.config.window:
            self._send(self.queue.popleft())
        else:
            flow.park()

    def _deliver(self, i: int, token) -> None:
        self.in_flight -= 1
        self.plat._receive(self.dst, i, token)
        self._kick()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self.flow is not None:
            self.flow.abort()
            self.flow = None
        d = self.dst
        for i in self.queue:
            d.pending[i] = False
        if self.current is not None:
            d.pending[self.current] = False
            self.plat.world.metrics.add("aborted_blocks")
        self.queue.clear()
        self.current = None


# ------------------------------------------------------------- platform
@dataclass
class PlatformConfig:
    policy: str = "faasnet_ft"
    rtt_s: float = 0.0005
    start_overhead_s: float = 0.8
    manifest_bytes: int = 10 * 1024
    window: int = 16
    phase_timeout_s: float = 30.0
    registry_gbps: float = 10.0
    mds_gbps: float = 10.0
    vm_nic_gbps: float = 1.0
    duplex: str = "full"
    layer_count: int = 8
    root_coord_cost_s: float = 0.005
    tracker_cost_s: float = 0.0005
    tracker_window: int = 4
    decompress_Bps: float = math.inf
    sample_vms: bool = False
    track_edges: bool = False
    log_messages: bool = False

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.window < 1 or self.tracker_window < 1:
            raise ValueError("request windows must be >= 1")


P2P_ROOT = VmId(0, "p2p-root")


class Platform:
    """Scheduler, workers, registry and metadata store bound to one SimWorld."""

    def __init__(self, world: SimWorld, manager: FtManager, config: PlatformConfig | None = None):
        self.world = world
        self.manager = manager
        self.config = cfg = config or PlatformConfig()
        nic = cfg.vm_nic_gbps * 1e9 / 8
        self.registry_host = world.add_host("registry", math.inf, cfg.registry_gbps * 1e9 / 8,
                                            sample=cfg.sample_vms)
        self.mds_host = world.add_host("mds", math.inf, cfg.mds_gbps * 1e9 / 8, sample=cfg.sample_vms)
        self.scheduler_host = world.add_host("scheduler", nic, nic)
        self.registry = RegistrySource(self.registry_host)
        self.vm_hosts: dict = {}
        for vm in sorted(manager.vms):
            self.vm_hosts[vm] = world.add_host(
                f"vm{vm.id}", nic, nic, duplex=cfg.duplex, sample=cfg.sample_vms)
        if cfg.policy in ("layer_tree_root", "all_to_all_tracker"):
            self.root_host = world.add_host("p2p-root", nic, nic, duplex=cfg.duplex)
        else:
            self.root_host = None
        self.images: dict[str, SimImage] = {}
        self.replicas: dict = {}
        self.sessions: list[ProvisionSession] = []
        self.message_log: list = []
        self.dead: set = set()
        self.edge_counts: dict = {}
        # layer-tree baseline state
        self.image_trees: dict[str, FunctionTree] = {}
        self._layer_members: dict = {}
        self._root_free_t = 0.0
        # tracker baseline state
        self._holders: dict[str, list] = {}
        self._tracker_free_t = 0.0
        self.on_container_started = None
        self.on_vm_lost = None

    # ------------------------------------------------------------ setup
    def add_image(self, image: SimImage) -> SimImage:
        self.images[image.image_id] = image
        return image

    def register_function(self, fid: str, image_id: str, memory_mb: int = 128) -> None:
        if image_id not in self.images:
            raise KeyError(f"unknown image {image_id}")
        self.manager.register_function(fid, image_id, memory_mb)

    def image_of(self, fid: str) -> SimImage:
        return self.images[self.manager.functions[fid].image]

    def _gate_for(self, image: SimImage) -> np.ndarray:
        if self.config.policy in ("registry_full_pull", "all_to_all_tracker"):
            return np.ones(image.n_blocks, dtype=bool)
        return image.startup

    def prewarm(self, fid: str, vm=None) -> ProvisionSession:
        """Seed a running container holding the full image, with no network traffic."""
        if vm is None:
            vm = self.manager.place_function(fid)
            upstream = self.manager.trees[fid].insert(vm)
            upstream = REGISTRY if upstream is None else upstream
            self.manager.vms[vm].last_active = self.world.now
        else:
            upstream = self.manager.attach(fid, vm, self.world.now)
        rep = self._new_replica(fid, vm, upstream)
        rep.fill_all()
        rep.started = True
        s = rep.session
        s.prewarmed = True
        s.t_request = s.t_started = s.t_completed = self.world.now
        s.phase = Phase.COMPLETED
        s.digest_ok = True
        self._note_holder(rep)
        return s

    def _new_replica(self, fid, vm, upstream) -> Replica:
        image = self.image_of(fid)
        rep = Replica(vm, fid, image, self.vm_hosts[vm], self._gate_for(image))
        rep.upstream = upstream
        s = ProvisionSession(fid, vm, upstream, t_request=self.world.now, replica=rep)
        rep.session = s
        self.replicas[(vm, fid)] = rep
        self.sessions.append(s)
        return rep

    # ------------------------------------------------------- accounting
    def delivery_delay(self, image: SimImage, i: int) -> float:
        d = self.config.rtt_s
        if self.config.decompress_Bps < math.inf:
            d += image.raw_len(i) / self.config.decompress_Bps
        return d

    def _account(self, src, dst: Replica, i: int, nbytes: int) -> None:
        src.host.data_out += nbytes
        dst.host.data_in += nbytes
        if self.config.track_edges:
            key = (src.vm, dst.vm, dst.fid)
            arr = self.edge_counts.get(key)
            if arr is None:
                arr = self.edge_counts[key] = np.zeros(dst.image.n_blocks, dtype=np.int32)
            arr[i] += 1

    def _control(self, src: Host, dst: Host, msg, handler, *args) -> None:
        frame = wire.encode(msg)
        n = len(frame)
        delay = self.config.rtt_s / 2 + n / min(src.out_cap, dst.in_cap)
        m = self.world.metrics
        if src is self.scheduler_host or dst is self.scheduler_host:
            m.add("scheduler_messages")
            m.add("scheduler_control_bytes", n)
        m.add(f"msg_{type(msg).__name__}")
        if self.config.log_messages:
            self.message_log.append(wire.log_record(self.world.now, src.name, dst.name, msg))
        self.world.schedule(delay, handler, *args)

    # ------------------------------------------------------- scheduler
    def scale_out(self, fid: str, demand: int) -> list[ProvisionSession]:
        plan = self.manager.scale_out(fid, demand, self.world.now)
        if plan.exhausted:
            self.world.metrics.add("pool_exhausted")
        return self.drive_provision(plan)

    def drive_provision(self, plan: ProvisionPlan) -> list[ProvisionSession]:
        out = []
        for vm, upstream in plan.entries:
            rep = self._new_replica(plan.function, vm, upstream)
            s = rep.session
            fn = self.manager.functions[plan.function]
            msg = wire.PrepareFunction(fn.id, fn.image, fn.memory_mb, vm.id, _addr(upstream))
            self._arm_watchdog(s)
            self._control(self.scheduler_host, rep.host, msg, self.worker_on_prepare, s)
            out.append(s)
        return out

    def _on_worker_ready(self, s: ProvisionSession) -> None:
        if s.phase == Phase.FAILED:
            return
        self._control(self.scheduler_host, s.replica.host,
                      wire.CreateContainer(s.function, s.vm.id), self.worker_on_create, s)

    def _on_container_created(self, s: ProvisionSession) -> None:
        self.world.metrics.add("containers_created")
        if self.on_container_started is not None:
            self.on_container_started(s)

    # ---------------------------------------------------------- worker
    def worker_on_prepare(self, s: ProvisionSession) -> None:
        rep = s.replica
        if not rep.alive or s.phase == Phase.FAILED:
            return
        up = rep.upstream
        if up is not REGISTRY and up in self.dead and self.config.policy == "faasnet_ft":
            self.world.metrics.add("reassign_requests")
            self.world.schedule(self.config.rtt_s, self.detect_failure, up)
        self.world.open_flow(self.mds_host, rep.host, self.config.manifest_bytes, PRIO_STARTUP,
                             lambda f, s=s: self.world.schedule(self.config.rtt_s, self._manifest_loaded, s))

    def _manifest_loaded(self, s: ProvisionSession) -> None:
        rep = s.replica
        self.mds_host.data_out += self.config.manifest_bytes
        rep.host.data_in += self.config.manifest_bytes
        self.world.metrics.add("manifest_fetches")
        if not rep.alive or s.phase == Phase.FAILED:
            return
        s.advance(Phase.MANIFEST_LOADED)
        s.t_manifest_done = self.world.now
        s.advance(Phase.READY_REPORTED)
        s.t_ready = self.world.now
        self._control(rep.host, self.scheduler_host, wire.WorkerReady(s.function, s.vm.id),
                      self._on_worker_ready, s)

    def worker_on_create(self, s: ProvisionSession) -> None:
        rep = s.replica
        if not rep.alive or s.phase == Phase.FAILED:
            return
        s.advance(Phase.CONTAINER_REQUESTED)
        policy = self.config.policy
        if policy == "layer_tree_root":
            self._coordinate_with_root(s)
            return
        if policy == "all_to_all_tracker":
            s.advance(Phase.FETCHING)
            self._tracker_start(rep)
            return
        if policy != "faasnet_ft":
            rep.upstream = s.upstream = REGISTRY
        s.advance(Phase.FETCHING)
        self._open_inbound(rep)
        self._check_gate(rep)

    def _open_inbound(self, rep: Replica) -> None:
        up = rep.upstream
        src = self.registry if up is REGISTRY else self._source_replica(rep, up)
        lane = Lane(self, src, rep)
        rep.inbound = lane
        if isinstance(src, Replica):
            src.outbound[rep.vm] = lane
            if not src.alive:
                return
        lane.offer_many(rep.wanted_from(src))

    def _source_replica(self, rep: Replica, up) -> Replica:
        if self.config.policy == "layer_tree_root":
            if up == P2P_ROOT:
                return self.replicas[(up, "@" + rep.image.image_id)]
            return self._layer_members[(up, rep.image.image_id)]
        return self.replicas[(up, rep.fid)]

    def _receive(self, rep: Replica, i: int, token) -> None:
        if not rep.alive:
            return
        if rep.have[i]:
            self.world.metrics.add("duplicate_blocks")
            return
        now = self.world.now
        rep.have[i] = True
        rep.pending[i] = False
        rep.store[i] = token
        rep.n_have += 1
        rep.bytes_in += int(rep.image.clens[i])
        if rep.n_have == 1:
            rep.t_first_block = now
        rep.t_last_block = now
        if rep.session is not None:
            rep.session.progress += 1
        if self.config.policy == "all_to_all_tracker":
            self._holders[rep.image.image_id][i].append(rep)
        # stream_forward: push the block to every child lane in arrival order
        for lane in list(rep.outbound.values()):
            lane.offer(i)
        if rep.gate[i]:
            rep.gate_missing -= 1
            if rep.gate_missing == 0:
                self._check_gate(rep)
        if rep.n_have == rep.image.n_blocks:
            self._check_full(rep)

    def _check_gate(self, rep: Replica) -> None:
        s = rep.session
        if s is None or rep.gate_missing or s.phase != Phase.FETCHING or rep.started:
            return
        rep.started = True  # start is now committed; completes after the fixed overhead
        rep.bytes_at_gate = rep.bytes_in
        self.world.schedule(self.config.start_overhead_s, self._container_started, s)

    def _container_started(self, s: ProvisionSession) -> None:
        rep = s.replica
        if not rep.alive or s.phase == Phase.FAILED:
            return
        s.advance(Phase.CONTAINER_STARTED)
        s.t_started = self.world.now
        self._control(rep.host, self.scheduler_host, wire.ContainerCreated(s.function, s.vm.id),
                      self._on_container_created, s)
        self._check_full(rep)

    def _check_full(self, rep: Replica) -> None:
        s = rep.session
        if rep.n_have != rep.image.n_blocks:
            return
        if s is None:
            return
        if s.phase != Phase.CONTAINER_STARTED:
            return
        s.digest_ok = rep.image.digest_of(rep.store) == rep.image.content_digest
        if not s.digest_ok:
            self.world.metrics.add("digest_mismatch")
        s.advance(Phase.COMPLETED)
        s.t_completed = self.world.now

    # -------------------------------------------------------- watchdog
    def _arm_watchdog(self, s: ProvisionSession) -> None:
        self.world.schedule(self.config.phase_timeout_s, self._watchdog, s, s.phase, s.progress)

    def _watchdog(self, s: ProvisionSession, phase: Phase, progress: int) -> None:
        if s.phase in (Phase.COMPLETED, Phase.FAILED):
            return
        if s.phase == Phase.CONTAINER_STARTED and s.replica.inbound is None \
                and self.config.policy != "all_to_all_tracker":
            return
        if s.phase != phase or s.progress != progress:
            self._arm_watchdog(s)
            return
        self.world.metrics.add("session_timeouts")
        self._fail_session(s, "timeout")
        if s.vm in self.manager.active_pool:
            self._vm_lost(s.vm)

    def _fail_session(self, s: ProvisionSession, why: str) -> None:
        if s.phase in (Phase.FAILED, Phase.COMPLETED):
            return
        s.advance(Phase.FAILED)
        s.failure = why
        s.t_failed = self.world.now

    # --------------------------------------------------------- failures
    def fail_vm(self, vm) -> None:
        """The VM dies now; the scheduler learns about it at its next ping round."""
        if vm in self.dead:
            return
        self.dead.add(vm)
        self.world.metrics.add("vm_failures")
        for (v, _), rep in list(self.replicas.items()):
            if v != vm or not rep.alive:
                continue
            rep.alive = False
            if rep.inbound is not None:
                rep.inbound.close()
            for lane in rep.outbound.values():
                lane.close()
            if rep.session is not None:
                self._fail_session(rep.session, "vm failure")
        iv = self.manager.config.ping_interval_s
        detect = (math.floor(self.world.now / iv) + 1) * iv + iv
        self.world.schedule_at(detect, self.detect_failure, vm)

    def detect_failure(self, vm) -> None:
        if vm not in self.manager.active_pool:
            return
        self.world.metrics.add("failures_detected")
        self._vm_lost(vm)

    def _vm_lost(self, vm) -> None:
        if vm not in self.dead:
            self.fail_vm(vm)
        reports = self.manager.on_vm_failure(vm)
        for fid, _ in reports:
            self.reconcile(fid)
        if self.on_vm_lost is not None:
            self.on_vm_lost(vm, reports)
        return reports

    def release_vm(self, vm) -> None:
        """Tear down every replica on ``vm`` after the manager reclaimed it."""
        for key in [k for k in self.replicas if k[0] == vm]:
            rep = self.replicas.pop(key)
            rep.alive = False
            if rep.inbound is not None:
                rep.inbound.close()
                if isinstance(rep.inbound.src, Replica):
                    rep.inbound.src.outbound.pop(vm, None)
            for lane in rep.outbound.values():
                lane.close()

    def reconcile(self, fid: str) -> None:
        """Re-point every replica of ``fid`` whose tree parent changed."""
        if self.config.policy != "faasnet_ft":
            return
        tree = self.manager.trees[fid]
        for vm in tree.bfs_order():
            rep = self.replicas.get((vm, fid))
            if rep is None or not rep.alive:
                continue
            parent = tree.upstream_of(vm)
            want = REGISTRY if parent is None else parent
            if rep.upstream == want:
                continue
            self.world.metrics.add("repoints")
            old = rep.inbound
            if old is not None:
                old.close()
                if isinstance(old.src, Replica):
                    old.src.outbound.pop(vm, None)
                rep.inbound = None
            rep.upstream = want
            if rep.session is not None:
                rep.session.upstream = want
            if rep.session is None or rep.session.phase >= Phase.FETCHING or rep.session.prewarmed:
                if rep.n_have < rep.image.n_blocks:
                    self._open_inbound(rep)
                elif want is not REGISTRY:
                    # complete replicas keep a (silent) lane so later forwarding stays uniform
                    self._open_inbound(rep)

    # -------------------------------------------------- layer-tree root
    def _image_root(self, image: SimImage) -> Replica:
        key = (P2P_ROOT, "@" + image.image_id)
        rep = self.replicas.get(key)
        if rep is None:
            rep = Replica(P2P_ROOT, "@" + image.image_id, image, self.root_host, image.startup)
            rep.upstream = REGISTRY
            self.replicas[key] = rep
            tree = self.image_trees[image.image_id] = FunctionTree(image.image_id)
            tree.insert(P2P_ROOT)
            self._open_inbound(rep)
        return rep

    def _coordinate_with_root(self, s: ProvisionSession) -> None:
        # every layer's tree is negotiated with the root, one request at a time
        cfg = self.config
        arrive = self.world.now + cfg.rtt_s / 2
        start = max(arrive, self._root_free_t)
        finish = start + cfg.layer_count * cfg.root_coord_cost_s
        self._root_free_t = finish
        self.world.metrics.add("root_coordination_requests", cfg.layer_count)
        self.world.schedule_at(finish + cfg.rtt_s / 2, self._join_layer_tree, s)

    def _join_layer_tree(self, s: ProvisionSession) -> None:
        rep = s.replica
        if not rep.alive or s.phase == Phase.FAILED:
            return
        image = rep.image
        self._image_root(image)
        tree = self.image_trees[image.image_id]
        if rep.vm in tree:
            parent = tree.upstream_of(rep.vm)
        else:
            parent = tree.insert(rep.vm)
            self._layer_members[(rep.vm, image.image_id)] = rep
        rep.upstream = s.upstream = parent
        s.advance(Phase.FETCHING)
        self._open_inbound(rep)
        self._check_gate(rep)

    # ------------------------------------------------------ tracker
    def _note_holder(self, rep: Replica) -> None:
        if self.config.policy != "all_to_all_tracker":
            return
        lists = self._holders.setdefault(rep.image.image_id, [[] for _ in range(rep.image.n_blocks)])
        for i in np.flatnonzero(rep.have):
            lists[i].append(rep)

    def _tracker_start(self, rep: Replica) -> None:
        image = rep.image
        self._holders.setdefault(image.image_id, [[] for _ in range(image.n_blocks)])
        rep.tracker_next = 0
        rep.tracker_out = 0
        for _ in range(self.config.tracker_window):
            self._tracker_request(rep)

    def _tracker_request(self, rep: Replica) -> None:
        if not rep.alive:
            return
        n = rep.image.n_blocks
        while rep.tracker_next < n and (rep.have[rep.tracker_next] or rep.pending[rep.tracker_next]):
            rep.tracker_next += 1
        if rep.tracker_next >= n:
            return
        i = rep.tracker_next
        rep.tracker_next += 1
        rep.pending[i] = True
        rep.tracker_out += 1
        cfg = self.config
        arrive = self.world.now + cfg.rtt_s / 2
        start = max(arrive, self._tracker_free_t)
        self._tracker_free_t = start + cfg.tracker_cost_s
        self.world.metrics.add("tracker_requests")
        self.world.schedule_at(self._tracker_free_t + cfg.rtt_s / 2, self._tracker_reply, rep, i)

    def _tracker_reply(self, rep: Replica, i: int) -> None:
        if not rep.alive:
            return
        peers = [p for p in self._holders[rep.image.image_id][i] if p.alive and p is not rep]
        k = self.world.rng.randrange(len(peers) + 1)
        src = self.registry if k == len(peers) else peers[k]
        nbytes = int(rep.image.clens[i])
        token = rep.image.tokens()[i] if src is self.registry else src.store[i]

        def done(flow, src=src, i=i, token=token, nbytes=nbytes):
            self._account(src, rep, i, nbytes)
            self.world.schedule(self.delivery_delay(rep.image, i), self._tracker_deliver, rep, i, token)

        self.world.open_flow(src.host, rep.host, nbytes, PRIO_STARTUP, done)

    def _tracker_deliver(self, rep: Replica, i: int, token) -> None:
        rep.tracker_out -= 1
        self._receive(rep, i, token)
        self._tracker_request(rep)

    # ------------------------------------------------------- reporting
    def scheduler_data_bytes(self) -> int:
        return self.scheduler_host.data_in + self.scheduler_host.data_out


def _addr(upstream) -> str:
    if upstream is REGISTRY:
        return REGISTRY
    return upstream.addr or str(upstream)
