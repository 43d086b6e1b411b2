"""Scenario runners and CSV emission for bursts and sweeps."""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blockstore import BlockFile, Manifest
from .manager import FtManager, ManagerConfig
from .provision import Phase, Platform, PlatformConfig, SimImage
from .scenario import Scenario
from .simnet import SimError, SimWorld

SESSIONS_HEADER = ("function_id", "vm_id", "t_request", "t_ready", "t_started",
                   "provision_latency_s", "upstream")
ENDPOINTS_HEADER = ("endpoint", "t", "in_Bps", "out_Bps")
SUMMARY_HEADER = ("policy", "concurrency", "mean_provision_latency_s", "median_provision_latency_s",
                  "p95_provision_latency_s", "makespan_s", "registry_egress_bytes", "mds_egress_bytes")
SWEEP_HEADER = ("axis", "value") + SUMMARY_HEADER + (
    "latency_std_s", "startup_fetched_bytes", "sessions_failed")

AXES = ("concurrency", "block_size", "functions_per_vm", "policy")


class SimulationFailed(SimError):
    pass


def _f(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{float(x):.6f}"


def p95(xs) -> float:
    """Nearest-rank 95th percentile."""
    if not xs:
        return math.nan
    s = sorted(xs)
    return s[max(0, math.ceil(0.95 * len(s)) - 1)]


# ------------------------------------------------------------- building
def make_images(scn: Scenario) -> list[SimImage]:
    img = scn.image
    n = 1 if img.shared else scn.functions
    if img.path:
        path = scn.resolve(img.path)
        bf = BlockFile.load(path)
        mpath = path.with_name(path.name.removesuffix(".fnbf") + ".manifest.json")
        manifest = Manifest.from_json(mpath.read_text())
        base = SimImage.from_blockfile(bf, manifest)
        out = [base]
        for k in range(1, n):
            other = SimImage.from_blockfile(bf, manifest)
            other.image_id = f"{manifest.image_id}-{k}"
            out.append(other)
        return out
    ranges = [tuple(r) for r in img.startup_ranges] or None
    return [
        SimImage.from_profile(f"img{k}", img.size_bytes, img.block_size, img.compression_ratio,
                              img.startup_fraction, ranges)
        for k in range(n)
    ]


def build(scn: Scenario, track_edges: bool = False):
    """World, manager and platform for a scenario, with images and functions registered."""
    net, m = scn.network, scn.manager
    world = SimWorld(seed=scn.seed, rtt_s=net.rtt_ms / 1000.0,
                     sample_interval_s=net.sample_interval_s, max_events=scn.max_events)
    mcfg = ManagerConfig(m.idle_timeout_s, m.per_vm_function_cap, m.ping_interval_s,
                         m.vm_memory_mb, m.vm_nic_gbps, m.placement)
    manager = FtManager.with_pool(scn.vm_count, mcfg)
    pv, bl = scn.provision, scn.baselines
    pcfg = PlatformConfig(
        policy=scn.policy, rtt_s=net.rtt_ms / 1000.0, start_overhead_s=pv.start_overhead_s,
        manifest_bytes=pv.manifest_bytes, window=pv.window, phase_timeout_s=pv.phase_timeout_s,
        registry_gbps=net.registry_gbps, mds_gbps=net.mds_gbps, vm_nic_gbps=m.vm_nic_gbps,
        duplex=net.duplex, layer_count=bl.layer_count, root_coord_cost_s=bl.root_coord_cost_s,
        tracker_cost_s=bl.tracker_cost_s, tracker_window=bl.tracker_window,
        decompress_Bps=net.decompress_MBps * 1e6 if net.decompress_MBps > 0 else math.inf,
        sample_vms=net.sample_endpoints, track_edges=track_edges,
    )
    plat = Platform(world, manager, pcfg)
    images = [plat.add_image(im) for im in make_images(scn)]
    for k in range(scn.functions):
        plat.register_function(f"fn{k}", images[k % len(images)].image_id, scn.memory_mb)
    return world, manager, plat


@dataclass
class RunResult:
    scenario: Scenario
    world: SimWorld
    manager: FtManager
    platform: Platform
    sessions: list = field(default_factory=list)

    @property
    def started(self):
        return [s for s in self.sessions if not math.isnan(s.t_started)]

    @property
    def latencies(self) -> list[float]:
        return [s.latency for s in self.started]

    @property
    def failed(self):
        return [s for s in self.sessions if s.phase == Phase.FAILED]

    @property
    def makespan(self) -> float:
        st = [s.t_started for s in self.started]
        return max(st) - min(st) if st else math.nan

    @property
    def registry_egress(self) -> int:
        return self.platform.registry_host.data_out

    @property
    def mds_egress(self) -> int:
        return self.platform.mds_host.data_out

    def summary(self) -> dict:
        lat = self.latencies
        return {
            "policy": self.scenario.policy,
            "concurrency": self.scenario.concurrency,
            "mean_provision_latency_s": statistics.fmean(lat) if lat else math.nan,
            "median_provision_latency_s": statistics.median(lat) if lat else math.nan,
            "p95_provision_latency_s": p95(lat),
            "makespan_s": self.makespan,
            "registry_egress_bytes": self.registry_egress,
            "mds_egress_bytes": self.mds_egress,
            "latency_std_s": statistics.pstdev(lat) if lat else math.nan,
            "startup_fetched_bytes": sum(s.replica.bytes_at_gate for s in self.started),
            "sessions_failed": len(self.failed),
        }


def run_burst(scn: Scenario, track_edges: bool = False) -> RunResult:
    """Provision ``concurrency`` containers of every function at t=0 and run to quiescence."""
    world, manager, plat = build(scn, track_edges)
    sessions = []
    for k in range(scn.functions):
        fid = f"fn{k}"
        demand = scn.concurrency
        if scn.prewarm_root:
            plat.prewarm(fid)
            demand += 1
        sessions.extend(plat.scale_out(fid, demand))
    by_id = {vm.id: vm for vm in manager.vms}
    for f in scn.faults:
        vm = by_id.get(int(f["vm"]))
        if vm is None:
            raise SimulationFailed(f"fault names unknown vm {f['vm']}")
        world.schedule_at(float(f["t"]), plat.fail_vm, vm)
    world.run()
    world.finalize_samples()
    return RunResult(scn, world, manager, plat, sessions)


# ------------------------------------------------------------ CSV output
def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def sessions_csv(res: RunResult) -> str:
    rows = []
    for s in res.sessions:
        up = s.upstream if isinstance(s.upstream, str) else s.upstream.id
        rows.append([s.function, s.vm.id, _f(s.t_request), _f(s.t_ready), _f(s.t_started),
                     _f(s.t_started - s.t_request), up])
    return _csv_text(SESSIONS_HEADER, rows)


def endpoints_csv(res: RunResult) -> str:
    rows = [[h, _f(t), _f(i), _f(o)] for t, h, i, o in res.world.metrics.samples]
    return _csv_text(ENDPOINTS_HEADER, rows)


def summary_fields(d: dict, header) -> list:
    out = []
    for k in header:
        v = d[k]
        out.append(_f(v) if isinstance(v, float) else v)
    return out


def summary_csv(rows: list[dict]) -> str:
    return _csv_text(SUMMARY_HEADER, [summary_fields(d, SUMMARY_HEADER) for d in rows])


def run_manifest(scn: Scenario, extra: dict | None = None) -> str:
    d = {"scenario": scn.to_dict(), "seed": scn.seed}
    if extra:
        d.update(extra)
    return json.dumps(d, indent=1, sort_keys=True, default=str) + "\n"


def write_outputs(out: Path, res: RunResult) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "sessions.csv": sessions_csv(res),
        "endpoints.csv": endpoints_csv(res),
        "summary.csv": summary_csv([res.summary()]),
        "run_manifest.json": run_manifest(res.scenario, {
            "events_processed": res.world.events_processed,
            "sim_end_s": res.world.now,
            "sessions_failed": len(res.failed),
        }),
    }
    paths = {}
    for name, text in files.items():
        p = out / name
        p.write_text(text, encoding="utf-8", newline="")
        paths[name] = p
    return paths


# ---------------------------------------------------------------- sweeps
def apply_axis(scn: Scenario, axis: str, value) -> Scenario:
    if axis == "concurrency":
        v = int(value)
        return scn.replace(concurrency=v, vm_count=max(scn.vm_count, v * scn.functions))
    if axis == "block_size":
        return scn.replace(**{"image.block_size": int(value)})
    if axis == "functions_per_vm":
        v = int(value)
        need = math.ceil(scn.functions * scn.concurrency / v)
        return scn.replace(**{"manager.per_vm_function_cap": v, "vm_count": max(need, 1)})
    if axis == "policy":
        return scn.replace(policy=str(value))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


def sweep(scn: Scenario, axis: str, values, policies=None, jobs: int = 1) -> list[dict]:
    """One summary row per (value, policy); value-major order."""
    policies = list(policies or [scn.policy])
    tasks = []
    for v in values:
        for pol in policies:
            s = apply_axis(scn.replace(policy=pol), axis, v)
            s.validate()
            tasks.append((axis, v, s))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_sweep_one, tasks))
    return [_sweep_one(t) for t in tasks]


def _sweep_one(task) -> dict:
    axis, v, s = task
    s.network.sample_endpoints = False
    res = run_burst(s)
    row = {"axis": axis, "value": v}
    row.update(res.summary())
    return row


def sweep_csv(rows: list[dict]) -> str:
    return _csv_text(SWEEP_HEADER, [summary_fields(d, SWEEP_HEADER) for d in rows])


def edge_crossings(plat: Platform) -> dict:
    return {k: np.asarray(v) for k, v in plat.edge_counts.items()}
