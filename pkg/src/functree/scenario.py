"""TOML scenario files.

Every tunable has a default here; a loaded scenario is resolved against the
defaults and the full result is echoed into the run manifest.
"""
from __future__ import annotations

import copy
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .provision import POLICIES


class ScenarioError(ValueError):
    pass


@dataclass
class NetworkCfg:
    registry_gbps: float = 10.0
    mds_gbps: float = 10.0
    rtt_ms: float = 0.5
    duplex: str = "full"
    sample_interval_s: float = 0.1
    sample_endpoints: bool = True
    decompress_MBps: float = 0.0  # 0 means infinitely fast


@dataclass
class ImageCfg:
    size_bytes: int = 758_000_000
    block_size: int = 524_288
    compression_ratio: float = 0.5
    startup_fraction: float = 0.161
    startup_ranges: list = field(default_factory=list)
    path: str = ""           # optional .fnbf file; manifest is looked up next to it
    shared: bool = False     # all functions use one image


@dataclass
class ManagerCfg:
    idle_timeout_s: float = 900.0
    per_vm_function_cap: int = 20
    ping_interval_s: float = 1.0
    vm_memory_mb: int = 4096
    vm_nic_gbps: float = 1.0
    placement: str = "binpack"


@dataclass
class ProvisionCfg:
    window: int = 16
    start_overhead_s: float = 0.8
    manifest_bytes: int = 10 * 1024
    phase_timeout_s: float = 30.0


@dataclass
class BaselineCfg:
    layer_count: int = 8
    root_coord_cost_s: float = 0.005
    tracker_cost_s: float = 0.0005
    tracker_window: int = 4


@dataclass
class WorkloadCfg:
    trace: str = ""
    base_rps: float = 1.0
    peak_rps: float = 100.0
    t_burst: float = 660.0
    ramp_s: float = 10.0
    hold_s: float = 120.0
    decay_s: float = 10.0
    n_bursts: int = 2
    inter_burst_s: float = 600.0
    mean_duration_s: float = 1.0
    horizon_s: float = 0.0     # 0: derived from the burst shape
    arrival: str = "even"
    rps_factor: float = 1.0
    duration_factor: float = 1.0


@dataclass
class ReplayCfg:
    initial_vms: int = 2
    scale_interval_s: float = 1.0
    drain_s: float = 0.0       # 0: size scale-outs from the arrival rate alone
    target_utilization: float = 0.8
    abnormal_factor: float = 1.5


@dataclass
class Scenario:
    policy: str = "faasnet_ft"
    seed: int = 42
    vm_count: int = 128
    concurrency: int = 128
    functions: int = 1
    memory_mb: int = 128
    prewarm_root: bool = False
    max_events: int = 200_000_000
    network: NetworkCfg = field(default_factory=NetworkCfg)
    image: ImageCfg = field(default_factory=ImageCfg)
    manager: ManagerCfg = field(default_factory=ManagerCfg)
    provision: ProvisionCfg = field(default_factory=ProvisionCfg)
    baselines: BaselineCfg = field(default_factory=BaselineCfg)
    workload: WorkloadCfg = field(default_factory=WorkloadCfg)
    replay: ReplayCfg = field(default_factory=ReplayCfg)
    faults: list = field(default_factory=list)  # [{vm = <id>, t = <s>}]
    base_dir: str = ""

    def validate(self) -> None:
        problems = []
        if self.policy not in POLICIES:
            problems.append(f"policy must be one of {', '.join(POLICIES)}")
        for name in ("vm_count", "concurrency", "functions", "memory_mb"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        n, m = self.network, self.manager
        for name, v in (("network.registry_gbps", n.registry_gbps), ("network.mds_gbps", n.mds_gbps),
                        ("manager.vm_nic_gbps", m.vm_nic_gbps), ("image.size_bytes", self.image.size_bytes),
                        ("manager.vm_memory_mb", m.vm_memory_mb)):
            if not v > 0:
                problems.append(f"{name} must be > 0")
        if n.duplex not in ("full", "half"):
            problems.append("network.duplex must be 'full' or 'half'")
        if n.rtt_ms < 0 or n.decompress_MBps < 0 or n.sample_interval_s < 0:
            problems.append("network timings must be non-negative")
        b = self.image.block_size
        if b < 4096 or b & (b - 1):
            problems.append("image.block_size must be a power of two >= 4096")
        if not 0 < self.image.compression_ratio <= 1:
            problems.append("image.compression_ratio must be in (0, 1]")
        if not 0 < self.image.startup_fraction <= 1:
            problems.append("image.startup_fraction must be in (0, 1]")
        if m.placement not in ("binpack", "spread"):
            problems.append("manager.placement must be 'binpack' or 'spread'")
        if m.per_vm_function_cap < 1:
            problems.append("manager.per_vm_function_cap must be >= 1")
        if self.provision.window < 1 or self.baselines.tracker_window < 1:
            problems.append("request windows must be >= 1")
        if self.image.path and not self.resolve(self.image.path).exists():
            problems.append(f"image.path {self.image.path} does not exist")
        if self.workload.trace and not self.resolve(self.workload.trace).exists():
            problems.append(f"workload.trace {self.workload.trace} does not exist")
        if self.workload.arrival not in ("even", "poisson"):
            problems.append("workload.arrival must be 'even' or 'poisson'")
        if not 0 < self.replay.target_utilization <= 1:
            problems.append("replay.target_utilization must be in (0, 1]")
        if self.workload.mean_duration_s <= 0:
            problems.append("workload.mean_duration_s must be > 0")
        for f in self.faults:
            if not isinstance(f, dict) or set(f) != {"vm", "t"}:
                problems.append(f"fault entries need exactly vm and t: {f!r}")
        if problems:
            raise ScenarioError("; ".join(problems))

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() or not self.base_dir else Path(self.base_dir) / path

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_jsonable) + "\n"

    def replace(self, **kw) -> "Scenario":
        """Copy with dotted-key overrides, e.g. ``replace(**{"image.block_size": 1 << 20})``."""
        out = copy.deepcopy(self)
        for key, value in kw.items():
            _set(out, key.split("."), value)
        return out


def _jsonable(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    raise TypeError(type(x))


def _set(obj, path: list[str], value) -> None:
    for part in path[:-1]:
        obj = getattr(obj, part)
    if not hasattr(obj, path[-1]):
        raise ScenarioError(f"unknown key {'.'.join(path)}")
    setattr(obj, path[-1], value)


def _fill(target, data: dict, prefix: str = "") -> None:
    known = {f.name: f for f in fields(target)}
    for key, value in data.items():
        if key not in known or key == "base_dir":
            raise ScenarioError(f"unknown scenario key {prefix}{key}")
        cur = getattr(target, key)
        if is_dataclass(cur):
            if not isinstance(value, dict):
                raise ScenarioError(f"{prefix}{key} must be a table")
            _fill(cur, value, f"{prefix}{key}.")
            continue
        if isinstance(cur, bool):
            if not isinstance(value, bool):
                raise ScenarioError(f"{prefix}{key} must be a boolean")
        elif isinstance(cur, (int, float)) and not isinstance(cur, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ScenarioError(f"{prefix}{key} must be a number")
            if isinstance(cur, int) and not isinstance(cur, bool) and isinstance(value, float):
                if not value.is_integer():
                    raise ScenarioError(f"{prefix}{key} must be an integer")
                value = int(value)
            elif isinstance(cur, float):
                value = float(value)
        elif isinstance(cur, str) and not isinstance(value, str):
            raise ScenarioError(f"{prefix}{key} must be a string")
        elif isinstance(cur, list) and not isinstance(value, list):
            raise ScenarioError(f"{prefix}{key} must be an array")
        setattr(target, key, value)


def load_scenario(src, seed: int | None = None) -> Scenario:
    """Load from a path or a TOML string; ``seed`` overrides the file's seed."""
    base = ""
    if isinstance(src, Path) or (isinstance(src, str) and "\n" not in src and "=" not in src):
        path = Path(src)
        text = path.read_text(encoding="utf-8")  # OSError propagates as an I/O failure
        base = str(path.parent)
    else:
        text = src
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"bad TOML: {exc}") from None
    scn = Scenario(base_dir=base)
    _fill(scn, data)
    if seed is not None:
        scn.seed = seed
    scn.validate()
    return scn
