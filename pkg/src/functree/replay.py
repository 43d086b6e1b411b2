"""Trace-driven replay: arrivals, warm containers, scale-out and reclamation.

Each started container serves one request at a time.  Once per scale
interval the driver looks at the last interval's arrival rate; if requests
are queued it grows the function's tree to ``ceil(rps * duration / u)``
nodes for a target utilization ``u`` (plus a backlog term when ``drain_s``
is set).
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from . import workload
from .experiments import RunResult, _csv_text, _f, build
from .scenario import Scenario

TIMELINE_HEADER = ("t", "rps", "mean_response_s", "ft_height", "active_vms")


@dataclass
class Second:
    arrivals: int = 0
    resp_sum: float = 0.0
    resp_n: int = 0
    ft_height: int = 0
    active_vms: int = 0


@dataclass
class ReplayResult(RunResult):
    timeline: list = field(default_factory=list)
    onsets: list = field(default_factory=list)
    scale_outs: int = 0
    scale_out_times: list = field(default_factory=list)
    baseline_s: float = math.nan
    recovery_s: list = field(default_factory=list)
    unserved: int = 0

    @property
    def max_height(self) -> int:
        return max((s.ft_height for s in self.timeline), default=0)


class ReplayDriver:
    def __init__(self, scn: Scenario, events, onsets=()):
        self.scn = scn
        self.world, self.manager, self.plat = build(scn)
        self.plat.on_container_started = self._container_up
        self.events = list(events)
        self.onsets = list(onsets)
        self.duration = scn.workload.mean_duration_s
        self.functions = sorted({e.function for e in self.events}) or ["fn0"]
        self.fmap = {f: f"fn{k % scn.functions}" for k, f in enumerate(self.functions)}
        self.idle: dict[str, deque] = {f: deque() for f in self.plat.manager.functions}
        self.queue: dict[str, deque] = {f: deque() for f in self.plat.manager.functions}
        self.window_arrivals: dict[str, int] = {f: 0 for f in self.plat.manager.functions}
        last_t = max((e.t for e in self.events), default=0.0)
        self.horizon = int(math.ceil(last_t + 1))
        self.seconds = [Second() for _ in range(self.horizon + 1)]
        self.sessions = []
        self.scale_outs = 0
        self.scale_out_times = []
        self._arr = workload.arrivals(self.events, scn.workload.arrival, scn.seed)
        self._next = 0

    # ------------------------------------------------------------ driving
    def run(self) -> ReplayResult:
        for fid in self.plat.manager.functions:
            for _ in range(self.scn.replay.initial_vms):
                s = self.plat.prewarm(fid)
                self.sessions.append(s)
                self.idle[fid].append(s.replica)
        if self._arr:
            self.world.schedule_at(self._arr[0][0], self._arrive)
        self.world.schedule_at(self.scn.replay.scale_interval_s, self._tick)
        self.world.run()
        self.world.finalize_samples()
        return self._result()

    def _arrive(self) -> None:
        t, fn = self._arr[self._next]
        self._next += 1
        fid = self.fmap[fn]
        sec = int(t)
        if sec < len(self.seconds):
            self.seconds[sec].arrivals += 1
        self.window_arrivals[fid] += 1
        self.queue[fid].append(t)
        self._dispatch(fid)
        if self._next < len(self._arr):
            self.world.schedule_at(self._arr[self._next][0], self._arrive)

    def _dispatch(self, fid: str) -> None:
        q, idle = self.queue[fid], self.idle[fid]
        while q and idle:
            rep = idle.popleft()
            if not rep.alive:
                continue
            t_arr = q.popleft()
            self.manager.mark_busy(rep.vm, self.world.now)
            self.world.schedule(self.duration, self._finish, fid, rep, t_arr)

    def _finish(self, fid: str, rep, t_arr: float) -> None:
        now = self.world.now
        if rep.vm in self.manager.vms and self.manager.vms[rep.vm].busy_count > 0:
            self.manager.mark_idle(rep.vm, now)
        sec = int(t_arr)
        if sec < len(self.seconds):
            self.seconds[sec].resp_sum += now - t_arr
            self.seconds[sec].resp_n += 1
        if rep.alive:
            self.idle[fid].append(rep)
        self._dispatch(fid)

    def _container_up(self, s) -> None:
        fid = s.function
        if s.replica.alive:
            self.idle[fid].append(s.replica)
            self._dispatch(fid)

    def _tick(self) -> None:
        now = self.world.now
        iv = self.scn.replay.scale_interval_s
        sec = int(round(now)) - 1
        for fid in sorted(self.plat.manager.functions):
            rps = self.window_arrivals[fid] / iv
            self.window_arrivals[fid] = 0
            backlog = len(self.queue[fid])
            if backlog == 0:
                continue
            target = math.ceil(rps * self.duration / self.scn.replay.target_utilization - 1e-9)
            if self.scn.replay.drain_s > 0:
                target += math.ceil(backlog * self.duration / self.scn.replay.drain_s)
            if target > len(self.manager.trees[fid]):
                new = self.plat.scale_out(fid, target)
                if new:
                    self.scale_outs += 1
                    self.scale_out_times.append(now)
                    self.sessions.extend(new)
        for vm in self.manager.reclaim_idle(now):
            self.plat.release_vm(vm)
        if 0 <= sec < len(self.seconds):
            rec = self.seconds[sec]
            rec.ft_height = max(self.manager.trees[f].height_of() for f in self.manager.trees)
            rec.active_vms = len(self.manager.active_pool)
        pending = self._next < len(self._arr) or any(self.queue.values()) or any(
            st.busy_count for st in self.manager.vms.values())
        if pending or sec + 1 < self.horizon:
            self.world.schedule(iv, self._tick)

    # ------------------------------------------------------------ results
    def _result(self) -> ReplayResult:
        res = ReplayResult(self.scn, self.world, self.manager, self.plat,
                           [s for s in self.sessions if not s.prewarmed])
        res.timeline = self.seconds
        res.onsets = self.onsets
        res.scale_outs = self.scale_outs
        res.scale_out_times = self.scale_out_times
        res.unserved = sum(len(q) for q in self.queue.values())
        res.baseline_s, res.recovery_s = recovery_times(
            self.seconds, self.onsets, self.scn.replay.abnormal_factor)
        return res


def mean_response(sec: Second) -> float:
    return sec.resp_sum / sec.resp_n if sec.resp_n else math.nan


def recovery_times(seconds, onsets, factor: float = 1.5):
    """Seconds from each onset until responses are back under ``factor`` x baseline.

    Baseline is the mean response over the seconds before the first onset.
    A second is abnormal when its mean response exceeds the threshold; the
    recovery time is (last abnormal second + 1) - onset, looking only up to
    the next onset.
    """
    first = int(onsets[0]) if onsets else len(seconds)
    pre = [mean_response(s) for s in seconds[:first] if s.resp_n]
    baseline = sum(pre) / len(pre) if pre else math.nan
    out = []
    thr = factor * baseline
    for k, t0 in enumerate(onsets):
        t0 = int(t0)
        end = int(onsets[k + 1]) if k + 1 < len(onsets) else len(seconds)
        last_bad = None
        for i in range(t0, min(end, len(seconds))):
            r = mean_response(seconds[i])
            if not math.isnan(r) and r > thr:
                last_bad = i
        out.append(0.0 if last_bad is None else float(last_bad + 1 - t0))
    return baseline, out


def timeline_csv(res: ReplayResult) -> str:
    rows = [[t, s.arrivals, _f(mean_response(s)), s.ft_height, s.active_vms]
            for t, s in enumerate(res.timeline)]
    return _csv_text(TIMELINE_HEADER, rows)


def workload_events(scn: Scenario):
    """Trace events and burst onsets for a scenario's workload section."""
    w = scn.workload
    if w.trace:
        events = workload.parse_trace(scn.resolve(w.trace))
        onsets = workload.detect_onsets(events)
    else:
        spec = workload.BurstSpec(w.base_rps, w.peak_rps, w.t_burst, w.ramp_s, w.hold_s,
                                  w.n_bursts, w.inter_burst_s, "fn0", w.mean_duration_s,
                                  w.decay_s, w.horizon_s or None)
        events = workload.generate_burst(spec)
        onsets = spec.onsets
    if w.rps_factor != 1.0 or w.duration_factor != 1.0:
        events = workload.scale_trace(events, w.rps_factor, w.duration_factor, scn.seed)
        onsets = [t * w.duration_factor for t in onsets]
    return events, onsets


def replay(scn: Scenario, events=None, onsets=None) -> ReplayResult:
    if events is None:
        events, derived = workload_events(scn)
        onsets = derived if onsets is None else onsets
    return ReplayDriver(scn, events, onsets or []).run()
