"""Deterministic discrete-event simulator with max-min fair fluid flows.

Timed callbacks live in a heap ordered by (time, insertion sequence).  Data
transfers are fluid flows between capacity-limited endpoints; their rates are
recomputed (``kernels.maxmin_rates``) whenever the active set or a priority
changes, and stay constant in between, so each flow's finish time is known
until the next reallocation.
"""
from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field

import numpy as np

from . import kernels

PRIO_CONTROL = 0
PRIO_STARTUP = 1
PRIO_BACKGROUND = 2
PRIORITY_NAMES = {"control": PRIO_CONTROL, "startup": PRIO_STARTUP, "background": PRIO_BACKGROUND}

DEFAULT_RTT_S = 0.0005
DEFAULT_SAMPLE_S = 0.1


class SimError(RuntimeError):
    pass


class EventOverflow(SimError):
    pass


@dataclass
class Host:
    """A network-attached box: separate ingress/egress endpoints when full-duplex."""
    name: str
    in_ep: int
    out_ep: int
    in_cap: float
    out_cap: float
    data_in: int = 0
    data_out: int = 0


class Flow:
    __slots__ = ("world", "slot", "src", "dst", "priority", "on_done", "tag",
                 "_state", "_refilled")

    ACTIVE, PARKED, RELEASED = 0, 1, 2

    def __init__(self, world, slot, src, dst, priority, on_done, tag):
        self.world = world
        self.slot = slot
        self.src = src
        self.dst = dst
        self.priority = priority
        self.on_done = on_done
        self.tag = tag
        self._state = Flow.ACTIVE
        self._refilled = False

    @property
    def active(self) -> bool:
        return self._state == Flow.ACTIVE

    @property
    def rate(self) -> float:
        return float(self.world._rate[self.slot]) if self._state == Flow.ACTIVE else 0.0

    def remaining(self) -> float:
        w = self.world
        if self._state != Flow.ACTIVE:
            return 0.0
        s = self.slot
        return max(0.0, w._rem[s] - w._rate[s] * (w.now - w._tlast[s]))

    def refill(self, nbytes: float) -> None:
        """Queue ``nbytes`` more on this flow (only valid once the previous load finished)."""
        self.world._refill(self, nbytes)

    def set_priority(self, priority: int) -> None:
        if priority != self.priority:
            self.priority = priority
            self.world._prio[self.slot] = priority
            if self._state == Flow.ACTIVE:
                self.world._dirty = True

    def park(self) -> None:
        self.world._park(self)

    def release(self) -> None:
        self.world._release(self)

    def abort(self) -> None:
        """Drop whatever is in transit; the completion callback never fires."""
        self.world._release(self)


@dataclass
class MetricSink:
    counters: dict = field(default_factory=dict)
    samples: list = field(default_factory=list)  # (t, host, in_Bps, out_Bps)
    markers: dict = field(default_factory=dict)

    def add(self, key: str, value=1) -> None:
        self.counters[key] = self.counters.get(key, 0) + value

    def get(self, key: str, default=0):
        return self.counters.get(key, default)

    def mark(self, key: str, t: float) -> None:
        self.markers.setdefault(key, t)


class SimWorld:
    """Clock, event heap, endpoints and fluid flows."""

    def __init__(self, seed: int = 42, rtt_s: float = DEFAULT_RTT_S,
                 sample_interval_s: float = DEFAULT_SAMPLE_S,
                 max_events: int = 200_000_000, max_queue: int = 20_000_000):
        self.now = 0.0
        self.seed = seed
        self.rng = random.Random(seed)
        self.rtt_s = rtt_s
        self.max_events = max_events
        self.max_queue = max_queue
        self.metrics = MetricSink()
        self.events_processed = 0
        self._heap: list = []
        self._seq = 0
        # endpoints
        self.hosts: dict[str, Host] = {}
        self._caps: list[float] = []
        self._cap = np.zeros(0)
        # flow slots
        n = 64
        self._src = np.full(n, -1, dtype=np.int64)
        self._dst = np.full(n, -1, dtype=np.int64)
        self._prio = np.zeros(n, dtype=np.int64)
        self._act = np.zeros(n, dtype=np.bool_)
        self._rem = np.zeros(n)
        self._rate = np.zeros(n)
        self._tlast = np.zeros(n)
        self._finish = np.full(n, np.inf)
        self._flows: list = [None] * n
        self._free: list[int] = list(range(n - 1, -1, -1))
        self._hi = 0  # slots in use are all < _hi
        self._dirty = False
        self._completing: Flow | None = None
        self.reallocations = 0
        # sampling
        self.sample_interval_s = sample_interval_s
        self._sampled: list[Host] = []
        self._ep_in_rate = np.zeros(0)
        self._ep_out_rate = np.zeros(0)
        self._ep_bytes = np.zeros(0)
        self._rate_t = 0.0
        self._bin = 0
        self._acc_in = np.zeros(0)
        self._acc_out = np.zeros(0)
        self.rate_log: list | None = None

    # ------------------------------------------------------------ hosts
    def _add_ep(self, cap: float) -> int:
        self._caps.append(float(cap))
        self._cap = np.asarray(self._caps)
        self._ep_in_rate = np.zeros(len(self._caps))
        self._ep_out_rate = np.zeros(len(self._caps))
        self._ep_bytes = np.resize(self._ep_bytes, len(self._caps))
        self._ep_bytes[-1] = 0.0
        return len(self._caps) - 1

    def add_host(self, name: str, in_cap: float, out_cap: float | None = None,
                 duplex: str = "full", sample: bool = False) -> Host:
        if name in self.hosts:
            raise SimError(f"duplicate host {name}")
        if self._hi:
            raise SimError("hosts must be added before flows start")
        out_cap = in_cap if out_cap is None else out_cap
        if in_cap <= 0 or out_cap <= 0:
            raise SimError(f"capacity must be positive for {name}")
        if duplex == "half":
            ep = self._add_ep(in_cap)
            host = Host(name, ep, ep, in_cap, in_cap)
        else:
            host = Host(name, self._add_ep(in_cap), self._add_ep(out_cap), in_cap, out_cap)
        self.hosts[name] = host
        if sample and self.sample_interval_s > 0:
            self._sampled.append(host)
            self._acc_in = np.zeros(len(self._sampled))
            self._acc_out = np.zeros(len(self._sampled))
        return host

    # ----------------------------------------------------------- events
    def schedule_at(self, t: float, fn, *args) -> None:
        if t < self.now:
            t = self.now
        if len(self._heap) >= self.max_queue:
            raise EventOverflow(f"event queue exceeded {self.max_queue}")
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, fn, args))

    def schedule(self, delay: float, fn, *args) -> None:
        self.schedule_at(self.now + delay, fn, *args)

    # ------------------------------------------------------------ flows
    def _grow(self) -> None:
        old = self._src.shape[0]
        new = old * 2
        for name, fill in (("_src", -1), ("_dst", -1), ("_prio", 0), ("_act", False),
                           ("_rem", 0.0), ("_rate", 0.0), ("_tlast", 0.0), ("_finish", np.inf)):
            arr = getattr(self, name)
            grown = np.full(new, fill, dtype=arr.dtype)
            grown[:old] = arr
            setattr(self, name, grown)
        self._flows.extend([None] * (new - old))
        self._free.extend(range(new - 1, old - 1, -1))

    def open_flow(self, src: Host | None, dst: Host | None, nbytes: float,
                  priority: int, on_done, tag=None) -> Flow:
        """Start moving ``nbytes`` from ``src`` egress to ``dst`` ingress."""
        if src is None and dst is None:
            raise SimError("flow needs at least one constrained endpoint")
        if not self._free:
            self._grow()
        slot = self._free.pop()
        self._hi = max(self._hi, slot + 1)
        flow = Flow(self, slot, src, dst, priority, on_done, tag)
        self._flows[slot] = flow
        self._src[slot] = src.out_ep if src is not None else -1
        self._dst[slot] = dst.in_ep if dst is not None else -1
        self._prio[slot] = priority
        self._act[slot] = True
        self._rem[slot] = max(float(nbytes), 0.0)
        self._rate[slot] = 0.0
        self._tlast[slot] = self.now
        self._finish[slot] = np.inf
        self._dirty = True
        return flow

    def _refill(self, flow: Flow, nbytes: float) -> None:
        s = flow.slot
        if flow._state == Flow.RELEASED:
            raise SimError("refill on released flow")
        self._rem[s] = max(float(nbytes), 0.0)
        self._tlast[s] = self.now
        if flow._state == Flow.PARKED:
            flow._state = Flow.ACTIVE
            self._act[s] = True
            self._rate[s] = 0.0
            self._finish[s] = np.inf
            self._dirty = True
        elif flow is self._completing:
            flow._refilled = True
            r = self._rate[s]
            self._finish[s] = self.now + self._rem[s] / r if r > 0 else np.inf
        else:
            raise SimError("refill on a flow that is still transferring")

    def _park(self, flow: Flow) -> None:
        if flow._state == Flow.ACTIVE:
            s = flow.slot
            self._settle_rates()
            flow._state = Flow.PARKED
            self._act[s] = False
            self._rate[s] = 0.0
            self._finish[s] = np.inf
            self._dirty = True
        flow._refilled = False

    def _release(self, flow: Flow) -> None:
        if flow._state == Flow.RELEASED:
            return
        self._park(flow)
        flow._state = Flow.RELEASED
        self._flows[flow.slot] = None
        self._free.append(flow.slot)

    def _settle_rates(self) -> None:
        # account traffic at the old rates before anything changes
        if self._rate_t < self.now:
            self._flush(self.now)

    def _flush(self, t_end: float) -> None:
        t0 = self._rate_t
        if t_end <= t0:
            return
        self._ep_bytes += (self._ep_in_rate + self._ep_out_rate) * (t_end - t0)
        if self._sampled:
            iv = self.sample_interval_s
            ins = np.array([self._ep_in_rate[h.in_ep] for h in self._sampled])
            outs = np.array([self._ep_out_rate[h.out_ep] for h in self._sampled])
            t = t0
            while t < t_end:
                bin_end = (self._bin + 1) * iv
                seg = min(bin_end, t_end)
                self._acc_in += ins * (seg - t)
                self._acc_out += outs * (seg - t)
                t = seg
                if seg >= bin_end - 1e-12:
                    tb = round(self._bin * iv, 9)
                    for k, h in enumerate(self._sampled):
                        self.metrics.samples.append(
                            (tb, h.name, self._acc_in[k] / iv, self._acc_out[k] / iv)
                        )
                    self._acc_in[:] = 0.0
                    self._acc_out[:] = 0.0
                    self._bin += 1
        self._rate_t = t_end

    def _reallocate(self) -> None:
        self._settle_rates()
        hi = self._hi
        act = self._act[:hi]
        now = self.now
        rem = self._rem[:hi]
        rate = self._rate[:hi]
        tlast = self._tlast[:hi]
        rem -= rate * (now - tlast)
        np.maximum(rem, 0.0, out=rem)
        tlast[:] = now
        new = kernels.maxmin_rates(self._cap, self._src[:hi], self._dst[:hi], self._prio[:hi], act)
        new[~act] = 0.0
        rate[:] = new
        with np.errstate(divide="ignore", invalid="ignore"):
            fin = np.where(rate > 0, now + rem / rate, np.inf)
        fin[~act] = np.inf
        self._finish[:hi] = fin
        n_ep = self._cap.shape[0]
        srcs, dsts = self._src[:hi], self._dst[:hi]
        ms, md = srcs >= 0, dsts >= 0
        self._ep_out_rate = np.bincount(srcs[ms], weights=rate[ms], minlength=n_ep)
        self._ep_in_rate = np.bincount(dsts[md], weights=rate[md], minlength=n_ep)
        if self.rate_log is not None:
            self.rate_log.append((now, self._ep_in_rate.copy(), self._ep_out_rate.copy()))
        self._dirty = False
        self.reallocations += 1

    def _complete(self, slot: int) -> None:
        flow = self._flows[slot]
        self._rem[slot] = 0.0
        self._tlast[slot] = self.now
        self._finish[slot] = np.inf
        flow._refilled = False
        self._completing = flow
        try:
            flow.on_done(flow)
        finally:
            self._completing = None
        if flow._state == Flow.ACTIVE and not flow._refilled:
            self._release(flow)

    def endpoint_rates(self, host: Host) -> tuple[float, float]:
        return float(self._ep_in_rate[host.in_ep]), float(self._ep_out_rate[host.out_ep])

    def check_capacity(self, tol: float = 1e-6) -> list[str]:
        """Capacity-safety sweep over the current allocation."""
        problems = []
        used = self._ep_in_rate + self._ep_out_rate
        # a half-duplex endpoint appears on both sides; full-duplex sides are disjoint
        for e, cap in enumerate(self._caps):
            if used[e] > cap * (1 + tol) + tol:
                problems.append(f"endpoint {e} carries {used[e]:.3f} > {cap:.3f}")
        return problems

    # -------------------------------------------------------------- run
    def run(self, until: float | None = None) -> MetricSink:
        heap = self._heap
        finish = self._finish
        while True:
            if self._dirty:
                self._reallocate()
                finish = self._finish
            hi = self._hi
            if hi:
                slot = int(np.argmin(finish[:hi]))
                t_net = finish[slot]
            else:
                slot, t_net = -1, math.inf
            t_ev = heap[0][0] if heap else math.inf
            t = t_net if t_net <= t_ev else t_ev
            if t == math.inf:
                break
            if until is not None and t > until:
                self.now = max(self.now, until)
                break
            if t > self.now:
                self.now = float(t)
            self.events_processed += 1
            if self.events_processed > self.max_events:
                raise EventOverflow(f"more than {self.max_events} events")
            if t_net <= t_ev:
                self._complete(slot)
            else:
                _, _, fn, args = heapq.heappop(heap)
                fn(*args)
            finish = self._finish
        self._settle_rates()
        return self.metrics

    def finalize_samples(self) -> None:
        """Emit the trailing partial sampling bin."""
        if not self._sampled:
            return
        self._settle_rates()
        iv = self.sample_interval_s
        if self._rate_t > self._bin * iv + 1e-12:
            tb = round(self._bin * iv, 9)
            for k, h in enumerate(self._sampled):
                self.metrics.samples.append((tb, h.name, self._acc_in[k] / iv, self._acc_out[k] / iv))
            self._acc_in[:] = 0.0
            self._acc_out[:] = 0.0
            self._bin += 1
