"""Invocation traces: CSV ingestion, scaling, and synthetic bursts.

Trace CSV: header ``t_s,function_id,count``; one row per (second, function).
"""
from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass
from pathlib import Path

HEADER = ("t_s", "function_id", "count")


class TraceError(ValueError):
    pass


class MalformedRow(TraceError):
    def __init__(self, line: int, why: str):
        super().__init__(f"line {line}: {why}")
        self.line = line


class UnsortedTrace(TraceError):
    pass


@dataclass(frozen=True)
class TraceEvent:
    t: float
    function: str
    count: int


def _fmt_t(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def parse_trace(src) -> list[TraceEvent]:
    """Parse a trace from a path, a text blob, or a text stream.

    Rows with the same timestamp and function are merged by summing counts.
    """
    if isinstance(src, Path) or (isinstance(src, str) and src and "\n" not in src and Path(src).is_file()):
        text = Path(src).read_text(encoding="utf-8")
    elif isinstance(src, str):
        text = src
    else:
        text = src.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return []
    if tuple(h.strip() for h in header) != HEADER:
        raise MalformedRow(1, f"expected header {','.join(HEADER)}, got {','.join(header)}")
    merged: dict[tuple[float, str], int] = {}
    last_t = -math.inf
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            raise MalformedRow(lineno, f"expected 3 fields, got {len(row)}")
        try:
            t = float(row[0])
            count = int(row[2])
        except ValueError as exc:
            raise MalformedRow(lineno, str(exc)) from None
        fid = row[1].strip()
        if not fid or not math.isfinite(t) or t < 0:
            raise MalformedRow(lineno, "bad timestamp or empty function id")
        if count < 1:
            raise MalformedRow(lineno, f"count must be >= 1, got {count}")
        if t < last_t:
            raise UnsortedTrace(f"line {lineno}: t={t} after t={last_t}")
        last_t = t
        key = (t, fid)
        merged[key] = merged.get(key, 0) + count
    return [TraceEvent(t, f, c) for (t, f), c in merged.items()]


def emit_trace(events, dst=None) -> str:
    """Write events as trace CSV; returns the text (and writes it when ``dst`` is a path)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for ev in events:
        w.writerow([_fmt_t(ev.t), ev.function, ev.count])
    text = buf.getvalue()
    if dst is not None:
        Path(dst).write_text(text, encoding="utf-8", newline="")
    return text


def scale_trace(events, rps_factor: float, duration_factor: float = 1.0, seed: int = 42):
    """Scale counts with seeded probabilistic rounding and stretch timestamps."""
    if rps_factor <= 0 or duration_factor <= 0:
        raise ValueError("scaling factors must be positive")
    rng = random.Random(seed)
    out = []
    for ev in events:
        x = ev.count * rps_factor
        n = math.floor(x)
        frac = x - n
        if frac > 1e-12 and rng.random() < frac:
            n += 1
        if n >= 1:
            out.append(TraceEvent(ev.t * duration_factor, ev.function, n))
    return out


@dataclass
class BurstSpec:
    base_rps: float = 1.0
    peak_rps: float = 100.0
    t_burst: float = 660.0
    ramp_s: float = 10.0
    hold_s: float = 120.0
    n_bursts: int = 1
    inter_burst_s: float = 600.0   # onset to onset
    function: str = "f"
    mean_duration_s: float = 2.0
    decay_s: float | None = None   # defaults to ramp_s
    horizon_s: float | None = None

    def __post_init__(self):
        if not (self.peak_rps >= self.base_rps >= 0):
            raise ValueError("need peak_rps >= base_rps >= 0")
        if self.ramp_s < 0 or self.hold_s < 0 or self.n_bursts < 0:
            raise ValueError("ramp_s, hold_s and n_bursts must be non-negative")
        if self.n_bursts > 1 and self.inter_burst_s < self.ramp_s + self.hold_s + self.decay:
            raise ValueError("bursts overlap: inter_burst_s shorter than one burst")

    @property
    def decay(self) -> float:
        return self.ramp_s if self.decay_s is None else self.decay_s

    @property
    def onsets(self) -> list[float]:
        return [self.t_burst + k * self.inter_burst_s for k in range(self.n_bursts)]

    @property
    def horizon(self) -> float:
        if self.horizon_s is not None:
            return self.horizon_s
        last = self.onsets[-1] if self.n_bursts else self.t_burst
        return last + self.ramp_s + self.hold_s + self.decay + 60.0


def burst_rate(spec: BurstSpec, t: float) -> float:
    extra = spec.peak_rps - spec.base_rps
    for t0 in spec.onsets:
        x = t - t0
        if x < 0:
            continue
        if x < spec.ramp_s:
            return spec.base_rps + extra * x / spec.ramp_s
        x -= spec.ramp_s
        if x < spec.hold_s:
            return spec.peak_rps
        x -= spec.hold_s
        if x < spec.decay:
            return spec.peak_rps - extra * x / spec.decay
    return spec.base_rps


def burst_integral(spec: BurstSpec, t: float) -> float:
    """Closed-form expected arrivals in [0, t)."""
    extra = spec.peak_rps - spec.base_rps
    total = spec.base_rps * t
    for t0 in spec.onsets:
        x = t - t0
        if x <= 0:
            continue
        r, h, d = spec.ramp_s, spec.hold_s, spec.decay
        a = min(x, r)
        total += extra * (a * a / (2 * r) if r > 0 else 0.0)
        if x > r:
            total += extra * min(x - r, h)
        if x > r + h:
            c = min(x - r - h, d)
            total += extra * (c - c * c / (2 * d) if d > 0 else 0.0)
    return total


def generate_burst(spec: BurstSpec) -> list[TraceEvent]:
    """Deterministic 1-second buckets; bucket k holds round(I(k+1)) - round(I(k))."""
    out = []
    n_sec = int(math.ceil(spec.horizon))
    prev = 0
    for k in range(n_sec):
        cum = int(math.floor(burst_integral(spec, k + 1) + 0.5))
        c = cum - prev
        prev = cum
        if c > 0:
            out.append(TraceEvent(float(k), spec.function, c))
    return out


def arrivals(events, mode: str = "even", seed: int = 42):
    """Expand per-second counts into (time, function) arrivals, sorted by time."""
    rng = random.Random(seed)
    out = []
    for ev in events:
        if mode == "even":
            offs = [j / ev.count for j in range(ev.count)]
        elif mode == "poisson":
            offs = sorted(rng.random() for _ in range(ev.count))
        else:
            raise ValueError(f"unknown arrival mode {mode!r}")
        out.extend((ev.t + o, ev.function) for o in offs)
    out.sort(key=lambda a: a[0])
    return out


def per_second_counts(events) -> dict[int, int]:
    out: dict[int, int] = {}
    for ev in events:
        k = int(ev.t)
        out[k] = out.get(k, 0) + ev.count
    return out


def detect_onsets(events, factor: float = 3.0, window_s: int = 60) -> list[float]:
    """Seconds where the rate first exceeds ``factor`` x the median of the preceding window."""
    counts = per_second_counts(events)
    if not counts:
        return []
    horizon = max(counts) + 1
    series = [counts.get(k, 0) for k in range(horizon)]
    out = []
    was_hot = False
    for k in range(1, horizon):
        ref = sorted(series[max(0, k - window_s):k])
        hot = series[k] > factor * max(ref[len(ref) // 2], 1)
        if hot and not was_hot:
            out.append(float(k))
        was_hot = hot
    return out
