"""Max-min fair rate allocation with strict priority classes.

Each flow crosses at most two capacity-limited endpoints (sender egress and
receiver ingress; ``-1`` marks an unconstrained side).  Classes are served in
ascending order; a lower class only sees what the higher classes left.

Two implementations share one contract: a numba-compiled loop and a
vectorised numpy path.  Set ``FUNCTREE_NO_NUMBA=1`` to force numpy.
"""
from __future__ import annotations

import os

import numpy as np

_EPS = 1e-9

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

USE_NUMBA = njit is not None and os.environ.get("FUNCTREE_NO_NUMBA", "") in ("", "0")


def maxmin_numpy(cap, src, dst, prio, active):
    n_ep = cap.shape[0]
    rates = np.zeros(src.shape[0])
    resid = cap.astype(np.float64).copy()
    idx_all = np.flatnonzero(active)
    if idx_all.size == 0:
        return rates
    for cls in np.unique(prio[idx_all]):
        live = idx_all[prio[idx_all] == cls]
        while live.size:
            s, d = src[live], dst[live]
            count = np.bincount(s[s >= 0], minlength=n_ep) + np.bincount(d[d >= 0], minlength=n_ep)
            used = count > 0
            share = np.full(n_ep, np.inf)
            share[used] = resid[used] / count[used]
            delta = max(share.min(), 0.0)
            rates[live] += delta
            resid -= delta * count
            tight = used & (resid <= _EPS * np.maximum(cap, 1.0))
            resid[tight] = 0.0
            frozen = np.zeros(live.size, dtype=bool)
            frozen |= (s >= 0) & tight[np.maximum(s, 0)]
            frozen |= (d >= 0) & tight[np.maximum(d, 0)]
            if not frozen.any():  # pragma: no cover - guards float drift
                break
            live = live[~frozen]
    return rates


def _maxmin_loop(cap, src, dst, prio, active):
    n_ep = cap.shape[0]
    n = src.shape[0]
    rates = np.zeros(n)
    resid = cap.copy()
    count = np.zeros(n_ep, dtype=np.int64)
    live = np.zeros(n, dtype=np.bool_)
    classes = np.unique(prio[active]) if active.any() else prio[:0]
    for c in classes:
        n_live = 0
        for i in range(n):
            live[i] = active[i] and prio[i] == c
            if live[i]:
                n_live += 1
        while n_live > 0:
            count[:] = 0
            for i in range(n):
                if live[i]:
                    if src[i] >= 0:
                        count[src[i]] += 1
                    if dst[i] >= 0:
                        count[dst[i]] += 1
            delta = np.inf
            for e in range(n_ep):
                if count[e] > 0:
                    s = resid[e] / count[e]
                    if s < delta:
                        delta = s
            if delta < 0.0:
                delta = 0.0
            for e in range(n_ep):
                if count[e] > 0:
                    resid[e] -= delta * count[e]
                    if resid[e] <= _EPS * max(cap[e], 1.0):
                        resid[e] = 0.0
                        count[e] = -1
            progressed = False
            for i in range(n):
                if live[i]:
                    rates[i] += delta
                    if (src[i] >= 0 and count[src[i]] == -1) or (dst[i] >= 0 and count[dst[i]] == -1):
                        live[i] = False
                        n_live -= 1
                        progressed = True
            if not progressed:
                break
    return rates


if USE_NUMBA:
    maxmin_numba = njit(cache=True, nogil=True)(_maxmin_loop)
    maxmin_rates = maxmin_numba
else:
    maxmin_numba = None
    maxmin_rates = maxmin_numpy


def allocate_rates(cap, src, dst, prio, active=None):
    """Convenience wrapper taking plain sequences; returns a float array."""
    cap = np.asarray(cap, dtype=np.float64)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    prio = np.asarray(prio, dtype=np.int64)
    if active is None:
        active = np.ones(src.shape[0], dtype=np.bool_)
    else:
        active = np.asarray(active, dtype=np.bool_)
    if src.shape[0] == 0:
        return np.zeros(0)
    return maxmin_rates(cap, src, dst, prio, active)
