import pytest

from functree.simnet import (
    PRIO_BACKGROUND, PRIO_CONTROL, PRIO_STARTUP, EventOverflow, SimError, SimWorld,
)

GBPS = 125e6  # bytes/s


def two_hosts(**kw):
    w = SimWorld(**kw)
    a = w.add_host("a", GBPS)
    b = w.add_host("b", GBPS)
    return w, a, b


def test_single_transfer_takes_size_over_rate():
    w, a, b = two_hosts()
    done = []
    w.open_flow(a, b, 125e6, PRIO_STARTUP, lambda f: done.append(w.now))
    w.run()
    assert done == [pytest.approx(1.0, abs=1e-9)]


def test_two_flows_share_sender():
    w = SimWorld()
    a = w.add_host("a", GBPS)
    b = w.add_host("b", GBPS)
    c = w.add_host("c", GBPS)
    f1 = w.open_flow(a, b, 1e9, PRIO_STARTUP, lambda f: None)
    f2 = w.open_flow(a, c, 1e9, PRIO_STARTUP, lambda f: None)
    w.run(until=0.1)
    assert f1.rate == pytest.approx(62.5e6) and f2.rate == pytest.approx(62.5e6)
    assert w.check_capacity() == []


def test_finished_flow_frees_bandwidth():
    w = SimWorld()
    a = w.add_host("a", GBPS)
    b = w.add_host("b", GBPS)
    c = w.add_host("c", GBPS)
    t = {}
    w.open_flow(a, b, 62.5e6, PRIO_STARTUP, lambda f: t.setdefault("b", w.now))
    w.open_flow(a, c, 125e6, PRIO_STARTUP, lambda f: t.setdefault("c", w.now))
    w.run()
    # both at 62.5 MB/s until 1.0 s, then c alone at 125 MB/s for the remaining 62.5 MB
    assert t["b"] == pytest.approx(1.0) and t["c"] == pytest.approx(1.5)


def test_full_duplex_is_independent_half_duplex_is_shared():
    for duplex, expect in (("full", 1.0), ("half", 2.0)):
        w = SimWorld()
        a = w.add_host("a", GBPS, duplex=duplex)
        b = w.add_host("b", GBPS)
        c = w.add_host("c", GBPS)
        ends = []
        w.open_flow(b, a, 125e6, PRIO_STARTUP, lambda f: ends.append(w.now))
        w.open_flow(a, c, 125e6, PRIO_STARTUP, lambda f: ends.append(w.now))
        w.run()
        assert max(ends) == pytest.approx(expect)


def test_strict_priority_background_waits():
    w, a, b = two_hosts()
    ends = {}
    w.open_flow(a, b, 125e6, PRIO_BACKGROUND, lambda f: ends.setdefault("bg", w.now))
    w.open_flow(a, b, 125e6, PRIO_STARTUP, lambda f: ends.setdefault("st", w.now))
    w.run()
    assert ends["st"] == pytest.approx(1.0) and ends["bg"] == pytest.approx(2.0)


def test_set_priority_promotes():
    w, a, b = two_hosts()
    ends = {}
    bg = w.open_flow(a, b, 125e6, PRIO_BACKGROUND, lambda f: ends.setdefault("bg", w.now))
    w.open_flow(a, b, 250e6, PRIO_STARTUP, lambda f: ends.setdefault("st", w.now))
    w.schedule(0.5, bg.set_priority, PRIO_CONTROL)
    w.run()
    # st moves 62.5 MB by 0.5 s, then waits while bg runs alone for 1 s
    assert ends["bg"] == pytest.approx(1.5) and ends["st"] == pytest.approx(3.0)


def test_refill_in_callback_chains_without_gap():
    w, a, b = two_hosts()
    ends = []

    def on_done(f):
        ends.append(w.now)
        if len(ends) < 4:
            f.refill(12.5e6)

    w.open_flow(a, b, 12.5e6, PRIO_STARTUP, on_done)
    before = w.reallocations
    w.run()
    assert ends == pytest.approx([0.1, 0.2, 0.3, 0.4])
    # one allocation at start, one when the flow is finally released
    assert w.reallocations - before == 2


def test_park_and_refill():
    w, a, b = two_hosts()
    ends = []
    f = w.open_flow(a, b, 12.5e6, PRIO_STARTUP, lambda fl: (ends.append(w.now), fl.park()))
    w.run()
    assert ends == [pytest.approx(0.1)] and not f.active
    w.schedule(1.0, f.refill, 12.5e6)
    w.run()
    assert ends[-1] == pytest.approx(1.2)
    f.release()
    with pytest.raises(SimError):
        f.refill(1)


def test_refill_while_busy_rejected():
    w, a, b = two_hosts()
    f = w.open_flow(a, b, 125e6, PRIO_STARTUP, lambda fl: None)
    with pytest.raises(SimError):
        f.refill(10)


def test_abort_never_calls_back():
    w, a, b = two_hosts()
    called = []
    f = w.open_flow(a, b, 125e6, PRIO_STARTUP, lambda fl: called.append(1))
    w.schedule(0.5, f.abort)
    w.run()
    assert called == [] and w.now == pytest.approx(0.5)


def test_remaining_tracks_progress():
    w, a, b = two_hosts()
    f = w.open_flow(a, b, 125e6, PRIO_STARTUP, lambda fl: None)
    w.run(until=0.25)
    assert f.remaining() == pytest.approx(93.75e6)


def test_event_ordering_fifo_on_ties():
    w = SimWorld()
    seen = []
    for k in range(5):
        w.schedule(1.0, seen.append, k)
    w.schedule(0.5, seen.append, "early")
    w.run()
    assert seen == ["early", 0, 1, 2, 3, 4]


def test_event_overflow():
    w = SimWorld(max_events=10)

    def tick():
        w.schedule(1.0, tick)

    w.schedule(0.0, tick)
    with pytest.raises(EventOverflow):
        w.run()
    w2 = SimWorld(max_queue=3)
    for _ in range(3):
        w2.schedule(1.0, lambda: None)
    with pytest.raises(EventOverflow):
        w2.schedule(1.0, lambda: None)


def test_host_errors():
    w = SimWorld()
    w.add_host("a", 1.0)
    with pytest.raises(SimError):
        w.add_host("a", 1.0)
    with pytest.raises(SimError):
        w.add_host("z", 0.0)
    with pytest.raises(SimError):
        w.open_flow(None, None, 1, 0, None)


def test_sampling_bins_average_rate():
    w = SimWorld(sample_interval_s=0.1)
    a = w.add_host("a", GBPS, sample=True)
    b = w.add_host("b", GBPS, sample=True)
    w.open_flow(a, b, 125e6 * 0.25, PRIO_STARTUP, lambda f: None)
    w.run()
    w.finalize_samples()
    outs = [s[3] for s in w.metrics.samples if s[1] == "a"]
    assert outs == pytest.approx([GBPS, GBPS, GBPS * 0.5])
    ins = [s[2] for s in w.metrics.samples if s[1] == "b"]
    assert ins == outs


def test_deterministic_under_seed():
    def run():
        w = SimWorld(seed=7)
        hs = [w.add_host(f"h{i}", GBPS) for i in range(6)]
        log = []
        for i in range(30):
            s, d = w.rng.sample(hs, 2)
            w.schedule(w.rng.random(), lambda s=s, d=d, i=i: w.open_flow(
                s, d, w.rng.uniform(1e6, 5e7), w.rng.choice([1, 2]),
                lambda f, i=i: log.append((i, round(w.now, 12)))))
        w.run()
        return log
    assert run() == run()
