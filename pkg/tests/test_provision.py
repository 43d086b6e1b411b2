import math

import numpy as np
import pytest

from functree import blockstore, wire
from functree.experiments import build, run_burst
from functree.manager import REGISTRY
from functree.provision import (
    POLICIES, P2P_ROOT, Phase, PhaseError, PlatformConfig, ProvisionSession, Replica, SimImage,
)
from functree.scenario import Scenario

MB = 1_000_000
BLOCK = 524288


def small(n=7, size=8 * MB, policy="faasnet_ft", **kw):
    scn = Scenario(policy=policy, vm_count=n + 2, concurrency=n).replace(**{
        "image.size_bytes": size, "network.sample_endpoints": False, **kw})
    scn.validate()
    return scn


def burst(scn, edges=False, faults=()):
    world, manager, plat = build(scn)
    plat.config.track_edges = edges
    sessions = plat.scale_out("fn0", scn.concurrency)
    for vm, t in faults:
        world.schedule_at(t, plat.fail_vm, vm)
    world.run()
    return world, manager, plat, sessions


def test_image_profile_layout():
    img = SimImage.from_profile("i", 758 * MB)
    assert img.n_blocks == 1446
    assert img.compressed_size == sum(math.ceil(img.raw_len(i) * 0.5) for i in range(img.n_blocks))
    # startup prefix of 16.1% rounds up to whole blocks
    assert int(img.startup.sum()) == math.ceil(round(758 * MB * 0.161) / BLOCK)
    assert img.digest_of(img.tokens()) == img.content_digest
    assert img.digest_of(img.tokens()[::-1]) != img.content_digest


def test_control_messages_and_scheduler_data():
    n = 9
    world, _, plat, sessions = burst(small(n))
    assert all(s.phase == Phase.COMPLETED and s.digest_ok for s in sessions)
    m = world.metrics
    assert m.get("scheduler_messages") == 4 * n
    for cls in wire.CONTROL_TYPES:
        assert m.get(f"msg_{cls.__name__}") == n
    assert plat.scheduler_data_bytes() == 0
    assert plat.mds_host.data_out == n * 10 * 1024


def test_manifest_latency_single_vm():
    scn = small(1)
    world, _, plat, (s,) = burst(scn)
    nic = 125e6
    rtt = 0.0005
    frame = len(wire.encode(wire.PrepareFunction("fn0", "img0", 128, s.vm.id, REGISTRY)))
    expect = rtt / 2 + frame / nic + 10240 / nic + rtt
    assert s.t_manifest_done == pytest.approx(expect, rel=1e-9)


def test_root_pulls_each_block_once_and_interior_forwards():
    n = 15
    world, manager, plat, sessions = burst(small(n, size=4 * MB), edges=True)
    img = plat.image_of("fn0")
    tree = manager.trees["fn0"]
    root = tree.root
    from_reg = {k: v for k, v in plat.edge_counts.items() if k[0] == REGISTRY}
    assert list(from_reg) == [(REGISTRY, root, "fn0")]
    assert (from_reg[(REGISTRY, root, "fn0")] == 1).all()
    assert plat.registry_host.data_out == img.compressed_size
    for (src, dst, _), arr in plat.edge_counts.items():
        assert (arr == 1).all()
        if src != REGISTRY:
            assert tree.upstream_of(dst) == src
    for vm in tree.nodes:
        h = plat.vm_hosts[vm]
        kids = len(tree.children_of(vm))
        assert h.data_out == kids * img.compressed_size
    assert world.metrics.get("duplicate_blocks") == 0


def test_start_waits_for_gate_only():
    world, _, plat, sessions = burst(small(7, size=20 * MB))
    img = plat.image_of("fn0")
    gate_bytes = int(img.clens[img.startup].sum())
    for s in sessions:
        assert s.replica.bytes_at_gate >= gate_bytes
        assert s.t_started <= s.t_completed
        assert s.t_started - s.t_ready >= 0.8


def test_chain_pipelines_blocks():
    # three VMs: root plus two children; a child's first block trails the root's by one hop
    world, manager, plat, sessions = burst(small(3, size=4 * MB))
    tree = manager.trees["fn0"]
    reps = {s.vm: s.replica for s in sessions}
    root = reps[tree.root]
    for kid in tree.children_of(tree.root):
        lag = reps[kid].t_first_block - root.t_first_block
        assert 0 < lag < 0.05
        assert reps[kid].t_last_block < root.t_last_block + 1.0


def test_prewarmed_root_means_zero_registry_egress():
    scn = small(8, size=4 * MB).replace(prewarm_root=True)
    res = run_burst(scn)
    assert res.registry_egress == 0
    # the prewarmed root is not a measured session; every measured one hangs off a peer
    assert len(res.sessions) == 8
    assert all(s.digest_ok and s.upstream != REGISTRY for s in res.sessions)


@pytest.mark.parametrize("policy", POLICIES)
def test_every_policy_completes_with_correct_digest(policy):
    res = run_burst(small(6, size=4 * MB, policy=policy))
    assert len(res.sessions) == 6
    assert all(s.phase == Phase.COMPLETED and s.digest_ok for s in res.sessions)
    assert res.world.metrics.get("digest_mismatch") == 0


def test_full_pull_gates_on_whole_image():
    res = run_burst(small(2, size=4 * MB, policy="registry_full_pull"))
    img = res.platform.image_of("fn0")
    assert all(s.replica.bytes_at_gate == img.compressed_size for s in res.sessions)
    assert res.registry_egress == 2 * img.compressed_size


def test_root_failure_mid_transfer_recovers():
    scn = small(7, size=40 * MB)
    world, manager, plat = build(scn)
    sessions = plat.scale_out("fn0", 7)
    root = manager.trees["fn0"].root
    world.schedule_at(0.3, plat.fail_vm, root)
    world.run()
    by_vm = {s.vm: s for s in sessions}
    assert by_vm[root].phase == Phase.FAILED
    others = [s for vm, s in by_vm.items() if vm != root]
    assert all(s.phase == Phase.COMPLETED and s.digest_ok for s in others)
    assert world.metrics.get("failures_detected") == 1
    assert world.metrics.get("repoints") >= 1
    assert manager.check_invariants() == []
    assert root not in manager.trees["fn0"]


def test_leaf_failure_leaves_others_alone():
    scn = small(7, size=8 * MB)
    world, manager, plat = build(scn)
    sessions = plat.scale_out("fn0", 7)
    leaf = manager.trees["fn0"].bfs_order()[-1]
    world.schedule_at(0.05, plat.fail_vm, leaf)
    world.run()
    assert world.metrics.get("repoints") == 0
    assert sum(s.phase == Phase.COMPLETED for s in sessions) == 6


def test_detection_waits_for_ping_tick():
    scn = small(3, size=4 * MB)
    world, manager, plat = build(scn)
    plat.scale_out("fn0", 3)
    seen = []
    plat.on_vm_lost = lambda vm, rep: seen.append(world.now)
    world.schedule_at(0.25, plat.fail_vm, manager.trees["fn0"].bfs_order()[-1])
    world.run()
    assert seen == [pytest.approx(2.0)]


def test_real_block_file_image(tmp_path):
    rng = np.random.default_rng(3)
    data = rng.integers(0, 4, 3 * MB, dtype=np.uint8).tobytes()
    bf, manifest = blockstore.convert(data, 65536, "zlib", "real", [(0, 200_000)])
    bf.write(tmp_path / "real.fnbf")
    (tmp_path / "real.manifest.json").write_text(manifest.to_json())
    scn = small(5).replace(**{"image.path": str(tmp_path / "real.fnbf"), "image.block_size": 65536})
    res = run_burst(scn)
    assert all(s.digest_ok for s in res.sessions)
    assert res.registry_egress == manifest.compressed_size
    rep = res.sessions[-1].replica
    assert b"".join(bf.block(i) for i in range(bf.n_blocks)) == data
    assert rep.store == [bf.compressed_block(i) for i in range(bf.n_blocks)]


def test_stalled_fetch_times_out():
    scn = small(1, size=4 * MB).replace(**{"network.registry_gbps": 1e-4,
                                           "provision.phase_timeout_s": 2.0})
    res = run_burst(scn)
    (s,) = res.sessions
    assert s.phase == Phase.FAILED and s.failure == "timeout"
    assert res.world.metrics.get("session_timeouts") == 1


def test_session_phase_rules():
    img = SimImage.from_profile("i", 2 * MB)
    rep = Replica(None, "f", img, None, img.startup)
    s = ProvisionSession("f", None, REGISTRY, replica=rep)
    with pytest.raises(PhaseError):
        s.advance(Phase.READY_REPORTED)
    for ph in (Phase.MANIFEST_LOADED, Phase.READY_REPORTED, Phase.CONTAINER_REQUESTED, Phase.FETCHING):
        s.advance(ph)
    with pytest.raises(PhaseError):
        s.advance(Phase.CONTAINER_STARTED)  # gate not satisfied
    s.advance(Phase.FAILED)
    with pytest.raises(PhaseError):
        s.advance(Phase.FAILED)


def test_config_validation():
    with pytest.raises(ValueError):
        PlatformConfig(policy="nope")
    with pytest.raises(ValueError):
        PlatformConfig(window=0)


def test_layer_tree_root_serves_from_root():
    res = run_burst(small(6, size=4 * MB, policy="layer_tree_root"))
    plat = res.platform
    img = plat.image_of("fn0")
    assert plat.registry_host.data_out == img.compressed_size
    assert plat.root_host.data_out > 0
    assert res.world.metrics.get("root_coordination_requests") == 6 * 8
    assert (P2P_ROOT, "@img0") in plat.replicas


def test_tracker_spreads_load():
    res = run_burst(small(6, size=4 * MB, policy="all_to_all_tracker"))
    m = res.world.metrics
    img = res.platform.image_of("fn0")
    assert m.get("tracker_requests") == 6 * img.n_blocks
    assert res.registry_egress < 6 * img.compressed_size


def test_runs_are_deterministic():
    a = run_burst(small(6, size=4 * MB, policy="all_to_all_tracker"))
    b = run_burst(small(6, size=4 * MB, policy="all_to_all_tracker"))
    assert [s.t_started for s in a.sessions] == [s.t_started for s in b.sessions]
    assert a.registry_egress == b.registry_egress
