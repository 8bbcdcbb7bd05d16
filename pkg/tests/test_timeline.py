import numpy as np
import pytest

from poseidon.modelspec import ClusterConfig, ModelSpec
from poseidon.timeline import ComputeProfile, isolated_sync_time, simulate_iterations
from poseidon.transport import HEADER_SIZE


def _fc_heavy(K=32):
    return ModelSpec.from_layers(
        [{"name": "conv", "kind": "opaque", "param_count": 500_000}, ("fc6", 2048, 2048), ("fc7", 512, 2048)],
        batch_size=K)


PROFILE = ComputeProfile.from_ms([5, 1, 0.5], [10, 2, 1])


@pytest.mark.parametrize("mode", ["hybrid", "ps", "sequential-ps", "sfb", "adam"])
def test_unlimited_network_scales_linearly(mode):
    m = _fc_heavy()
    one = simulate_iterations(m, ClusterConfig.colocated(1), mode, profile=PROFILE, iterations=3)
    eight = simulate_iterations(m, ClusterConfig.colocated(8), mode, profile=PROFILE, iterations=3)
    assert one.makespan == pytest.approx(3 * PROFILE.total)
    assert eight.throughput / one.throughput == pytest.approx(8.0, rel=1e-12)
    assert eight.stall == pytest.approx(0.0, abs=1e-12)


def test_isolated_ps_sync_time():
    # two workers, one 1000-element chunk on node 0: push one way, broadcast one way
    m = ModelSpec.from_layers([{"name": "c", "kind": "opaque", "param_count": 1000}], batch_size=4)
    c = ClusterConfig.colocated(2, n_servers=1)
    t = isolated_sync_time(m, c, "ps", 0, bandwidth_bps=1e6)
    assert t == pytest.approx(2 * (4000 + HEADER_SIZE) * 8 / 1e6, rel=1e-12)


def test_wfbp_overlaps_communication():
    # at 10 Gbit/s one iteration's traffic takes about as long as its compute
    m = _fc_heavy()
    c = ClusterConfig.colocated(8)
    w = simulate_iterations(m, c, "ps", bandwidth_bps=1e10, profile=PROFILE, iterations=2)
    s = simulate_iterations(m, c, "sequential-ps", bandwidth_bps=1e10, profile=PROFILE, iterations=2)
    assert w.makespan < s.makespan
    assert w.meter.snapshot()["bytes_in"] == s.meter.snapshot()["bytes_in"]


def test_hybrid_stalls_less_than_ps_on_slow_links():
    m = _fc_heavy()
    c = ClusterConfig.colocated(8)
    h = simulate_iterations(m, c, "hybrid", bandwidth_bps=1e9, profile=PROFILE)
    p = simulate_iterations(m, c, "ps", bandwidth_bps=1e9, profile=PROFILE)
    assert h.stall <= p.stall and h.throughput > p.throughput


def test_every_update_applied_after_its_backward():
    m = _fc_heavy()
    r = simulate_iterations(m, ClusterConfig.colocated(4), "hybrid", bandwidth_bps=1e9, profile=PROFILE,
                            iterations=2)
    assert len(r.applied) == 4 * 3 * 2
    for (rank, layer, t), at in r.applied.items():
        # backward of the layer itself finishes after fwd(all) + bwd(layers above and itself)
        done = t * PROFILE.total + sum(PROFILE.fwd) + sum(PROFILE.bwd[layer:])
        assert at >= done - 1e-12


def test_traffic_conservation():
    r = simulate_iterations(_fc_heavy(), ClusterConfig.colocated(4), "adam", bandwidth_bps=1e9, profile=PROFILE)
    snap = r.meter.snapshot()
    assert sum(snap["bytes_in"].values()) == sum(snap["bytes_out"].values())


def test_infeasible_and_bad_arguments():
    convs = ModelSpec.from_layers([{"name": "c", "kind": "opaque", "param_count": 10}], batch_size=1)
    with pytest.raises(ValueError, match="fully-connected"):
        simulate_iterations(convs, ClusterConfig.colocated(2), "sfb")
    with pytest.raises(ValueError):
        simulate_iterations(convs, ClusterConfig.colocated(2), "ps", iterations=0)
    with pytest.raises(ValueError):
        simulate_iterations(convs, ClusterConfig.colocated(2), "ps", profile=PROFILE)
    with pytest.raises(ValueError):
        ComputeProfile.from_ms([1], [1, 2])


def test_proportional_profile():
    p = ComputeProfile.proportional(_fc_heavy(), ms_per_mparam=3.0)
    assert p.fwd[0] == pytest.approx(0.5e-3) and p.bwd[0] == pytest.approx(1e-3)
    assert np.isclose(p.total, 3e-3 * _fc_heavy().total_params / 1e6)
