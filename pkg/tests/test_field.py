import numpy as np
import pytest

from cltwin.amplifier import EdfaConfig
from cltwin.calibration import stage1_baseline
from cltwin.exceptions import ValidationError
from cltwin.field import (
    RECEIVER,
    FiberCut,
    GroundTruth,
    NoiseSpec,
    PerturbationSpec,
    SetConfig,
    SetLoading,
    apply_event,
    event_from_dict,
    event_to_dict,
    make_field,
    query,
)
from cltwin.spectral import safe_dbm


def test_zero_perturbation_is_replica(replica):
    fld = make_field(replica, PerturbationSpec.zero(), seed=7)
    assert fld.truth == replica


def test_same_seed_same_truth_different_seed_differs(replica):
    a = make_field(replica, seed=3).truth
    b = make_field(replica, seed=3).truth
    c = make_field(replica, seed=4).truth
    assert a == b
    assert any(x.connector_in != y.connector_in for x, y in zip(a.spans, c.spans))


def test_sampled_parameters_within_ranges(replica):
    spec = PerturbationSpec()
    for seed in range(5):
        truth = make_field(replica, spec, seed).truth
        for span, nominal in zip(truth.spans, replica.spans):
            assert 0.3 <= span.connector_in <= 2.5 and 0.3 <= span.connector_out <= 2.5
            assert 0.8 <= span.raman_slope / nominal.raman_slope <= 1.2
        for site, nominal in zip(truth.sites, replica.sites):
            for b in ("C", "L"):
                assert np.all(np.abs(site.model(b).ripple.values) <= 0.8 + 1e-12)
                d = site.model(b).nf0.values - nominal.model(b).nf0.values
                assert -0.5 <= d[0] <= 1.0 and np.ptp(d) < 1e-12


def test_malformed_perturbation_rejected(replica):
    with pytest.raises(ValidationError):
        PerturbationSpec(connector_range=(2.0, 1.0))
    with pytest.raises(ValidationError):
        make_field(replica, perturbation={"connector_range": (0, 1)})


def test_noise_free_snapshot_equals_truth(replica):
    fld = make_field(replica, seed=1, noise=NoiseSpec.none())
    tr = fld.trace()
    snap = query(fld, "ocm", "amp3")
    assert np.array_equal(snap.array("in_dbm"), safe_dbm(tr.elements[2].amp_in.total_mw))
    assert np.array_equal(snap.array("out_dbm"), safe_dbm(tr.elements[2].amp_out.total_mw))


def test_zero_everything_matches_twin_prediction(replica, curve):
    fld = make_field(replica, PerturbationSpec.zero(), seed=0, noise=NoiseSpec.none())
    twin = stage1_baseline(replica, curve)
    pred = twin.predict()
    for k, site in enumerate(replica.sites):
        snap = fld.query("ocm", site.name)
        assert np.array_equal(snap.array("out_dbm"), safe_dbm(pred.elements[k].amp_out.total_mw))
    rx = fld.query("osnr", RECEIVER).array("osnr_db")
    assert np.array_equal(rx, pred.receiver.osnr)


def test_capability_gate(replica):
    site = replica.sites[2]
    topo = replica.with_site(2, type(site)(**{**site.__dict__, "has_ocm": False, "has_osnr_monitor": False}))
    fld = GroundTruth(topo)
    with pytest.raises(ValidationError, match="channel monitor"):
        fld.query("ocm", "amp3")
    with pytest.raises(ValidationError, match="OSNR monitor"):
        fld.query("osnr", "amp3")
    with pytest.raises(ValidationError):
        fld.query("rx_ber", "amp3")
    with pytest.raises(ValidationError):
        fld.query("bogus", "amp1")


def test_totals_noise_statistics(replica):
    fld = make_field(replica, seed=2, noise=NoiseSpec(0.1, 0.05, 0.3))
    truth = fld.trace()
    from cltwin.spectral import total_power

    ref = total_power(truth.elements[0].amp_in, replica.grid.band_mask("C"))
    draws = np.array([fld.query("totals", "amp1").values["in_dbm"]["C"] for _ in range(1000)])
    assert np.std(draws - ref, ddof=1) == pytest.approx(0.05, rel=0.2)
    seq = [s.sequence_number for s in fld.telemetry]
    assert np.all(np.diff(seq) > 0)


def test_fiber_cut_low_l(replica):
    fld = make_field(replica, PerturbationSpec.zero())
    ack = apply_event(fld, FiberCut("L", "low_freq", 20))
    assert ack["accepted"]
    act = fld.loading()
    lmask = replica.grid.band_mask("L")
    assert (act & lmask).sum() == 28
    assert replica.grid.frequencies[act & lmask].min() == pytest.approx(188.1)
    assert fld.event_log == [FiberCut("L", "low_freq", 20)]


def test_fiber_cut_edge_cases(replica):
    fld = make_field(replica, PerturbationSpec.zero())
    fld.apply_event(FiberCut("L", "low_freq", 0))
    assert fld.loading().all()
    with pytest.raises(ValidationError):
        fld.apply_event(FiberCut("L", "low_freq", 49))
    with pytest.raises(ValidationError):
        fld.apply_event(FiberCut("L", "middle", 1))
    fld.apply_event(FiberCut("C", "high_freq", 5))
    assert not fld.loading()[-5:].any()


def test_set_config_bounds(replica):
    fld = make_field(replica, PerturbationSpec.zero())
    with pytest.raises(ValidationError):
        fld.apply_event(SetConfig("amp1", "C", EdfaConfig(45.0)))
    with pytest.raises(ValidationError):
        fld.apply_event(SetConfig("amp9", "C", EdfaConfig(20.0)))
    fld.apply_event(SetConfig("amp1", "C", EdfaConfig(19.0, 0.5)))
    assert fld.device_configs()[(0, "C")] == EdfaConfig(19.0, 0.5)


def test_set_loading_and_event_codec(replica):
    fld = make_field(replica, PerturbationSpec.zero())
    mask = np.zeros(len(replica.grid), bool)
    mask[:10] = True
    fld.apply_event(SetLoading(mask))
    assert np.array_equal(fld.loading(), mask)
    for ev in (FiberCut("L", "low_freq", 3), SetConfig("amp2", "L", EdfaConfig(21.0, -0.3)), SetLoading(mask)):
        assert event_from_dict(event_to_dict(ev)) == ev
    with pytest.raises(ValidationError):
        event_from_dict({"kind": "reboot"})


def test_replay_is_bit_identical(replica):
    def run():
        fld = make_field(replica, seed=11)
        out = [fld.query("ocm", "amp2").values, fld.query("totals", "amp5").values]
        fld.apply_event(FiberCut("L", "low_freq", 20))
        out += [fld.query("osnr", "amp6").values, fld.query("rx_ber", RECEIVER).values]
        return out

    assert run() == run()


def test_low_l_cut_raises_power_tilt(replica):
    fld = make_field(replica, PerturbationSpec.zero(), noise=NoiseSpec.none())
    pre = fld.trace()
    fld.apply_event(FiberCut("L", "low_freq", 20))
    post = fld.trace()
    surv = fld.loading()
    f = replica.grid.frequencies[surv]
    for k in range(len(replica.elements)):
        p0 = safe_dbm(pre.elements[k].span_out.total_mw)[surv]
        p1 = safe_dbm(post.elements[k].span_out.total_mw)[surv]
        assert np.polyfit(f, p1, 1)[0] > np.polyfit(f, p0, 1)[0]
    top = np.argmax(replica.grid.frequencies)
    assert post.elements[0].span_out.signal_power[top] > pre.elements[0].span_out.signal_power[top]


def test_rx_ber_only_on_cut_channels(replica):
    fld = make_field(replica, PerturbationSpec.zero())
    ber = fld.query("rx_ber", RECEIVER).values["ber"]
    assert len(ber) == 5
    assert all(0 < b < 0.5 for b in ber.values())
