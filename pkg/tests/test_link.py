import json

import numpy as np
import pytest

from cltwin.amplifier import EdfaConfig, ase_added, flat_model
from cltwin.exceptions import ValidationError
from cltwin.fiber import FiberSpan
from cltwin.link import AmpSite, LinkTopology, propagate_link, receiver_metrics, replica_topology
from cltwin.qot import osnr_ref
from cltwin.spectral import SpectralProfile, build_cl_grid, replica_grid, safe_dbm

FLAT = SpectralProfile.constant(0.2)


def _site(grid, gain, nf=5.0, design=None, name="amp1"):
    c_lo, c_hi = grid.band_hull("C")
    l_lo, l_hi = grid.band_hull("L")
    d = gain if design is None else design
    return AmpSite(
        name,
        flat_model("C", c_lo, c_hi, nf, design_gain=d),
        flat_model("L", l_lo, l_hi, nf, design_gain=d),
        EdfaConfig(gain),
        EdfaConfig(gain),
    )


def test_loss_gain_cancellation():
    g = replica_grid()
    span = FiberSpan(80.0, FLAT, raman_slope=0.0, connector_in=0.0, connector_out=0.0)
    topo = LinkTopology(tuple([0.0] * len(g)), ((span, _site(g, 16.0)),), g)
    tr = propagate_link(topo, topo.launch_spectrum())
    assert np.max(np.abs(safe_dbm(tr.receiver.p_sig))) < 1e-9


def test_single_channel_osnr_hand_composition():
    g = build_cl_grid(188.0, 188.1, 193.0, 193.1, 100, 91.6, cut_frequencies=())
    span = FiberSpan(80.0, FLAT, connector_in=1.0, connector_out=1.0)
    topo = LinkTopology((0.0,) * 4, ((span, _site(g, 18.0)),), g)
    act = np.array([False, False, True, False])
    tr = propagate_link(topo, topo.launch_spectrum(act))
    ase = ase_added(18.0, 5.0, 193.0, 91.6)
    assert tr.receiver.p_sig[2] == pytest.approx(1.0, rel=1e-12)
    assert tr.receiver.osnr[2] == pytest.approx(osnr_ref(1.0, ase, 91.6), abs=1e-9)
    assert np.isnan(tr.receiver.gsnr[0])


def test_replica_smoke(replica, curve):
    tr = propagate_link(replica, replica.launch_spectrum())
    assert np.all(np.isfinite(tr.receiver.gsnr))
    rx_total = 10 * np.log10(np.sum(tr.receiver.p_sig + tr.receiver.p_ase))
    assert 15.0 < rx_total < 25.0  # 96 channels near 0 dBm each
    assert 10.0 < np.min(tr.receiver.gsnr) < np.max(tr.receiver.gsnr) < 20.0
    rep = receiver_metrics(tr, curve)
    assert len(rep) == 96
    assert np.all(np.isfinite(rep.ber[rep.is_cut]))
    assert np.all(np.isnan(rep.ber[~rep.is_cut]))


def test_linear_only_limit_gsnr_equals_osnr_in_symbol_bandwidth(replica, curve):
    topo = replica
    for k, span in enumerate(replica.spans):
        topo = topo.with_span(k, span.evolve(gamma=0.0))
    tr = propagate_link(topo, topo.launch_spectrum())
    assert np.all(tr.receiver.p_nli == 0.0)
    rep = receiver_metrics(tr, curve)
    assert np.allclose(rep.gsnr_db, rep.osnr_db - 10 * np.log10(91.6 / 12.5), atol=1e-12)


def test_doubling_ase_costs_3db():
    assert osnr_ref(1.0, 0.002, 91.6) == pytest.approx(osnr_ref(1.0, 0.001, 91.6) - 3.0103, abs=1e-4)


def test_determinism(replica):
    a = propagate_link(replica, replica.launch_spectrum())
    b = propagate_link(replica, replica.launch_spectrum())
    for x, y in ((a.receiver.p_sig, b.receiver.p_sig), (a.receiver.p_nli, b.receiver.p_nli), (a.receiver.gsnr, b.receiver.gsnr)):
        assert np.array_equal(x, y)


def test_nli_bookkeeping(replica):
    tr = propagate_link(replica, replica.launch_spectrum())
    recomputed = sum(rec.nli.power * tr.downstream_gain(k) for k, rec in enumerate(tr.elements))
    assert np.allclose(tr.receiver.p_nli, recomputed, rtol=1e-9, atol=0)


def test_gsnr_non_increasing_with_spans(replica):
    prev = None
    # ROADM sits at site index 1, so the shortest valid prefix has two elements
    for n in range(2, len(replica.elements) + 1):
        topo = LinkTopology(replica.launch_power, replica.elements[:n], replica.grid, replica.roadm_site_index, replica.roadm_loss)
        g = propagate_link(topo, topo.launch_spectrum()).receiver.gsnr
        if prev is not None:
            assert np.all(g <= prev + 1e-12)
        prev = g


def test_commissioned_replica_is_flat(replica):
    tr = propagate_link(replica, replica.launch_spectrum())
    for rec in tr.elements:
        # commissioning restores the input level; ASE added by the amplifier rides on top
        out = safe_dbm(rec.amp_out.total_mw)
        assert abs(out.mean()) < 0.3
        assert np.ptp(out) < 1.0


def test_topology_json_round_trip(replica):
    doc = json.loads(json.dumps(replica.to_dict()))
    assert LinkTopology.from_dict(doc) == replica
    doc["schema_version"] = 99
    with pytest.raises(ValidationError, match="schema_version"):
        LinkTopology.from_dict(doc)


def test_errors_are_annotated_with_element(replica):
    bad = replica.with_span(3, replica.spans[3].evolve(dispersion=0.0))
    with pytest.raises(ValidationError, match="element 3"):
        propagate_link(bad, bad.launch_spectrum())


def test_topology_invariants(replica):
    with pytest.raises(ValidationError):
        LinkTopology(replica.launch_power, (), replica.grid)
    with pytest.raises(ValidationError):
        LinkTopology(replica.launch_power, replica.elements, replica.grid, roadm_site_index=6)
    with pytest.raises(ValidationError):
        LinkTopology(replica.launch_power[:-1], replica.elements, replica.grid)


def test_replica_lengths(replica):
    assert sum(s.length for s in replica.spans) == pytest.approx(469.3, abs=1e-9)
    assert max(s.length for s in replica.spans) == 86.4
    assert replica.roadm_site_index == 1
