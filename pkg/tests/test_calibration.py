import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cltwin.amplifier import NF_FLOOR_DB, ase_added
from cltwin.calibration import (
    accuracy_report,
    calibratable_parameters,
    calibrate,
    collect_all,
    estimate_nf,
    split_connector_loss,
    stage1_baseline,
    stage2_totals,
    stage3_fit,
    stage4_nf,
    stage5_verify,
)
from cltwin.exceptions import NotCalibratedError, ValidationError
from cltwin.field import GroundTruth, NoiseSpec, PerturbationSpec, make_field
from cltwin.qot import OSNR_REF_BANDWIDTH


def _loadings(grid):
    full = np.ones(len(grid), bool)
    half = full.copy()
    half[np.flatnonzero(grid.band_mask("L"))[1::2]] = False
    half |= grid.role_mask("CUT")
    return [full, half]


def test_split_connector_loss_example():
    c_in, c_out, suspect = split_connector_loss(19.28, 0.2, 86.4)
    assert c_in == pytest.approx(1.0, abs=1e-12) and c_out == pytest.approx(1.0, abs=1e-12)
    assert not suspect


def test_split_connector_loss_suspect():
    c_in, c_out, suspect = split_connector_loss(16.0, 0.2, 86.4)
    assert suspect and c_in == 0.0 and c_out == 0.0


@given(st.floats(0.0, 3.0), st.floats(20.0, 120.0), st.floats(0.15, 0.25))
def test_symmetric_connectors_recover_sum(c, length, alpha):
    c_in, c_out, _ = split_connector_loss(alpha * length + 2 * c, alpha, length)
    assert c_in + c_out == pytest.approx(2 * c, abs=1e-9)


def test_missing_curve_rejected(replica):
    with pytest.raises(ValidationError, match="transponder curve"):
        stage1_baseline(replica, None)


def test_stage1_provenance(replica, curve):
    twin = stage1_baseline(replica, curve)
    assert set(twin.provenance) == set(calibratable_parameters(replica))
    assert set(twin.provenance.values()) == {"datasheet"}
    assert twin.stage_completed == 1


def test_stages_are_fixed_points_on_the_replica(replica, curve):
    fld = make_field(replica, PerturbationSpec.zero(), noise=NoiseSpec.none())
    tel = collect_all(fld)
    twin = stage1_baseline(replica, curve)
    t2 = stage2_totals(twin, tel["totals"])
    for a, b in zip(t2.estimate.spans, replica.spans):
        assert a.connector_in == pytest.approx(b.connector_in, abs=1e-6)
        assert a.connector_out == pytest.approx(b.connector_out, abs=1e-6)
    t3 = stage3_fit(t2, tel["ocm"])
    for a, b in zip(t3.estimate.spans, replica.spans):
        assert a.connector_in == pytest.approx(b.connector_in, abs=1e-6)
        assert a.raman_slope == pytest.approx(b.raman_slope, rel=1e-6)
    t4 = stage4_nf(t3, tel["osnr"], tel["ocm"], tel["rx_osnr"])
    for a, b in zip(t4.estimate.sites, replica.sites):
        for band in ("C", "L"):
            assert np.allclose(a.model(band).nf0.values, b.model(band).nf0.values, atol=1e-6)
            assert np.allclose(a.model(band).ripple.values, 0.0, atol=1e-6)


def test_stage3_rejects_missing_ocm(replica, curve):
    twin = stage1_baseline(replica, curve)
    with pytest.raises(ValidationError, match="underdetermined"):
        stage3_fit(twin, {})


def test_stage4_needs_stage3(replica, curve):
    with pytest.raises(NotCalibratedError):
        stage4_nf(stage1_baseline(replica, curve), {})


def test_lm_history_monotone(calibrated_noise_free):
    for _, hist in calibrated_noise_free.values():
        h = hist[2].residuals["stage3"]["lm_history"]
        assert np.all(np.diff(h) <= 0)


def test_accuracy_improves_per_stage(calibrated_noise_free):
    for fld, hist in calibrated_noise_free.values():
        errs = [accuracy_report(t, fld).max_abs("power") for t in hist]
        assert errs[0] > errs[1] > errs[3]
        assert errs[3] < 0.05


def test_provenance_tags(calibrated_noise_free):
    _, hist = calibrated_noise_free[0]
    prov = hist[-1].provenance
    assert prov["span0.connector_in"] == "stage3"
    assert prov["span0.attenuation"] == "datasheet"
    assert prov["site2.L.nf0"] == "stage4"
    assert hist[-1].stage_completed == 4


@pytest.mark.parametrize("nf", [4.0, 5.0, 6.0, 8.0])
@pytest.mark.parametrize("gain", [10.0, 17.0, 25.0])
def test_nf_round_trip(nf, gain):
    f = np.array([190.0, 194.0])
    sig_in = np.array([1e-2, 2e-2])
    ase_in = np.array([1e-5, 3e-6])
    g = 10 ** (gain / 10)
    sig_out = g * sig_in
    ase_out = g * ase_in + ase_added(gain, nf, f, OSNR_REF_BANDWIDTH)
    o_in = 10 * np.log10(sig_in / ase_in)
    o_out = 10 * np.log10(sig_out / ase_out)
    est, floored = estimate_nf(gain, sig_in, o_in, sig_out, o_out, f)
    assert np.allclose(est, nf, atol=0.05)
    assert not floored.any()


def test_nf_floor_when_no_ase_added():
    f = np.array([193.0])
    est, floored = estimate_nf(20.0, np.array([1e-2]), np.array([30.0]), np.array([1.0]), np.array([30.0]), f)
    assert floored.all() and est[0] == NF_FLOOR_DB


def test_receiver_only_common_offset(replica, curve):
    sites = [s.__class__(**{**s.__dict__, "has_osnr_monitor": False}) for s in replica.sites]
    topo = replica
    for k, s in enumerate(sites):
        topo = topo.with_site(k, s)
    spec = PerturbationSpec(None, 0.0, (1.0, 1.0), (0.7, 0.7))
    fld = make_field(topo, spec, seed=5, noise=NoiseSpec.none())
    hist = calibrate(topo, fld, 4)
    for est, truth in zip(hist[-1].estimate.sites, fld.truth.sites):
        for b in ("C", "L"):
            assert np.allclose(est.model(b).nf0.values, truth.model(b).nf0.values, atol=0.1)


def test_receiver_only_needs_rx_snapshot(replica, curve):
    fld = make_field(replica, PerturbationSpec.zero(), noise=NoiseSpec.none())
    tel = collect_all(fld)
    twin = stage3_fit(stage2_totals(stage1_baseline(replica, curve), tel["totals"]), tel["ocm"])
    with pytest.raises(ValidationError, match="receiver OSNR"):
        stage4_nf(twin, {}, tel["ocm"], None)


def test_report_summary_consistent(calibrated_noise_free):
    fld, hist = calibrated_noise_free[1]
    rep = accuracy_report(hist[-1], fld)
    s = rep.summary()
    assert s["power_max"] == rep.max_abs("power") and s["gsnr_rms"] == rep.rms("gsnr")
    assert s["power_rms"] <= s["power_max"]
    assert np.sum(np.isfinite(rep.gsnr_error)) == 96
    with pytest.raises(ValidationError):
        rep.max_abs("ber")


def test_stage5_requires_stage4_and_two_loadings(calibrated_noise_free, replica, curve):
    fld, hist = calibrated_noise_free[0]
    grid = replica.grid
    with pytest.raises(NotCalibratedError):
        stage5_verify(hist[1], fld, _loadings(grid))
    with pytest.raises(ValidationError):
        stage5_verify(hist[-1], fld, _loadings(grid)[:1])


def test_stage5_identical_loadings_inconclusive(calibrated_noise_free, replica):
    fld, hist = calibrated_noise_free[0]
    full = np.ones(len(replica.grid), bool)
    rep = stage5_verify(hist[-1], fld, [full, full])
    assert rep.inconclusive


def test_stage5_well_calibrated_twin_passes(calibrated_noise_free, replica):
    for fld, hist in calibrated_noise_free.values():
        before = fld.loading()
        rep = stage5_verify(hist[-1], fld, _loadings(replica.grid))
        assert rep.max_abs("gsnr") <= 0.3
        assert rep.flagged_spans == ()
        assert np.array_equal(fld.loading(), before)


@pytest.mark.parametrize("span", [0, 1])
def test_stage5_flags_injected_connector_error(calibrated_noise_free, replica, span):
    fld, hist = calibrated_noise_free[0]
    twin = hist[-1]
    bad = twin.estimate.spans[span]
    twin = twin.evolve(estimate=twin.estimate.with_span(span, bad.evolve(connector_in=bad.connector_in + 2.0)))
    rep = stage5_verify(twin, fld, _loadings(replica.grid))
    assert rep.max_abs("gsnr") > 0.5
    assert span in rep.flagged_spans


def test_calibrate_rejects_stage5(replica):
    fld = GroundTruth(replica)
    with pytest.raises(ValidationError):
        calibrate(replica, fld, 5)


def test_rms_accuracy_monotone_per_stage(calibrated_noise_free):
    for fld, hist in calibrated_noise_free.values():
        reps = [accuracy_report(t, fld) for t in hist]
        assert reps[1].rms("power") <= reps[0].rms("power")
        assert reps[2].rms("power") <= reps[1].rms("power")
        assert reps[3].rms("gsnr") <= reps[2].rms("gsnr")
