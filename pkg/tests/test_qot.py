import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.constants import c as C_LIGHT

from cltwin.exceptions import ValidationError
from cltwin.fiber import FiberSpan
from cltwin.qot import (
    HullError,
    TransponderCurve,
    default_curve,
    gsnr,
    make_default_curve,
    nli_span,
    osnr_ref,
    translate,
)
from cltwin.spectral import PowerSpectrum, SpectralProfile, build_cl_grid, replica_grid

FLAT = SpectralProfile.constant(0.2)


def _spm_reference(p_mw, gamma=1.3, d=17.0, alpha=0.2, length=80.0, b_ghz=91.6, f_thz=193.0):
    """Independent scalar evaluation of the SPM closed form."""
    import math

    a = alpha * math.log(10) / 10 / 1e3
    leff = (1 - math.exp(-a * length * 1e3)) / a
    leff_a = 1 / a
    lam = C_LIGHT / (f_thz * 1e12)
    beta2 = d * 1e-6 * lam**2 / (2 * math.pi * C_LIGHT)
    b = b_ghz * 1e9
    g = gamma * 1e-3
    x = beta2 * leff_a * b**2
    eta = 8 / 27 * g**2 * leff**2 * math.asinh(math.pi**2 / 2 * x) / (math.pi * x)
    return eta * (p_mw * 1e-3) ** 3 * 1e3


def test_single_channel_spm_matches_reference():
    g = build_cl_grid(188.0, 188.0, 193.0, 193.0, 100, 91.6)
    s = PowerSpectrum.from_dbm([0.0, 0.0], [False, True])
    nli = nli_span(s, FiberSpan(80.0, FLAT), g).power
    assert nli[0] == 0.0
    assert nli[1] == pytest.approx(_spm_reference(1.0), rel=1e-12)


def test_xpm_term_against_scalar_sum():
    g = build_cl_grid(193.0, 193.0, 193.1, 193.1, 100, 91.6)
    p = np.array([1.0, 2.0])
    s = PowerSpectrum(p, np.zeros(2))
    nli = nli_span(s, FiberSpan(80.0, FLAT), g).power
    a = 0.2 * np.log(10) / 10 / 1e3
    leff = (1 - np.exp(-a * 80e3)) / a
    lam = C_LIGHT / (193.0e12)
    beta2 = 17e-6 * lam**2 / (2 * np.pi * C_LIGHT)
    b = 91.6e9
    df = 0.1e12
    eta_x = 16 / 27 * (1.3e-3) ** 2 * leff**2 / (2 * np.pi * beta2 / a * b**2) * np.log((df + b / 2) / (df - b / 2))
    xpm0 = eta_x * 1e-3 * (2e-3) ** 2 * 1e3
    assert nli[0] == pytest.approx(_spm_reference(1.0) + xpm0, rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=96, max_size=96))
def test_nli_cubic_homogeneity(dbm):
    g = replica_grid()
    s = PowerSpectrum.from_dbm(np.array(dbm))
    span = FiberSpan(80.0)
    base = nli_span(s, span, g).power
    big = nli_span(s.scaled(10.0), span, g).power
    assert np.allclose(big, 1000.0 * base, rtol=1e-12, atol=0)


def test_nli_increases_with_gamma_length_and_power():
    g = replica_grid()
    s = PowerSpectrum.from_dbm(np.zeros(len(g)))
    base = nli_span(s, FiberSpan(80.0), g).power
    assert np.all(nli_span(s, FiberSpan(80.0, gamma=1.5), g).power > base)
    assert np.all(nli_span(s, FiberSpan(100.0), g).power > base)
    p = s.signal_power.copy()
    p[10] *= 1.1
    bumped = nli_span(PowerSpectrum(p, np.zeros(len(g))), FiberSpan(80.0), g).power
    assert np.all(bumped > base)


def test_nli_rejects_singular_and_overlap():
    g = replica_grid()
    s = PowerSpectrum.from_dbm(np.zeros(len(g)))
    with pytest.raises(ValidationError):
        nli_span(s, FiberSpan(80.0, dispersion=0.0), g)
    from cltwin.spectral import Channel, ChannelGrid

    tight = ChannelGrid((Channel(193.0, 91.6, "C"), Channel(193.04, 91.6, "C")), 100.0)
    with pytest.raises(ValidationError, match="overlapping"):
        nli_span(PowerSpectrum.from_dbm([0.0, 0.0]), FiberSpan(80.0), tight)


def test_gsnr_examples():
    assert gsnr(1.0, 0.01, 0.01) == pytest.approx(16.9897, abs=1e-4)
    assert gsnr(1.0, 0.01, 0.0) == pytest.approx(20.0)
    with pytest.raises(ValidationError):
        gsnr(1.0, 0.0, 0.0)


@settings(max_examples=1000, deadline=None)
@given(st.floats(1e-3, 1e2), st.floats(1e-8, 1.0), st.floats(1e-8, 1.0))
def test_gsnr_identity(p_sig, p_ase, p_nli):
    g = 10 ** (gsnr(p_sig, p_ase, p_nli) / 10)
    lhs = 1 / g
    rhs = p_ase / p_sig + p_nli / p_sig
    assert abs(lhs - rhs) <= 1e-12 * rhs


def test_osnr_ref_examples():
    assert osnr_ref(1.0, 0.01, 12.5) == pytest.approx(20.0)
    assert osnr_ref(1.0, 0.01, 91.6) == pytest.approx(28.65, abs=0.005)
    assert osnr_ref(1.0, 0.0, 91.6) == 60.0


def test_translate_examples():
    c = TransponderCurve([13.0, 15.0, 17.0], [1e-1, 1e-2, 1e-4])
    assert translate(c, "snr_to_ber", 15.0) == 1e-2
    assert translate(c, "snr_to_ber", 16.0) == pytest.approx(1e-3, rel=1e-12)
    with pytest.raises(HullError) as err:
        translate(c, "snr_to_ber", 20.0)
    assert err.value.bounds == (13.0, 17.0)
    with pytest.raises(HullError):
        c.ber_to_snr(0.3)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 30.0))
def test_translate_round_trip(snr):
    c = default_curve()
    assert c.ber_to_snr(c.snr_to_ber(snr)) == pytest.approx(snr, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 29.9), st.floats(0.01, 0.1))
def test_translate_monotone(snr, d):
    c = default_curve()
    assert c.snr_to_ber(min(snr + d, 30.0)) < c.snr_to_ber(snr)


def test_default_curve_anchor_and_data_file():
    c = default_curve()
    assert c.snr_to_ber(17.0) == pytest.approx(2e-2, rel=1e-9)
    regenerated = make_default_curve()
    assert np.allclose(regenerated.ber, c.ber, rtol=1e-12)


def test_curve_csv(tmp_path):
    c = default_curve()
    p = tmp_path / "b2b.csv"
    p.write_text(c.to_csv())
    assert TransponderCurve.load(p) == c
    p.write_text("snr,ber\n1,0.1\n2,0.01\n")
    with pytest.raises(ValidationError, match="header"):
        TransponderCurve.load(p)


def test_curve_invariants():
    with pytest.raises(ValidationError):
        TransponderCurve([1.0, 1.0], [0.1, 0.01])
    with pytest.raises(ValidationError):
        TransponderCurve([1.0, 2.0], [0.01, 0.1])
    with pytest.raises(ValidationError):
        TransponderCurve([1.0, 2.0], [0.6, 0.1])
