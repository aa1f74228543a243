"""Quality of transmission: closed-form GN-model NLI, OSNR/GSNR, B2B BER curve."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfc

from .exceptions import ValidationError
from .fiber import DB_TO_NEPER, FiberSpan, effective_length
from .spectral import ChannelGrid, PowerSpectrum

OSNR_REF_BANDWIDTH = 12.5
OSNR_CEILING_DB = 60.0


class HullError(ValidationError):
    """Query outside the transponder curve's measured range."""

    def __init__(self, message, bounds):
        super().__init__(message)
        self.bounds = bounds


@dataclass(frozen=True)
class NliResult:
    """Per-channel NLI power in mW, referenced to the symbol-rate bandwidth."""

    power: np.ndarray

    def __post_init__(self):
        arr = np.array(self.power, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "power", arr)


def nli_span(launch: PowerSpectrum, span: FiberSpan, grid: ChannelGrid) -> NliResult:
    """Incoherent GN-model NLI generated in one span (SPM + XPM terms).

    ``launch`` is the comb right after the input connector. Only signal power
    of active channels enters the interference sums.
    """
    f = grid.frequencies
    act = launch.active
    out = np.zeros(len(grid))
    if not act.any():
        return NliResult(out)
    fa = f[act]
    b_hz = grid.symbol_rates[act] * 1e9
    p_w = launch.signal_power[act] * 1e-3
    beta2 = np.abs(span.beta2(fa))
    if np.any(beta2 == 0):
        raise ValidationError("zero dispersion makes the GN closed form singular")
    alpha = span.alpha_db(fa)
    if np.any(alpha <= 0):
        raise ValidationError("GN closed form needs positive attenuation")
    leff = effective_length(alpha, span.length) * 1e3
    leff_a = 1.0 / (alpha * DB_TO_NEPER / 1e3)
    gamma = span.gamma * 1e-3
    pre = (gamma * leff) ** 2

    x = beta2 * leff_a * b_hz**2
    eta_spm = (8.0 / 27.0) * pre * np.arcsinh(0.5 * np.pi**2 * x) / (np.pi * x)

    df = np.abs(fa[:, None] - fa[None, :]) * 1e12
    half_b = 0.5 * b_hz[None, :]
    off = ~np.eye(fa.size, dtype=bool)
    if np.any(df[off] <= np.broadcast_to(half_b, df.shape)[off]):
        raise ValidationError("overlapping channels: spacing must exceed half the symbol rate")
    logs = np.zeros_like(df)
    logs[off] = np.log((df + half_b)[off] / (df - half_b)[off])
    xpm_pref = (16.0 / 27.0) * pre / (2.0 * np.pi * beta2 * leff_a)
    xpm = xpm_pref * (logs @ (p_w**2 / b_hz**2))

    nli_w = eta_spm * p_w**3 + xpm * p_w
    out[act] = nli_w * 1e3
    return NliResult(out)


def gsnr(p_sig, p_ase, p_nli):
    """Generalized SNR in dB; all powers in the same bandwidth."""
    p_sig = np.asarray(p_sig, dtype=float)
    noise = np.asarray(p_ase, dtype=float) + np.asarray(p_nli, dtype=float)
    if np.any(noise <= 0):
        raise ValidationError("GSNR needs a positive ASE + NLI denominator")
    if np.any(p_sig <= 0):
        raise ValidationError("GSNR needs positive signal power")
    out = 10.0 * np.log10(p_sig / noise)
    return float(out) if np.ndim(out) == 0 else out


def osnr_ref(p_sig, p_ase_in_bi, b_i):
    """OSNR in the 12.5 GHz reference bandwidth; ASE-free channels hit a 60 dB ceiling."""
    p_sig = np.asarray(p_sig, dtype=float)
    ase = np.asarray(p_ase_in_bi, dtype=float) * (OSNR_REF_BANDWIDTH / np.asarray(b_i, dtype=float))
    if np.any(p_sig <= 0) or np.any(ase < 0):
        raise ValidationError("OSNR needs positive signal and non-negative ASE")
    with np.errstate(divide="ignore"):
        out = np.where(ase > 0, 10.0 * np.log10(p_sig / np.where(ase > 0, ase, 1.0)), OSNR_CEILING_DB)
    out = np.minimum(out, OSNR_CEILING_DB)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class TransponderCurve:
    """Back-to-back BER versus SNR (dB), monotone."""

    snr: np.ndarray
    ber: np.ndarray

    def __post_init__(self):
        snr = np.array(self.snr, dtype=float)
        ber = np.array(self.ber, dtype=float)
        if snr.ndim != 1 or snr.shape != ber.shape or snr.size < 2:
            raise ValidationError("transponder curve needs at least two (snr, ber) points")
        if np.any(np.diff(snr) <= 0):
            raise ValidationError("transponder curve SNR must be strictly increasing")
        if np.any(np.diff(ber) >= 0):
            raise ValidationError("transponder curve BER must be strictly decreasing")
        if np.any(ber <= 0) or np.any(ber >= 0.5):
            raise ValidationError("transponder curve BER must lie in (0, 0.5)")
        for name, arr in (("snr", snr), ("ber", ber)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other):
        if not isinstance(other, TransponderCurve):
            return NotImplemented
        return np.array_equal(self.snr, other.snr) and np.array_equal(self.ber, other.ber)

    @property
    def snr_hull(self):
        return float(self.snr[0]), float(self.snr[-1])

    @property
    def ber_hull(self):
        return float(self.ber[-1]), float(self.ber[0])

    def snr_to_ber(self, snr):
        return translate(self, "snr_to_ber", snr)

    def ber_to_snr(self, ber):
        return translate(self, "ber_to_snr", ber)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["snr_db", "ber"])
        for s, b in zip(self.snr, self.ber):
            w.writerow([repr(float(s)), repr(float(b))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TransponderCurve":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [c.strip() for c in rows[0]] != ["snr_db", "ber"]:
            raise ValidationError("transponder CSV must start with header 'snr_db,ber'")
        try:
            data = np.array([[float(a), float(b)] for a, b in (r for r in rows[1:] if r)])
        except ValueError as exc:
            raise ValidationError(f"malformed transponder CSV: {exc}") from exc
        if data.size == 0:
            raise ValidationError("transponder CSV has no data rows")
        return cls(data[:, 0], data[:, 1])

    @classmethod
    def load(cls, path) -> "TransponderCurve":
        return cls.from_csv(Path(path).read_text())


def translate(curve: TransponderCurve, query: str, value):
    """Interpolate the curve linearly in (snr_dB, log10 BER) space.

    ``query`` is ``snr_to_ber`` or ``ber_to_snr``.
    """
    v = np.asarray(value, dtype=float)
    logber = np.log10(curve.ber)
    if query == "snr_to_ber":
        lo, hi = curve.snr_hull
        if np.any(v < lo) or np.any(v > hi):
            raise HullError(f"SNR {value} outside curve hull [{lo}, {hi}] dB", (lo, hi))
        out = 10.0 ** np.interp(v, curve.snr, logber)
        # np.interp already returns knot values; keep exact BER at knots
        idx = np.searchsorted(curve.snr, v)
        hit = (idx < curve.snr.size) & (curve.snr[np.minimum(idx, curve.snr.size - 1)] == v)
        out = np.where(hit, curve.ber[np.minimum(idx, curve.snr.size - 1)], out)
    elif query == "ber_to_snr":
        lo, hi = curve.ber_hull
        if np.any(v <= 0) or np.any(v < lo) or np.any(v > hi):
            raise HullError(f"BER {value} outside curve hull [{lo}, {hi}]", (lo, hi))
        out = np.interp(np.log10(v), logber[::-1], curve.snr[::-1])
    else:
        raise ValidationError(f"unknown translation {query!r}")
    return float(out) if np.ndim(out) == 0 else out


def _erfc_ber(snr_db, c_mod):
    return 0.5 * erfc(np.sqrt(10.0 ** (np.asarray(snr_db) / 10.0)) / np.sqrt(2.0) * c_mod)


def make_default_curve(anchor_snr=17.0, anchor_ber=2e-2, snr_grid=None) -> TransponderCurve:
    """Synthesize the stock B2B curve through the (17 dB, 2e-2) anchor."""
    c_mod = brentq(lambda c: _erfc_ber(anchor_snr, c) - anchor_ber, 1e-3, 5.0, xtol=1e-14)
    snr = np.arange(0.0, 30.0 + 1e-9, 0.5) if snr_grid is None else np.asarray(snr_grid, float)
    return TransponderCurve(snr, _erfc_ber(snr, c_mod))


def default_curve() -> TransponderCurve:
    """The stock curve shipped as package data."""
    text = resources.files("cltwin").joinpath("data/transponder_b2b.csv").read_text()
    return TransponderCurve.from_csv(text)
