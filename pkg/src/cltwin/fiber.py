"""Fiber spans: attenuation, inter-channel SRS power transfer, connector losses."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT

from . import _kernels
from .exceptions import ValidationError
from .spectral import ChannelGrid, PowerSpectrum, SpectralProfile

DB_TO_NEPER = math.log(10.0) / 10.0

#: Triangular Raman gain slope, 1/(W km THz), and its clip frequency, THz.
DEFAULT_RAMAN_SLOPE = 0.028
DEFAULT_RAMAN_CLIP = 15.0
DEFAULT_STEP_KM = 0.05

#: Representative G.652 attenuation for the replica link (dB/km).
G652_ATTENUATION = SpectralProfile(((186.1, 0.210), (191.0, 0.200), (196.1, 0.191)))


@dataclass(frozen=True)
class FiberSpan:
    """One fiber section with lumped connector losses at each end.

    Units: length km, attenuation dB/km, raman_slope 1/(W km THz),
    raman_clip THz, connectors dB, gamma 1/(W km), dispersion ps/(nm km).
    """

    length: float
    attenuation: SpectralProfile = G652_ATTENUATION
    raman_slope: float = DEFAULT_RAMAN_SLOPE
    raman_clip: float = DEFAULT_RAMAN_CLIP
    connector_in: float = 0.5
    connector_out: float = 0.5
    gamma: float = 1.3
    dispersion: float = 17.0

    def __post_init__(self):
        if not self.length > 0:
            raise ValidationError(f"span length must be positive, got {self.length}")
        if self.raman_slope < 0:
            raise ValidationError("Raman slope must be non-negative")
        if not self.raman_clip > 0:
            raise ValidationError("Raman clip frequency must be positive")
        if self.connector_in < 0 or self.connector_out < 0:
            raise ValidationError("connector losses must be non-negative")
        if np.any(self.attenuation.values < 0):
            raise ValidationError("attenuation must be non-negative")

    def alpha_db(self, f) -> np.ndarray:
        return np.asarray(self.attenuation(f), dtype=float)

    def beta2(self, f) -> np.ndarray:
        """Group-velocity dispersion in s^2/m at each frequency (THz)."""
        lam = SPEED_OF_LIGHT / (np.asarray(f, dtype=float) * 1e12)
        d_si = self.dispersion * 1e-6
        return -d_si * lam**2 / (2.0 * np.pi * SPEED_OF_LIGHT)

    def evolve(self, **changes) -> "FiberSpan":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "attenuation": self.attenuation.to_dict(),
            "raman_slope": self.raman_slope,
            "raman_clip": self.raman_clip,
            "connector_in": self.connector_in,
            "connector_out": self.connector_out,
            "gamma": self.gamma,
            "dispersion": self.dispersion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FiberSpan":
        d = dict(d)
        d["attenuation"] = SpectralProfile.from_dict(d["attenuation"])
        return cls(**d)


def effective_length(alpha, length):
    """Nonlinear effective length (km) for attenuation ``alpha`` in dB/km."""
    a = np.asarray(alpha, dtype=float) * DB_TO_NEPER
    out = -np.expm1(-a * length) / a
    return float(out) if np.ndim(out) == 0 else out


def srs_coupling(f_i, f_j, cr, clip=DEFAULT_RAMAN_CLIP):
    """Gain coefficient 1/(W km) that channel ``j`` imposes on channel ``i``.

    Positive when ``j`` sits above ``i`` in frequency; antisymmetric in (i, j).
    """
    df = np.asarray(f_j, dtype=float) - np.asarray(f_i, dtype=float)
    out = np.where(np.abs(df) <= clip, cr * df, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def coupling_matrix(f, cr, clip=DEFAULT_RAMAN_CLIP) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    return srs_coupling(f[:, None], f[None, :], cr, clip)


@dataclass(frozen=True)
class SpanResult:
    output: PowerSpectrum
    net_change: np.ndarray
    step_too_large: bool = False
    clamped: bool = False


def integrate_fiber(total_mw, freqs, alpha_db, cr, clip, length, step=DEFAULT_STEP_KM):
    """RK4 integration of per-channel total power over the fiber only.

    Returns ``(output_mw, step_too_large, clamped)``.
    """
    if not step > 0:
        raise ValidationError("integration step must be positive")
    freqs = np.ascontiguousarray(freqs, dtype=float)
    p0 = np.ascontiguousarray(total_mw, dtype=float)
    a = np.ascontiguousarray(alpha_db, dtype=float) * DB_TO_NEPER
    too_large = step > length
    nsteps = 1 if too_large else max(1, math.ceil(length / step - 1e-9))
    h = length / nsteps
    span_f = freqs.max() - freqs.min() if freqs.size else 0.0
    use_moment = span_f <= clip
    g = np.zeros((1, 1)) if use_moment else coupling_matrix(freqs, cr, clip)
    out, clamped = _kernels.rk4_span(p0, a, freqs, float(cr), g, use_moment, h, nsteps)
    return out, too_large, bool(clamped)


def propagate_span(
    spectrum: PowerSpectrum,
    span: FiberSpan,
    grid: ChannelGrid,
    step: float = DEFAULT_STEP_KM,
) -> SpanResult:
    """Connector in, attenuation plus SRS over the fiber, connector out.

    ASE rides along with its channel's signal, sharing its rate, and also acts
    as Raman pump. ``net_change`` is the per-channel dB change of total power
    (0 for dark channels).
    """
    if len(spectrum) != len(grid):
        raise ValidationError(f"spectrum has {len(spectrum)} channels, grid has {len(grid)}")
    f = grid.frequencies
    launched = spectrum.scaled(10.0 ** (-span.connector_in / 10.0))
    t_in = launched.total_mw
    t_out, too_large, clamped = integrate_fiber(
        t_in, f, span.alpha_db(f), span.raman_slope, span.raman_clip, span.length, step
    )
    if too_large:
        warnings.warn("integration step exceeds span length; using a single step", RuntimeWarning)
    lit = t_in > 0
    ratio = np.zeros_like(t_in)
    ratio[lit] = t_out[lit] / t_in[lit]
    ratio *= 10.0 ** (-span.connector_out / 10.0)
    out = launched.scaled(ratio)
    net = np.zeros_like(t_in)
    net[lit] = 10.0 * np.log10(np.maximum(ratio[lit], 1e-300)) - span.connector_in
    return SpanResult(out, net, too_large, clamped)
