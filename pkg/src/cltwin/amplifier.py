"""Per-band EDFA: set-point gain with linear tilt, fixed ripple, gain-dependent NF."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.constants import h as PLANCK

from .exceptions import ValidationError
from .spectral import ChannelGrid, PowerSpectrum, SpectralProfile

NF_FLOOR_DB = 3.01
_BOUND_TOL = 1e-9


@dataclass(frozen=True)
class EdfaConfig:
    """Gain set-point (dB) and edge-to-edge linear tilt (dB, + favours high f)."""

    gain_target: float
    tilt: float = 0.0

    def to_dict(self):
        return {"gain_target": self.gain_target, "tilt": self.tilt}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["gain_target"]), float(d["tilt"]))


@dataclass(frozen=True)
class EdfaModel:
    band: str
    band_lo: float
    band_hi: float
    ripple: SpectralProfile
    nf0: SpectralProfile
    gain_range: tuple = (10.0, 38.0)
    tilt_range: tuple = (-4.0, 4.0)
    nf_penalty_slope: float = 0.3
    design_gain: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "gain_range", tuple(float(x) for x in self.gain_range))
        object.__setattr__(self, "tilt_range", tuple(float(x) for x in self.tilt_range))
        if not self.band_hi > self.band_lo:
            raise ValidationError(f"{self.band}-band EDFA has an empty band")
        if self.gain_range[0] > self.gain_range[1] or self.tilt_range[0] > self.tilt_range[1]:
            raise ValidationError(f"{self.band}-band EDFA has an empty gain or tilt range")
        if np.any(self.nf0.values <= 3.0):
            raise ValidationError(f"{self.band}-band EDFA noise figure must exceed 3 dB")
        rf = self.ripple.frequencies
        if rf.min() < self.band_lo - _BOUND_TOL or rf.max() > self.band_hi + _BOUND_TOL:
            raise ValidationError(f"{self.band}-band EDFA ripple knots fall outside its band")

    @property
    def center(self) -> float:
        return 0.5 * (self.band_lo + self.band_hi)

    def in_band(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        return (f >= self.band_lo - _BOUND_TOL) & (f <= self.band_hi + _BOUND_TOL)

    def check_config(self, config: EdfaConfig) -> None:
        lo, hi = self.gain_range
        if config.gain_target < lo - _BOUND_TOL:
            raise ValidationError(f"{self.band}-band gain {config.gain_target} dB below minimum {lo} dB")
        if config.gain_target > hi + _BOUND_TOL:
            raise ValidationError(f"{self.band}-band gain {config.gain_target} dB above maximum {hi} dB")
        lo, hi = self.tilt_range
        if config.tilt < lo - _BOUND_TOL:
            raise ValidationError(f"{self.band}-band tilt {config.tilt} dB below minimum {lo} dB")
        if config.tilt > hi + _BOUND_TOL:
            raise ValidationError(f"{self.band}-band tilt {config.tilt} dB above maximum {hi} dB")

    def evolve(self, **changes) -> "EdfaModel":
        return replace(self, **changes)

    def to_dict(self):
        return {
            "band": self.band,
            "band_lo": self.band_lo,
            "band_hi": self.band_hi,
            "ripple": self.ripple.to_dict(),
            "nf0": self.nf0.to_dict(),
            "gain_range": list(self.gain_range),
            "tilt_range": list(self.tilt_range),
            "nf_penalty_slope": self.nf_penalty_slope,
            "design_gain": self.design_gain,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["ripple"] = SpectralProfile.from_dict(d["ripple"])
        d["nf0"] = SpectralProfile.from_dict(d["nf0"])
        d["gain_range"] = tuple(d["gain_range"])
        d["tilt_range"] = tuple(d["tilt_range"])
        return cls(**d)


def knot_frequencies(band_lo: float, band_hi: float, n: int = 5) -> np.ndarray:
    """Evenly spaced profile knots across a band, edges included."""
    return np.round(np.linspace(band_lo, band_hi, n), 9)


def flat_model(band: str, band_lo: float, band_hi: float, nf: float, design_gain: float, **kw) -> EdfaModel:
    """EDFA with zero ripple and a flat noise figure, knots on a 5-point lattice."""
    kf = knot_frequencies(band_lo, band_hi)
    return EdfaModel(
        band,
        band_lo,
        band_hi,
        SpectralProfile.from_arrays(kf, np.zeros(kf.size)),
        SpectralProfile.from_arrays(kf, np.full(kf.size, float(nf))),
        design_gain=design_gain,
        **kw,
    )


def gain_profile(model: EdfaModel, config: EdfaConfig, grid: ChannelGrid) -> np.ndarray:
    """Per-channel gain in dB for the channels inside the model's band, in grid order."""
    model.check_config(config)
    f = grid.frequencies[model.in_band(grid.frequencies)]
    return _gain_db(model, config, f)


def _gain_db(model: EdfaModel, config: EdfaConfig, f) -> np.ndarray:
    slope = config.tilt * (f - model.center) / (model.band_hi - model.band_lo)
    return config.gain_target + slope + model.ripple(f)


def effective_nf(model: EdfaModel, config: EdfaConfig, f):
    """Noise figure (dB): base profile plus a linear penalty below design gain."""
    penalty = model.nf_penalty_slope * max(0.0, model.design_gain - config.gain_target)
    return model.nf0(f) + penalty


def ase_added(gain_db, nf_db, f, bandwidth):
    """ASE (mW) added by an amplifier in ``bandwidth`` GHz around ``f`` THz."""
    g_lin = np.power(10.0, np.asarray(gain_db, dtype=float) / 10.0)
    nf_lin = np.power(10.0, np.asarray(nf_db, dtype=float) / 10.0)
    watts = nf_lin * PLANCK * np.asarray(f, float) * 1e12 * np.asarray(bandwidth, float) * 1e9 * np.maximum(g_lin - 1.0, 0.0)
    out = watts * 1e3
    return float(out) if np.ndim(out) == 0 else out


def amplify(spectrum: PowerSpectrum, model: EdfaModel, config: EdfaConfig, grid: ChannelGrid) -> PowerSpectrum:
    if len(spectrum) != len(grid):
        raise ValidationError(f"spectrum has {len(spectrum)} channels, grid has {len(grid)}")
    model.check_config(config)
    f = grid.frequencies
    sel = model.in_band(f)
    g_db = _gain_db(model, config, f[sel])
    g_lin = np.power(10.0, g_db / 10.0)
    sig = spectrum.signal_power.copy()
    ase = spectrum.ase_power.copy()
    sig[sel] *= g_lin
    ase[sel] *= g_lin
    lit = spectrum.active[sel]
    new = ase_added(g_db, effective_nf(model, config, f[sel]), f[sel], grid.symbol_rates[sel])
    ase[sel] += np.where(lit, new, 0.0)
    return PowerSpectrum(sig, ase, spectrum.active)
