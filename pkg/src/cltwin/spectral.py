"""Channel grids, power spectra, unit conversions and piecewise-linear profiles.

Powers are carried in mW internally and converted to dBm only at the edges.
Frequencies are in THz, symbol rates and spacings in GHz.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ValidationError

BANDS = ("L", "C")
ROLES = ("CUT", "DUMMY")
POWER_FLOOR_DBM = -100.0

#: Channels carrying transponder traffic in the default C48+L48 plan.
DEFAULT_CUT_FREQUENCIES = (188.6, 190.2, 191.9, 193.8, 195.6)

_FREQ_TOL = 1e-9


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Channel:
    center_frequency: float
    symbol_rate: float
    band: str
    role: str = "DUMMY"


@dataclass(frozen=True, eq=False)
class ChannelGrid:
    """Ordered comb of WDM channels on a fixed spacing."""

    channels: tuple
    spacing: float

    def __post_init__(self):
        channels = tuple(self.channels)
        object.__setattr__(self, "channels", channels)
        if not channels:
            raise ValidationError("grid needs at least one channel")
        f = np.array([ch.center_frequency for ch in channels])
        if np.any(np.diff(f) <= 0):
            raise ValidationError("center frequencies must be strictly increasing")
        for ch in channels:
            if ch.band not in BANDS:
                raise ValidationError(f"unknown band {ch.band!r}")
            if ch.role not in ROLES:
                raise ValidationError(f"unknown channel role {ch.role!r}")
            if ch.symbol_rate <= 0:
                raise ValidationError("symbol rate must be positive")
            if self.spacing < ch.symbol_rate:
                raise ValidationError(
                    f"spacing {self.spacing} GHz < symbol rate {ch.symbol_rate} GHz "
                    f"at {ch.center_frequency} THz"
                )
        hulls = {}
        for b in BANDS:
            fb = f[[ch.band == b for ch in channels]]
            if fb.size:
                hulls[b] = (float(fb.min()), float(fb.max()))
        if len(hulls) == 2:
            (llo, lhi), (clo, chi) = hulls["L"], hulls["C"]
            if not (lhi < clo or chi < llo):
                raise ValidationError("bands L and C overlap")
        object.__setattr__(self, "_hulls", hulls)
        object.__setattr__(self, "_f", _frozen(f))
        object.__setattr__(self, "_b", _frozen([ch.symbol_rate for ch in channels]))

    def __len__(self) -> int:
        return len(self.channels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChannelGrid):
            return NotImplemented
        return self.channels == other.channels and self.spacing == other.spacing

    def __hash__(self) -> int:
        return hash((self.channels, self.spacing))

    @property
    def frequencies(self) -> np.ndarray:
        """Center frequencies in THz."""
        return self._f

    @property
    def symbol_rates(self) -> np.ndarray:
        """Symbol rates in GHz."""
        return self._b

    def band_mask(self, band: str) -> np.ndarray:
        return np.array([ch.band == band for ch in self.channels])

    def role_mask(self, role: str) -> np.ndarray:
        return np.array([ch.role == role for ch in self.channels])

    def band_hull(self, band: str) -> tuple[float, float]:
        try:
            return self._hulls[band]
        except KeyError:
            raise ValidationError(f"grid has no {band}-band channels") from None

    @property
    def bands(self) -> tuple[str, ...]:
        return tuple(b for b in BANDS if b in self._hulls)

    def to_dict(self) -> dict:
        return {
            "spacing": self.spacing,
            "channels": [
                {
                    "center_frequency": ch.center_frequency,
                    "symbol_rate": ch.symbol_rate,
                    "band": ch.band,
                    "role": ch.role,
                }
                for ch in self.channels
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelGrid":
        try:
            chans = [
                Channel(float(c["center_frequency"]), float(c["symbol_rate"]), c["band"], c["role"])
                for c in d["channels"]
            ]
            return cls(tuple(chans), float(d["spacing"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed grid document: {exc!r}") from exc


def _band_frequencies(lo: float, hi: float, spacing_thz: float, band: str) -> list[float]:
    if hi < lo:
        raise ValidationError(f"{band}-band upper edge {hi} below lower edge {lo}")
    n = int(round((hi - lo) / spacing_thz))
    if abs(n * spacing_thz - (hi - lo)) > _FREQ_TOL:
        raise ValidationError(
            f"{band}-band range {lo}-{hi} THz is not divisible by spacing {spacing_thz * 1e3} GHz"
        )
    return [round(lo + k * spacing_thz, 9) for k in range(n + 1)]


def build_cl_grid(
    l_lo: float,
    l_hi: float,
    c_lo: float,
    c_hi: float,
    spacing: float = 100.0,
    symbol_rate: float = 91.6,
    cut_frequencies: Iterable[float] | None = DEFAULT_CUT_FREQUENCIES,
) -> ChannelGrid:
    """Build a fixed-grid C+L comb with channels at both band edges.

    Parameters
    ----------
    l_lo, l_hi, c_lo, c_hi : float
        Band edges in THz, inclusive.
    spacing, symbol_rate : float
        Channel spacing and symbol rate in GHz.
    cut_frequencies : iterable of float, optional
        Frequencies whose channels are marked CUT; the rest are DUMMY.
    """
    if spacing < symbol_rate:
        raise ValidationError(f"spacing {spacing} GHz < symbol rate {symbol_rate} GHz")
    if l_hi >= c_lo:
        raise ValidationError(f"L band ({l_lo}-{l_hi} THz) overlaps C band ({c_lo}-{c_hi} THz)")
    sp = spacing * 1e-3
    cuts = [float(x) for x in (cut_frequencies or ())]

    def role(f):
        return "CUT" if any(abs(f - c) < 1e-6 for c in cuts) else "DUMMY"

    chans = [Channel(f, symbol_rate, "L", role(f)) for f in _band_frequencies(l_lo, l_hi, sp, "L")]
    chans += [Channel(f, symbol_rate, "C", role(f)) for f in _band_frequencies(c_lo, c_hi, sp, "C")]
    return ChannelGrid(tuple(chans), spacing)


def replica_grid() -> ChannelGrid:
    """The 96-channel C48+L48 plan at 100 GHz spacing and 91.6 GBd."""
    return build_cl_grid(186.1, 190.8, 191.4, 196.1, 100.0, 91.6)


def dbm_to_mw(value):
    return np.power(10.0, np.asarray(value, dtype=float) / 10.0)


def mw_to_dbm(value):
    v = np.asarray(value, dtype=float)
    if np.any(v <= 0):
        raise ValidationError("mW to dBm conversion needs strictly positive power")
    return 10.0 * np.log10(v)


def convert_power(value, direction: str):
    """Convert between dBm and mW; ``direction`` is ``dbm_to_mw`` or ``mw_to_dbm``."""
    if direction == "dbm_to_mw":
        out = dbm_to_mw(value)
    elif direction == "mw_to_dbm":
        out = mw_to_dbm(value)
    else:
        raise ValidationError(f"unknown conversion direction {direction!r}")
    return float(out) if np.ndim(out) == 0 else out


def safe_dbm(mw, floor: float = POWER_FLOOR_DBM) -> np.ndarray:
    """dBm with non-positive powers mapped to ``floor``."""
    mw = np.asarray(mw, dtype=float)
    out = np.full(mw.shape, floor)
    pos = mw > 0
    out[pos] = np.maximum(10.0 * np.log10(mw[pos]), floor)
    return out


@dataclass(frozen=True, eq=False)
class SpectralProfile:
    """Piecewise-linear function of frequency, clamped outside its knots."""

    knots: tuple

    def __post_init__(self):
        knots = tuple((float(f), float(v)) for f, v in self.knots)
        if not knots:
            raise ValidationError("profile needs at least one knot")
        f = np.array([k[0] for k in knots])
        if np.any(np.diff(f) <= 0):
            raise ValidationError("profile knot frequencies must be strictly increasing")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "_f", _frozen(f))
        object.__setattr__(self, "_v", _frozen([k[1] for k in knots]))

    def __eq__(self, other):
        if not isinstance(other, SpectralProfile):
            return NotImplemented
        return self.knots == other.knots

    def __hash__(self):
        return hash(self.knots)

    @classmethod
    def constant(cls, value: float, at: float = 193.0) -> "SpectralProfile":
        return cls(((at, value),))

    @classmethod
    def from_arrays(cls, freqs: Sequence[float], values: Sequence[float]) -> "SpectralProfile":
        return cls(tuple(zip(freqs, values)))

    @property
    def frequencies(self) -> np.ndarray:
        return self._f

    @property
    def values(self) -> np.ndarray:
        return self._v

    def __call__(self, f):
        return eval_profile(self, f)

    def shifted(self, offset: float) -> "SpectralProfile":
        return SpectralProfile(tuple((f, v + offset) for f, v in self.knots))

    def to_dict(self) -> dict:
        return {"knots": [{"frequency": f, "value": v} for f, v in self.knots]}

    @classmethod
    def from_dict(cls, d: dict) -> "SpectralProfile":
        try:
            return cls(tuple((k["frequency"], k["value"]) for k in d["knots"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed profile document: {exc!r}") from exc


def eval_profile(profile: SpectralProfile, f):
    out = np.interp(f, profile.frequencies, profile.values)
    return float(out) if np.ndim(out) == 0 else out


def hat_basis(knot_freqs: Sequence[float], f) -> np.ndarray:
    """Matrix mapping knot values to profile values at ``f`` (rows: f, cols: knots)."""
    knot_freqs = np.asarray(knot_freqs, dtype=float)
    f = np.atleast_1d(np.asarray(f, dtype=float))
    eye = np.eye(knot_freqs.size)
    return np.stack([np.interp(f, knot_freqs, eye[k]) for k in range(knot_freqs.size)], axis=1)


@dataclass(frozen=True, eq=False)
class PowerSpectrum:
    """Per-channel signal and ASE power in mW, plus the active mask.

    ASE is referenced to each channel's symbol-rate bandwidth.
    """

    signal_power: np.ndarray
    ase_power: np.ndarray
    active: np.ndarray = field(default=None)

    def __post_init__(self):
        sig = np.array(self.signal_power, dtype=float)
        ase = np.array(self.ase_power, dtype=float)
        active = np.ones(sig.shape, bool) if self.active is None else np.array(self.active, dtype=bool)
        if sig.ndim != 1 or sig.shape != ase.shape or sig.shape != active.shape:
            raise ValidationError("signal, ASE and active arrays must be 1-D and equal length")
        if np.any(sig < 0) or np.any(ase < 0) or not (np.all(np.isfinite(sig)) and np.all(np.isfinite(ase))):
            raise ValidationError("powers must be finite and non-negative")
        if np.any(sig[~active] != 0):
            raise ValidationError("inactive channels must carry zero signal power")
        for name, arr in (("signal_power", sig), ("ase_power", ase), ("active", active)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.signal_power.size

    @classmethod
    def from_dbm(cls, dbm, active=None, ase_mw=None) -> "PowerSpectrum":
        p = np.asarray(dbm_to_mw(dbm), dtype=float).copy()
        if active is None:
            active = np.ones(p.shape, bool)
        active = np.asarray(active, bool)
        p[~active] = 0.0
        ase = np.zeros_like(p) if ase_mw is None else np.asarray(ase_mw, float)
        return cls(p, ase, active)

    @property
    def total_mw(self) -> np.ndarray:
        """Per-channel signal plus ASE."""
        return self.signal_power + self.ase_power

    def scaled(self, factor) -> "PowerSpectrum":
        """Multiply signal and ASE by a per-channel or scalar linear factor."""
        return PowerSpectrum(self.signal_power * factor, self.ase_power * factor, self.active)

    def with_mask(self, active) -> "PowerSpectrum":
        active = np.asarray(active, bool)
        return PowerSpectrum(np.where(active, self.signal_power, 0.0), np.where(active, self.ase_power, 0.0), active)

    def equals(self, other: "PowerSpectrum") -> bool:
        return (
            np.array_equal(self.signal_power, other.signal_power)
            and np.array_equal(self.ase_power, other.ase_power)
            and np.array_equal(self.active, other.active)
        )


def total_power(spectrum: PowerSpectrum, mask=None) -> float:
    """Total active power (signal + ASE) in dBm; -100 dBm when nothing is lit."""
    sel = spectrum.active if mask is None else spectrum.active & np.asarray(mask, bool)
    tot = float(np.sum(spectrum.total_mw[sel]))
    if tot <= 0:
        return POWER_FLOOR_DBM
    return max(10.0 * np.log10(tot), POWER_FLOOR_DBM)
