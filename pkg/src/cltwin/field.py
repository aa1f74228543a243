"""Synthetic stand-in for the deployed link.

The same physics engine runs on hidden, perturbed parameters. Callers see
only noisy telemetry, and may send configuration commands and disruptive
events.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field as dc_field
from typing import Optional, Union

import numpy as np

from .amplifier import EdfaConfig, knot_frequencies
from .exceptions import ValidationError
from .fiber import DEFAULT_STEP_KM
from .link import LinkTopology, PropagationTrace, commission, propagate_link
from .qot import HullError, TransponderCurve, default_curve, osnr_ref
from .spectral import SpectralProfile, safe_dbm, total_power

RECEIVER = "rx"
KINDS = ("totals", "ocm", "osnr", "rx_ber")
FIELD_SCHEMA_VERSION = 1
DO_NOT_READ = "DO-NOT-READ: hidden ground truth for test harnesses; calibration code must not open this file"


@dataclass(frozen=True)
class PerturbationSpec:
    """How far the hidden truth may stray from the datasheet replica.

    ``connector_range`` is absolute (dB per connector) or None to keep the
    replica values; the other ranges are relative to the replica.
    """

    connector_range: Optional[tuple] = (0.3, 2.5)
    ripple_amplitude: float = 0.8
    cr_scale_range: tuple = (0.8, 1.2)
    nf_offset_range: tuple = (-0.5, 1.0)
    ripple_knots: int = 5

    def __post_init__(self):
        for name in ("connector_range", "cr_scale_range", "nf_offset_range"):
            r = getattr(self, name)
            if r is None and name == "connector_range":
                continue
            try:
                lo, hi = (float(x) for x in r)
            except (TypeError, ValueError):
                raise ValidationError(f"perturbation {name} must be a (low, high) pair") from None
            if lo > hi:
                raise ValidationError(f"perturbation {name} has low > high")
            object.__setattr__(self, name, (lo, hi))
        if self.connector_range is not None and self.connector_range[0] < 0:
            raise ValidationError("connector losses cannot be negative")
        if self.cr_scale_range[0] < 0:
            raise ValidationError("Raman slope scale cannot be negative")
        if self.ripple_amplitude < 0:
            raise ValidationError("ripple amplitude must be non-negative")
        if self.ripple_knots < 1:
            raise ValidationError("ripple needs at least one knot")

    @classmethod
    def zero(cls) -> "PerturbationSpec":
        return cls(None, 0.0, (1.0, 1.0), (0.0, 0.0))

    @property
    def is_zero(self) -> bool:
        return self == PerturbationSpec.zero()

    def to_dict(self):
        return {
            "connector_range": None if self.connector_range is None else list(self.connector_range),
            "ripple_amplitude": self.ripple_amplitude,
            "cr_scale_range": list(self.cr_scale_range),
            "nf_offset_range": list(self.nf_offset_range),
            "ripple_knots": self.ripple_knots,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            cr = d["connector_range"]
            return cls(
                None if cr is None else tuple(cr),
                float(d["ripple_amplitude"]),
                tuple(d["cr_scale_range"]),
                tuple(d["nf_offset_range"]),
                int(d.get("ripple_knots", 5)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed perturbation spec: {exc!r}") from exc


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian telemetry noise, dB-domain standard deviations."""

    ocm_sigma: float = 0.1
    total_sigma: float = 0.05
    osnr_sigma: float = 0.3

    def __post_init__(self):
        if min(self.ocm_sigma, self.total_sigma, self.osnr_sigma) < 0:
            raise ValidationError("noise sigmas must be non-negative")

    @classmethod
    def none(cls) -> "NoiseSpec":
        return cls(0.0, 0.0, 0.0)

    def to_dict(self):
        return {"ocm_sigma": self.ocm_sigma, "total_sigma": self.total_sigma, "osnr_sigma": self.osnr_sigma}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["ocm_sigma"]), float(d["total_sigma"]), float(d["osnr_sigma"]))


@dataclass(frozen=True)
class FiberCut:
    band: str
    end: str
    n_channels: int
    kind: str = dc_field(default="fiber_cut", init=False)


@dataclass(frozen=True)
class SetConfig:
    site: str
    band: str
    config: EdfaConfig
    kind: str = dc_field(default="set_config", init=False)


@dataclass(frozen=True)
class SetLoading:
    active: tuple
    kind: str = dc_field(default="set_loading", init=False)

    def __post_init__(self):
        object.__setattr__(self, "active", tuple(bool(x) for x in self.active))


FieldEvent = Union[FiberCut, SetConfig, SetLoading]


def event_to_dict(ev: FieldEvent) -> dict:
    if isinstance(ev, FiberCut):
        return {"kind": ev.kind, "band": ev.band, "end": ev.end, "n_channels": ev.n_channels}
    if isinstance(ev, SetConfig):
        return {"kind": ev.kind, "site": ev.site, "band": ev.band, "config": ev.config.to_dict()}
    if isinstance(ev, SetLoading):
        return {"kind": ev.kind, "active": list(ev.active)}
    raise ValidationError(f"not a field event: {ev!r}")


def event_from_dict(d: dict) -> FieldEvent:
    kind = d.get("kind")
    try:
        if kind == "fiber_cut":
            return FiberCut(d["band"], d["end"], int(d["n_channels"]))
        if kind == "set_config":
            return SetConfig(d["site"], d["band"], EdfaConfig.from_dict(d["config"]))
        if kind == "set_loading":
            return SetLoading(tuple(d["active"]))
    except KeyError as exc:
        raise ValidationError(f"event missing field {exc}") from exc
    raise ValidationError(f"unknown event kind {kind!r}")


@dataclass(frozen=True)
class TelemetrySnapshot:
    site: str
    kind: str
    sequence_number: int
    values: dict

    def to_dict(self):
        return {"site": self.site, "kind": self.kind, "sequence_number": self.sequence_number, "values": self.values}

    @classmethod
    def from_dict(cls, d):
        return cls(d["site"], d["kind"], int(d["sequence_number"]), d["values"])

    def array(self, key) -> np.ndarray:
        """Per-channel list as a float array (None becomes NaN)."""
        return np.array([np.nan if v is None else v for v in self.values[key]], dtype=float)


class GroundTruth:
    """Hidden field link. Single owner: events and queries are serialized."""

    def __init__(
        self,
        truth: LinkTopology,
        noise: NoiseSpec | None = None,
        seed: int = 0,
        curve: TransponderCurve | None = None,
        active=None,
        step: float = DEFAULT_STEP_KM,
    ):
        self.truth = truth
        self.noise = NoiseSpec() if noise is None else noise
        self.seed = int(seed)
        self.curve = default_curve() if curve is None else curve
        self.step = step
        self.active = np.ones(len(truth.grid), bool) if active is None else np.array(active, bool)
        self.event_log: list = []
        self.telemetry: list = []
        self.sequence_number = 0
        # noise stream is separate from the stream that drew the hidden parameters
        self.rng = np.random.default_rng([self.seed, 1])
        self._trace: PropagationTrace | None = None

    # -- state the network management system exposes without measurement --

    @property
    def grid(self):
        return self.truth.grid

    def device_configs(self) -> dict:
        return self.truth.configs()

    def loading(self) -> np.ndarray:
        return self.active.copy()

    def site_names(self) -> list:
        return [a.name for a in self.truth.sites]

    # -- simulation --

    def trace(self) -> PropagationTrace:
        if self._trace is None:
            self._trace = propagate_link(self.truth, self.truth.launch_spectrum(self.active), self.step)
        return self._trace

    def _noisy(self, values, sigma):
        v = np.asarray(values, dtype=float)
        if sigma > 0:
            v = v + self.rng.normal(0.0, sigma, size=v.shape)
        return v

    def query(self, kind: str, site: str) -> TelemetrySnapshot:
        if kind not in KINDS:
            raise ValidationError(f"unknown telemetry kind {kind!r}")
        tr = self.trace()
        grid = self.grid
        if site == RECEIVER:
            if kind == "osnr":
                rx = tr.receiver
                osnr = self._noisy(np.nan_to_num(rx.osnr), self.noise.osnr_sigma)
                values = {"osnr_db": [float(x) if a else None for x, a in zip(osnr, self.active)]}
            elif kind == "rx_ber":
                values = {"ber": self._rx_ber(tr)}
            else:
                raise ValidationError(f"receiver does not report {kind!r}")
        else:
            k = self.truth.site_index(site)
            amp = self.truth.sites[k]
            rec = tr.elements[k]
            if kind == "totals":
                vals = []
                for spec in (rec.amp_in, rec.amp_out):
                    vals.append([total_power(spec, grid.band_mask(b)) for b in ("C", "L")])
                noisy = self._noisy(vals, self.noise.total_sigma)
                values = {
                    "in_dbm": {"C": float(noisy[0, 0]), "L": float(noisy[0, 1])},
                    "out_dbm": {"C": float(noisy[1, 0]), "L": float(noisy[1, 1])},
                }
            elif kind == "ocm":
                if not amp.has_ocm:
                    raise ValidationError(f"site {site} has no optical channel monitor")
                values = {}
                for key, spec in (("in_dbm", rec.amp_in), ("out_dbm", rec.amp_out)):
                    p = self._noisy(safe_dbm(spec.total_mw), self.noise.ocm_sigma)
                    values[key] = [float(x) if a else float(safe_dbm(0.0)) for x, a in zip(p, self.active)]
            elif kind == "osnr":
                if not amp.has_osnr_monitor:
                    raise ValidationError(f"site {site} has no OSNR monitor")
                out = rec.amp_out
                o = np.full(len(grid), np.nan)
                lit = self.active & (out.signal_power > 0)
                o[lit] = osnr_ref(out.signal_power[lit], out.ase_power[lit], grid.symbol_rates[lit])
                o = self._noisy(np.nan_to_num(o), self.noise.osnr_sigma)
                values = {"osnr_db": [float(x) if a else None for x, a in zip(o, lit)]}
            else:
                raise ValidationError(f"site {site} does not report {kind!r}")
        self.sequence_number += 1
        snap = TelemetrySnapshot(site, kind, self.sequence_number, values)
        self.telemetry.append(snap)
        return snap

    def _rx_ber(self, tr) -> dict:
        out = {}
        lo, hi = self.curve.snr_hull
        cut = self.grid.role_mask("CUT") & self.active
        for i in np.flatnonzero(cut):
            s = float(tr.receiver.gsnr[i])
            try:
                out[repr(float(self.grid.frequencies[i]))] = self.curve.snr_to_ber(s)
            except HullError:
                out[repr(float(self.grid.frequencies[i]))] = self.curve.snr_to_ber(min(max(s, lo), hi))
        return out

    def apply_event(self, event: FieldEvent) -> dict:
        grid = self.grid
        if isinstance(event, FiberCut):
            if event.band not in grid.bands:
                raise ValidationError(f"unknown band {event.band!r}")
            if event.end not in ("low_freq", "high_freq"):
                raise ValidationError(f"fiber cut end must be low_freq or high_freq, got {event.end!r}")
            idx = np.flatnonzero(grid.band_mask(event.band) & self.active)
            if not 0 <= event.n_channels <= idx.size:
                raise ValidationError(
                    f"cannot drop {event.n_channels} channels: {idx.size} active in {event.band} band"
                )
            drop = idx[: event.n_channels] if event.end == "low_freq" else idx[idx.size - event.n_channels:]
            active = self.active.copy()
            active[drop] = False
            self.active = active
        elif isinstance(event, SetConfig):
            k = self.truth.site_index(event.site)
            if event.band not in ("C", "L"):
                raise ValidationError(f"unknown band {event.band!r}")
            self.truth = self.truth.with_site(k, self.truth.sites[k].with_config(event.band, event.config))
        elif isinstance(event, SetLoading):
            if len(event.active) != len(grid):
                raise ValidationError("loading mask length does not match the grid")
            self.active = np.array(event.active, bool)
        else:
            raise ValidationError(f"not a field event: {event!r}")
        self._trace = None
        self.event_log.append(event)
        return {"accepted": True, "event": event_to_dict(event), "index": len(self.event_log) - 1}

    def copy(self) -> "GroundTruth":
        return copy.deepcopy(self)


def make_field(
    replica: LinkTopology,
    perturbation: PerturbationSpec | None = None,
    seed: int = 0,
    noise: NoiseSpec | None = None,
    recommission: bool = True,
    curve: TransponderCurve | None = None,
    step: float = DEFAULT_STEP_KM,
) -> GroundTruth:
    """Sample a hidden truth around ``replica``.

    With ``recommission`` the field's amplifiers are re-commissioned against
    the sampled losses, as an operator would at turn-up. A zero perturbation
    spec leaves the replica untouched.
    """
    if perturbation is None:
        perturbation = PerturbationSpec()
    if not isinstance(perturbation, PerturbationSpec):
        raise ValidationError(f"perturbation must be a PerturbationSpec, got {type(perturbation).__name__}")
    if perturbation.is_zero:
        return GroundTruth(replica, noise, seed, curve, step=step)

    rng = np.random.default_rng([int(seed), 0])
    truth = replica
    for k, (span, site) in enumerate(replica.elements):
        changes = {}
        if perturbation.connector_range is not None:
            lo, hi = perturbation.connector_range
            changes["connector_in"] = float(rng.uniform(lo, hi))
            changes["connector_out"] = float(rng.uniform(lo, hi))
        changes["raman_slope"] = span.raman_slope * float(rng.uniform(*perturbation.cr_scale_range))
        truth = truth.with_span(k, span.evolve(**changes))
        for band in ("C", "L"):
            model = site.model(band)
            kf = knot_frequencies(model.band_lo, model.band_hi, perturbation.ripple_knots)
            amp = perturbation.ripple_amplitude
            r = rng.uniform(-amp, amp, kf.size)
            r = np.clip(r - r.mean(), -amp, amp)
            ripple = SpectralProfile.from_arrays(kf, r)
            nf0 = model.nf0.shifted(float(rng.uniform(*perturbation.nf_offset_range)))
            site = site.with_model(band, model.evolve(ripple=ripple, nf0=nf0))
        truth = truth.with_site(k, site)
    if recommission:
        truth = commission(truth)
    return GroundTruth(truth, noise, seed, curve, step=step)


def query(field: GroundTruth, kind: str, site: str) -> TelemetrySnapshot:
    """Read one telemetry snapshot from ``field``."""
    return field.query(kind, site)


def apply_event(field: GroundTruth, event: FieldEvent) -> dict:
    """Apply ``event`` to ``field`` and return its acknowledgement."""
    return field.apply_event(event)
