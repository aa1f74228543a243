"""Point-to-point link: spans, amplifier sites and a ROADM, propagated end to end."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .amplifier import EdfaConfig, EdfaModel, amplify, flat_model
from .exceptions import ValidationError
from .fiber import DEFAULT_STEP_KM, FiberSpan, propagate_span
from .qot import HullError, NliResult, TransponderCurve, gsnr, nli_span, osnr_ref
from .spectral import ChannelGrid, PowerSpectrum, replica_grid, safe_dbm

SCHEMA_VERSION = 1

#: One 86.4 km span plus five equal spans, 469.3 km in total.
REPLICA_SPAN_LENGTHS = (86.4, 76.58, 76.58, 76.58, 76.58, 76.58)
REPLICA_ROADM_SITE = 1
REPLICA_ROADM_LOSS = 14.0
NOMINAL_NF = {"C": 5.0, "L": 5.5}


@dataclass(frozen=True)
class AmpSite:
    name: str
    c_model: EdfaModel
    l_model: EdfaModel
    c_config: EdfaConfig
    l_config: EdfaConfig
    has_ocm: bool = True
    has_osnr_monitor: bool = True

    def __post_init__(self):
        if self.c_model.band != "C" or self.l_model.band != "L":
            raise ValidationError(f"site {self.name}: band models must be C and L")
        lo = sorted([(self.c_model.band_lo, self.c_model.band_hi), (self.l_model.band_lo, self.l_model.band_hi)])
        if lo[0][1] >= lo[1][0]:
            raise ValidationError(f"site {self.name}: C and L amplifier bands overlap")

    def model(self, band: str) -> EdfaModel:
        return {"C": self.c_model, "L": self.l_model}[band]

    def config(self, band: str) -> EdfaConfig:
        return {"C": self.c_config, "L": self.l_config}[band]

    def with_config(self, band: str, config: EdfaConfig) -> "AmpSite":
        self.model(band).check_config(config)
        return replace(self, **{f"{band.lower()}_config": config})

    def with_model(self, band: str, model: EdfaModel) -> "AmpSite":
        return replace(self, **{f"{band.lower()}_model": model})

    def to_dict(self):
        return {
            "name": self.name,
            "c_model": self.c_model.to_dict(),
            "l_model": self.l_model.to_dict(),
            "c_config": self.c_config.to_dict(),
            "l_config": self.l_config.to_dict(),
            "has_ocm": self.has_ocm,
            "has_osnr_monitor": self.has_osnr_monitor,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["name"],
            EdfaModel.from_dict(d["c_model"]),
            EdfaModel.from_dict(d["l_model"]),
            EdfaConfig.from_dict(d["c_config"]),
            EdfaConfig.from_dict(d["l_config"]),
            bool(d["has_ocm"]),
            bool(d["has_osnr_monitor"]),
        )


@dataclass(frozen=True)
class LinkTopology:
    launch_power: tuple
    elements: tuple
    grid: ChannelGrid
    roadm_site_index: Optional[int] = None
    roadm_loss: float = REPLICA_ROADM_LOSS

    def __post_init__(self):
        object.__setattr__(self, "launch_power", tuple(float(x) for x in self.launch_power))
        object.__setattr__(self, "elements", tuple((s, a) for s, a in self.elements))
        if not self.elements:
            raise ValidationError("topology needs at least one span/amplifier element")
        if len(self.launch_power) != len(self.grid):
            raise ValidationError("launch power must give one value per grid channel")
        if self.roadm_site_index is not None and not 0 <= self.roadm_site_index < len(self.elements):
            raise ValidationError(f"ROADM site index {self.roadm_site_index} out of range")
        if self.roadm_loss < 0:
            raise ValidationError("ROADM loss must be non-negative")
        names = [a.name for _, a in self.elements]
        if len(set(names)) != len(names):
            raise ValidationError("amplifier site names must be unique")
        f = self.grid.frequencies
        for _, site in self.elements:
            covered = site.c_model.in_band(f) | site.l_model.in_band(f)
            if not covered.all():
                raise ValidationError(f"site {site.name}: amplifier bands do not cover the grid")

    @property
    def spans(self) -> tuple:
        return tuple(s for s, _ in self.elements)

    @property
    def sites(self) -> tuple:
        return tuple(a for _, a in self.elements)

    def site_index(self, name: str) -> int:
        for k, (_, a) in enumerate(self.elements):
            if a.name == name:
                return k
        raise ValidationError(f"unknown site {name!r}")

    def launch_spectrum(self, active=None) -> PowerSpectrum:
        return PowerSpectrum.from_dbm(np.array(self.launch_power), active)

    def with_span(self, k: int, span: FiberSpan) -> "LinkTopology":
        els = list(self.elements)
        els[k] = (span, els[k][1])
        return replace(self, elements=tuple(els))

    def with_site(self, k: int, site: AmpSite) -> "LinkTopology":
        els = list(self.elements)
        els[k] = (els[k][0], site)
        return replace(self, elements=tuple(els))

    def with_configs(self, configs) -> "LinkTopology":
        """Replace amplifier configs from a ``{(site_index, band): EdfaConfig}`` map."""
        topo = self
        for (k, band), cfg in configs.items():
            topo = topo.with_site(k, topo.sites[k].with_config(band, cfg))
        return topo

    def configs(self) -> dict:
        return {(k, b): a.config(b) for k, a in enumerate(self.sites) for b in ("C", "L")}

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "grid": self.grid.to_dict(),
            "launch_power": list(self.launch_power),
            "roadm_site_index": self.roadm_site_index,
            "roadm_loss": self.roadm_loss,
            "elements": [{"span": s.to_dict(), "site": a.to_dict()} for s, a in self.elements],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported topology schema_version {d.get('schema_version')!r}")
        try:
            return cls(
                tuple(d["launch_power"]),
                tuple((FiberSpan.from_dict(e["span"]), AmpSite.from_dict(e["site"])) for e in d["elements"]),
                ChannelGrid.from_dict(d["grid"]),
                d["roadm_site_index"],
                float(d["roadm_loss"]),
            )
        except KeyError as exc:
            raise ValidationError(f"topology document missing field {exc}") from exc


@dataclass(frozen=True, eq=False)
class ElementTrace:
    span_in: PowerSpectrum
    span_out: PowerSpectrum
    amp_in: PowerSpectrum
    amp_out: PowerSpectrum
    nli: NliResult
    flags: tuple = ()


@dataclass(frozen=True, eq=False)
class ReceiverState:
    p_sig: np.ndarray
    p_ase: np.ndarray
    p_nli: np.ndarray
    gsnr: np.ndarray
    osnr: np.ndarray


@dataclass(frozen=True, eq=False)
class PropagationTrace:
    elements: tuple
    receiver: ReceiverState
    grid: ChannelGrid
    launch: PowerSpectrum

    @property
    def active(self) -> np.ndarray:
        return self.launch.active

    def downstream_gain(self, k: int) -> np.ndarray:
        """Net linear signal gain from span ``k``'s post-connector input to the receiver."""
        p0 = self.elements[k].span_in.signal_power
        out = np.zeros_like(p0)
        lit = p0 > 0
        out[lit] = self.receiver.p_sig[lit] / p0[lit]
        return out


def propagate_link(topology: LinkTopology, launch: PowerSpectrum, step: float = DEFAULT_STEP_KM) -> PropagationTrace:
    """Propagate ``launch`` through every element and account NLI at the receiver.

    Per element: connector-in, NLI on the launched comb, fiber with SRS,
    connector-out, ROADM loss at the ROADM site, then both band amplifiers.
    """
    grid = topology.grid
    if len(launch) != len(grid):
        raise ValidationError(f"launch has {len(launch)} channels, grid has {len(grid)}")
    records = []
    cur = launch
    for k, (span, site) in enumerate(topology.elements):
        try:
            launched = cur.scaled(10.0 ** (-span.connector_in / 10.0))
            nli = nli_span(launched, span, grid)
            res = propagate_span(cur, span, grid, step)
            amp_in = res.output
            if topology.roadm_site_index == k:
                amp_in = amp_in.scaled(10.0 ** (-topology.roadm_loss / 10.0))
            out = amplify(amp_in, site.c_model, site.c_config, grid)
            out = amplify(out, site.l_model, site.l_config, grid)
        except ValidationError as exc:
            raise ValidationError(f"element {k} ({site.name}): {exc}") from exc
        flags = tuple(n for n, on in (("step_too_large", res.step_too_large), ("clamped", res.clamped)) if on)
        records.append(ElementTrace(launched, res.output, amp_in, out, nli, flags))
        cur = out

    act = launch.active
    p_sig = cur.signal_power
    p_ase = cur.ase_power
    p_nli = np.zeros(len(grid))
    for rec in records:
        p0 = rec.span_in.signal_power
        lit = p0 > 0
        p_nli[lit] += rec.nli.power[lit] * (p_sig[lit] / p0[lit])
    g = np.full(len(grid), np.nan)
    o = np.full(len(grid), np.nan)
    ok = act & (p_sig > 0) & (p_ase + p_nli > 0)
    if ok.any():
        g[ok] = gsnr(p_sig[ok], p_ase[ok], p_nli[ok])
        o[ok] = osnr_ref(p_sig[ok], p_ase[ok], grid.symbol_rates[ok])
    return PropagationTrace(tuple(records), ReceiverState(p_sig, p_ase, p_nli, g, o), grid, launch)


@dataclass(frozen=True, eq=False)
class ReceiverReport:
    frequency: np.ndarray
    active: np.ndarray
    is_cut: np.ndarray
    power_dbm: np.ndarray
    osnr_db: np.ndarray
    gsnr_db: np.ndarray
    ber: np.ndarray
    ber_clamped: np.ndarray

    def __len__(self):
        return self.frequency.size


def receiver_metrics(trace: PropagationTrace, curve: TransponderCurve) -> ReceiverReport:
    """Per-channel received power, OSNR (12.5 GHz), GSNR and CUT BER."""
    grid = trace.grid
    rx = trace.receiver
    act = trace.active
    power = np.full(len(grid), np.nan)
    power[act] = safe_dbm(rx.p_sig[act] + rx.p_ase[act])
    cut = grid.role_mask("CUT")
    ber = np.full(len(grid), np.nan)
    clamped = np.zeros(len(grid), bool)
    lo, hi = curve.snr_hull
    for i in np.flatnonzero(cut & act & np.isfinite(rx.gsnr)):
        s = float(rx.gsnr[i])
        try:
            ber[i] = curve.snr_to_ber(s)
        except HullError:
            ber[i] = curve.snr_to_ber(min(max(s, lo), hi))
            clamped[i] = True
    return ReceiverReport(grid.frequencies.copy(), act.copy(), cut, power, rx.osnr.copy(), rx.gsnr.copy(), ber, clamped)


def commission(topology: LinkTopology, step: float = 0.5, active=None) -> LinkTopology:
    """Set every amplifier so its output band power and flatness match the launch.

    Gain per band restores the band-mean dB level, tilt cancels the in-band
    linear slope; both are clipped to the model ranges and rounded to 0.01 dB.
    """
    grid = topology.grid
    f = grid.frequencies
    target = np.array(topology.launch_power)
    cur = topology.launch_spectrum(active)
    topo = topology
    for k, (span, site) in enumerate(topo.elements):
        res = propagate_span(cur, span, grid, step)
        amp_in = res.output
        if topo.roadm_site_index == k:
            amp_in = amp_in.scaled(10.0 ** (-topo.roadm_loss / 10.0))
        lit = amp_in.active
        deficit = target - safe_dbm(amp_in.total_mw)
        for band in ("C", "L"):
            model = site.model(band)
            sel = model.in_band(f) & lit
            if not sel.any():
                continue
            x = (f[sel] - model.center) / (model.band_hi - model.band_lo)
            slope, intercept = np.polyfit(x, deficit[sel], 1) if sel.sum() > 1 else (0.0, deficit[sel][0])
            gain = float(np.clip(round(float(intercept), 2), *model.gain_range))
            tilt = float(np.clip(round(float(slope), 2), *model.tilt_range))
            site = site.with_config(band, EdfaConfig(gain, tilt))
        topo = topo.with_site(k, site)
        out = amplify(amp_in, site.c_model, site.c_config, grid)
        cur = amplify(out, site.l_model, site.l_config, grid)
    return topo


def with_design_gains(topology: LinkTopology) -> LinkTopology:
    """Pin each EDFA's design gain to its current set-point."""
    topo = topology
    for k, site in enumerate(topology.sites):
        for band in ("C", "L"):
            m = site.model(band).evolve(design_gain=site.config(band).gain_target)
            site = site.with_model(band, m)
        topo = topo.with_site(k, site)
    return topo


def replica_topology(
    launch_dbm: float = 0.0,
    grid: ChannelGrid | None = None,
    span_lengths=REPLICA_SPAN_LENGTHS,
    connector_loss: float = 0.5,
    roadm_site_index: Optional[int] = REPLICA_ROADM_SITE,
    roadm_loss: float = REPLICA_ROADM_LOSS,
    nf: dict | None = None,
) -> LinkTopology:
    """Datasheet-level model of the six-span C+L field link, commissioned flat."""
    grid = replica_grid() if grid is None else grid
    nf = dict(NOMINAL_NF, **(nf or {}))
    c_lo, c_hi = grid.band_hull("C")
    l_lo, l_hi = grid.band_hull("L")
    elements = []
    for k, length in enumerate(span_lengths):
        span = FiberSpan(float(length), connector_in=connector_loss, connector_out=connector_loss)
        site = AmpSite(
            f"amp{k + 1}",
            flat_model("C", c_lo, c_hi, nf["C"], design_gain=20.0),
            flat_model("L", l_lo, l_hi, nf["L"], design_gain=20.0),
            EdfaConfig(20.0, 0.0),
            EdfaConfig(20.0, 0.0),
        )
        elements.append((span, site))
    topo = LinkTopology(
        tuple([float(launch_dbm)] * len(grid)), tuple(elements), grid, roadm_site_index, roadm_loss
    )
    return with_design_gains(commission(topo))
