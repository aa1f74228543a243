"""Stage-wise calibration of the twin against field telemetry.

Stage 1 builds the twin from datasheet values. Stage 2 splits measured
excess span loss over the two connectors. Stage 3 fits connectors, Raman
strength and EDFA ripple to per-channel powers. Stage 4 extracts noise
figures from OSNR. Stage 5 re-checks GSNR under other loadings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.constants import h as PLANCK
from scipy.optimize import brentq

from .amplifier import NF_FLOOR_DB, EdfaModel, amplify, effective_nf, knot_frequencies
from .exceptions import NotCalibratedError, ValidationError
from .fiber import DEFAULT_STEP_KM, propagate_span
from .field import RECEIVER, GroundTruth, SetLoading, TelemetrySnapshot
from .link import LinkTopology, PropagationTrace, propagate_link
from .lm import levenberg_marquardt
from .qot import OSNR_REF_BANDWIDTH, HullError, TransponderCurve, osnr_ref
from .spectral import PowerSpectrum, SpectralProfile, hat_basis, safe_dbm, total_power

log = logging.getLogger(__name__)

TWIN_SCHEMA_VERSION = 1
STAGE_TAGS = ("datasheet", "stage2", "stage3", "stage4")
SUSPECT_EXCESS_DB = -0.3
CONNECTOR_BOUNDS = (0.0, 6.0)
CR_SCALE_BOUNDS = (0.5, 1.5)
RIPPLE_BOUNDS = (-2.0, 2.0)
RIPPLE_KNOTS = 5
NF_KNOTS = 5
VERIFY_GSNR_THRESHOLD = 0.5
ATTRIBUTION_TIE = 0.10
DARK_DBM = -60.0


def calibratable_parameters(topology: LinkTopology) -> list:
    keys = []
    for k in range(len(topology.elements)):
        keys += [f"span{k}.connector_in", f"span{k}.connector_out", f"span{k}.raman_slope", f"span{k}.attenuation"]
        for b in ("C", "L"):
            keys += [f"site{k}.{b}.ripple", f"site{k}.{b}.nf0"]
    return keys


@dataclass(frozen=True)
class TwinState:
    """Twin estimate plus where each parameter came from."""

    estimate: LinkTopology
    datasheet: LinkTopology
    curve: TransponderCurve
    loading: tuple
    provenance: dict
    residuals: dict = field(default_factory=dict)
    stage_completed: int = 1
    flags: tuple = ()
    step: float = DEFAULT_STEP_KM

    def __post_init__(self):
        object.__setattr__(self, "loading", tuple(bool(x) for x in self.loading))
        if len(self.loading) != len(self.estimate.grid):
            raise ValidationError("twin loading mask does not match the grid")
        missing = set(calibratable_parameters(self.estimate)) - set(self.provenance)
        if missing:
            raise ValidationError(f"provenance misses {sorted(missing)[:3]}...")
        if not 1 <= self.stage_completed <= 5:
            raise ValidationError("stage_completed must be within 1..5")

    def evolve(self, **changes) -> "TwinState":
        return replace(self, **changes)

    @property
    def active(self) -> np.ndarray:
        return np.array(self.loading, bool)

    def with_status(self, configs: Optional[Mapping] = None, loading=None) -> "TwinState":
        """Sync known network status (amplifier configs, channel loading)."""
        est = self.estimate if configs is None else self.estimate.with_configs(configs)
        load = self.loading if loading is None else tuple(bool(x) for x in loading)
        return replace(self, estimate=est, loading=load)

    def predict(self, loading=None, configs=None) -> PropagationTrace:
        topo = self.estimate if configs is None else self.estimate.with_configs(configs)
        act = self.active if loading is None else np.asarray(loading, bool)
        return propagate_link(topo, topo.launch_spectrum(act), self.step)


def _retag(prov: dict, keys, tag) -> dict:
    out = dict(prov)
    for k in keys:
        out[k] = tag
    return out


def stage1_baseline(
    datasheet: LinkTopology,
    curve: Optional[TransponderCurve],
    loading=None,
    step: float = DEFAULT_STEP_KM,
) -> TwinState:
    """Twin built only from datasheet values and known network status."""
    if curve is None:
        raise ValidationError("a back-to-back transponder curve is required to translate BER to GSNR")
    if not isinstance(datasheet, LinkTopology):
        raise ValidationError("datasheet must be a LinkTopology")
    load = np.ones(len(datasheet.grid), bool) if loading is None else np.asarray(loading, bool)
    prov = {k: "datasheet" for k in calibratable_parameters(datasheet)}
    return TwinState(datasheet, datasheet, curve, tuple(load), prov, {}, 1, (), step)


# ---------------------------------------------------------------- stage 2


def split_connector_loss(measured_loss: float, alpha: float, length: float, roadm_loss: float = 0.0):
    """Equal split of excess span loss; returns ``(c_in, c_out, suspect)``."""
    excess = measured_loss - alpha * length - roadm_loss
    suspect = excess < SUSPECT_EXCESS_DB
    half = max(excess, 0.0) / 2.0
    return half, half, suspect


def _band_totals(twin: TwinState, spectrum, band) -> float:
    return total_power(spectrum, twin.estimate.grid.band_mask(band))


def _scale_bands(spec, grid, targets_dbm: dict):
    """Rescale each band of ``spec`` so its total matches ``targets_dbm``."""
    factor = np.ones(len(grid))
    for b, target in targets_dbm.items():
        sel = grid.band_mask(b)
        have = spec.total_mw[sel].sum()
        if have > 0:
            factor[sel] = 10.0 ** (target / 10.0) / have
    return PowerSpectrum(spec.signal_power * factor, spec.ase_power * factor, spec.active)


def stage2_totals(
    twin: TwinState, snapshots: Mapping[str, TelemetrySnapshot], refine: int = 3
) -> TwinState:
    """Connector losses from total power at each amplifier's input and output.

    Per span and band the measured loss is upstream total-out minus
    downstream total-in. The fiber share is the twin's own span loss with
    connectors removed (attenuation plus Raman transfer); the remaining
    excess, averaged over bands, is split equally between the connectors.
    """
    topo = twin.estimate
    grid = topo.grid
    act = twin.active
    for site in topo.sites:
        snap = snapshots.get(site.name)
        if snap is None or snap.kind != "totals":
            raise ValidationError(f"stage 2 needs a totals snapshot for site {site.name}")
    bands = [b for b in grid.bands if (grid.band_mask(b) & act).any()]
    flags = list(twin.flags)
    new = topo
    launch = topo.launch_spectrum(act)
    for k, (span, site) in enumerate(topo.elements):
        down = snapshots[site.name].values["in_dbm"]
        if k == 0:
            entry = launch
        else:
            up_out = snapshots[topo.sites[k - 1].name].values["out_dbm"]
            prev = _forward(new, launch, twin.step)[k - 1][2]
            entry = _scale_bands(prev, grid, {b: up_out[b] for b in bands})
        roadm = topo.roadm_loss if topo.roadm_site_index == k else 0.0
        c = span.connector_in
        for _ in range(refine):
            trial = span.evolve(connector_in=c, connector_out=c)
            out = propagate_span(entry, trial, grid, twin.step).output
            excesses = []
            for b in bands:
                sel = grid.band_mask(b)
                up = total_power(entry, sel)
                fiber = up - total_power(out, sel) - 2.0 * c
                excesses.append((up - down[b]) - fiber - roadm)
            excess = float(np.mean(excesses))
            c = max(excess, 0.0) / 2.0
        if excess < SUSPECT_EXCESS_DB:
            flags.append(f"span{k}: measured loss below attenuation estimate by {-excess:.2f} dB")
            log.warning("span %d measured loss below datasheet attenuation (%.2f dB)", k, excess)
        new = new.with_span(k, span.evolve(connector_in=c, connector_out=c))
    keys = [f"span{k}.{c}" for k in range(len(topo.elements)) for c in ("connector_in", "connector_out")]
    out = twin.evolve(estimate=new, provenance=_retag(twin.provenance, keys, "stage2"), flags=tuple(flags))
    resid = []
    tr = out.predict()
    for k, site in enumerate(topo.sites):
        for key, spec in (("in_dbm", tr.elements[k].amp_in), ("out_dbm", tr.elements[k].amp_out)):
            for b in bands:
                resid.append(_band_totals(out, spec, b) - snapshots[site.name].values[key][b])
    residuals = dict(twin.residuals)
    residuals["stage2"] = {"power_rms": float(np.sqrt(np.mean(np.square(resid)))), "gsnr_rms": None}
    return out.evolve(residuals=residuals, stage_completed=max(twin.stage_completed, 2))


# ---------------------------------------------------------------- stage 3


def _forward(topo: LinkTopology, entry, step, start=0, at_amp=False):
    """Per-element (span input, amp input, amp output) from element ``start``.

    ``entry`` is the comb entering span ``start`` or, with ``at_amp``, the
    amplifier input of element ``start``.
    """
    grid = topo.grid
    states = []
    cur = entry
    for k in range(start, len(topo.elements)):
        span, site = topo.elements[k]
        if at_amp and k == start:
            span_in, amp_in = None, cur
        else:
            span_in = cur
            amp_in = propagate_span(cur, span, grid, step).output
            if topo.roadm_site_index == k:
                amp_in = amp_in.scaled(10.0 ** (-topo.roadm_loss / 10.0))
        out = amplify(amp_in, site.c_model, site.c_config, grid)
        out = amplify(out, site.l_model, site.l_config, grid)
        states.append((span_in, amp_in, out))
        cur = out
    return states


class _Stage3Problem:
    def __init__(self, twin: TwinState, measured: dict):
        self.twin = twin
        self.topo = twin.estimate
        self.grid = self.topo.grid
        self.act = twin.active
        self.launch = self.topo.launch_spectrum(self.act)
        self.measured = measured
        self.ocm_sites = sorted(measured)
        ds = twin.datasheet
        x0, lo, hi, index = [], [], [], []
        for k, span in enumerate(self.topo.spans):
            cr_nom = ds.spans[k].raman_slope
            for name, val, b in (
                ("connector_in", span.connector_in, CONNECTOR_BOUNDS),
                ("connector_out", span.connector_out, CONNECTOR_BOUNDS),
                ("raman_slope", span.raman_slope, (CR_SCALE_BOUNDS[0] * cr_nom, CR_SCALE_BOUNDS[1] * cr_nom)),
            ):
                index.append(("span", k, name, None))
                x0.append(float(np.clip(val, *b)))
                lo.append(b[0])
                hi.append(b[1])
        self.knots = {}
        for k, site in enumerate(self.topo.sites):
            for band in ("C", "L"):
                m = site.model(band)
                kf = knot_frequencies(m.band_lo, m.band_hi, RIPPLE_KNOTS)
                self.knots[(k, band)] = kf
                for j, v in enumerate(m.ripple(kf)):
                    index.append(("ripple", k, band, j))
                    x0.append(float(np.clip(v, *RIPPLE_BOUNDS)))
                    lo.append(RIPPLE_BOUNDS[0])
                    hi.append(RIPPLE_BOUNDS[1])
        self.index = index
        self.x0 = np.array(x0)
        self.lower = np.array(lo)
        self.upper = np.array(hi)
        self._cache_key = None
        self._cache = None

    def topology(self, x) -> LinkTopology:
        topo = self.topo
        spans = [dict() for _ in topo.spans]
        ripple = {key: np.zeros(len(kf)) for key, kf in self.knots.items()}
        for (kind, k, a, j), v in zip(self.index, x):
            if kind == "span":
                spans[k][a] = float(v)
            else:
                ripple[(k, a)][j] = v
        els = []
        for k, (span, site) in enumerate(topo.elements):
            for band in ("C", "L"):
                prof = SpectralProfile.from_arrays(self.knots[(k, band)], ripple[(k, band)])
                site = site.with_model(band, site.model(band).evolve(ripple=prof))
            els.append((span.evolve(**spans[k]), site))
        return replace(topo, elements=tuple(els))

    def _pieces(self, states, start):
        out = {}
        for k in range(start, len(self.topo.elements)):
            name = self.topo.sites[k].name
            if name in self.measured:
                _, amp_in, amp_out = states[k - start]
                m_in, m_out, sel = self.measured[name]
                out[name] = np.concatenate(
                    [safe_dbm(amp_in.total_mw[sel]) - m_in, safe_dbm(amp_out.total_mw[sel]) - m_out]
                )
        return out

    def _run(self, x):
        key = x.tobytes()
        if key != self._cache_key:
            topo = self.topology(x)
            states = _forward(topo, self.launch, self.twin.step)
            self._cache_key, self._cache = key, (states, self._pieces(states, 0))
        return self._cache

    def residual(self, x):
        _, pieces = self._run(np.asarray(x, float))
        return np.concatenate([pieces[n] for n in self.ocm_sites])

    def jacobian(self, x, r, fd_step=1e-4):
        states, base = self._run(np.asarray(x, float))
        J = np.zeros((r.size, x.size))
        offsets, pos = {}, 0
        for n in self.ocm_sites:
            offsets[n] = (pos, pos + base[n].size)
            pos += base[n].size
        for p, (kind, k, a, j) in enumerate(self.index):
            h = fd_step if x[p] + fd_step <= self.upper[p] else -fd_step
            xp = x.copy()
            xp[p] += h
            topo = self.topology(xp)
            if kind == "span":
                sub = _forward(topo, states[k][0], self.twin.step, start=k)
            else:
                sub = _forward(topo, states[k][1], self.twin.step, start=k, at_amp=True)
            pieces = self._pieces(sub, k)
            for n, v in pieces.items():
                s, e = offsets[n]
                J[s:e, p] = (v - base[n]) / h
        return J


def _ocm_measurements(twin: TwinState, snapshots) -> dict:
    act = twin.active
    measured = {}
    for site in twin.estimate.sites:
        snap = snapshots.get(site.name)
        if snap is None or not site.has_ocm:
            continue
        if snap.kind != "ocm":
            raise ValidationError(f"site {site.name}: expected an ocm snapshot, got {snap.kind!r}")
        m_in = snap.array("in_dbm")
        m_out = snap.array("out_dbm")
        sel = act & (m_in > DARK_DBM) & (m_out > DARK_DBM)
        measured[site.name] = (m_in[sel], m_out[sel], sel)
    return measured


def stage3_fit(
    twin: TwinState,
    snapshots: Mapping[str, TelemetrySnapshot],
    max_iter: int = 50,
    rms_tol: float = 1e-4,
    fd_step: float = 1e-4,
) -> TwinState:
    """Physics-in-the-loop bounded least squares on per-channel OCM powers.

    Free parameters: both connectors and the Raman slope of every span, and
    five ripple knots per band per EDFA. Attenuation stays at its datasheet
    value because it is nearly collinear with the connectors here.
    """
    measured = _ocm_measurements(twin, snapshots)
    if not measured:
        raise ValidationError(
            "no OCM data: stage 3 is underdetermined; fall back to receiver-only OSNR in stage 4"
        )
    prob = _Stage3Problem(twin, measured)
    res = levenberg_marquardt(
        prob.residual,
        prob.x0,
        prob.lower,
        prob.upper,
        jac=lambda x, r: prob.jacobian(x, r, fd_step),
        max_iter=max_iter,
        rms_tol=rms_tol,
    )
    flags = list(twin.flags)
    if not res.converged:
        flags.append(f"stage3: no convergence after {res.iterations} iterations; returning best iterate")
    est = prob.topology(res.x)
    keys = []
    for k in range(len(est.elements)):
        keys += [f"span{k}.connector_in", f"span{k}.connector_out", f"span{k}.raman_slope"]
        keys += [f"site{k}.C.ripple", f"site{k}.L.ripple"]
    residuals = dict(twin.residuals)
    residuals["stage3"] = {"power_rms": res.rms, "gsnr_rms": None, "lm_history": list(res.history)}
    log.info("stage 3: %d iterations, power RMS %.4f dB", res.iterations, res.rms)
    return twin.evolve(
        estimate=est,
        provenance=_retag(twin.provenance, keys, "stage3"),
        residuals=residuals,
        stage_completed=max(twin.stage_completed, 3),
        flags=tuple(flags),
    )


# ---------------------------------------------------------------- stage 4


def _signal_from_total(total_mw, osnr_db, b_ghz):
    osnr = 10.0 ** (np.asarray(osnr_db) / 10.0)
    return total_mw / (1.0 + b_ghz / (OSNR_REF_BANDWIDTH * osnr))


def estimate_nf(gain_db, sig_in, osnr_in_db, sig_out, osnr_out_db, f_thz):
    """Per-channel NF (dB) from OSNR before and after an amplifier.

    Powers in mW; ``osnr_in_db`` may be None for a clean (ASE-free) input.
    Returns ``(nf_db, floored)``.
    """
    g = 10.0 ** (np.asarray(gain_db, float) / 10.0)
    ase_out = sig_out / 10.0 ** (np.asarray(osnr_out_db) / 10.0)
    ase_in = 0.0 if osnr_in_db is None else sig_in / 10.0 ** (np.asarray(osnr_in_db) / 10.0)
    added = ase_out - g * ase_in
    denom = PLANCK * np.asarray(f_thz) * 1e12 * OSNR_REF_BANDWIDTH * 1e9 * (g - 1.0) * 1e3
    floored = added <= 0
    nf_lin = np.where(floored, 0.0, added) / denom
    nf_db = np.where(floored | (nf_lin <= 0), NF_FLOOR_DB, 10.0 * np.log10(np.where(nf_lin > 0, nf_lin, 1.0)))
    floored = floored | (nf_db < NF_FLOOR_DB)
    return np.maximum(nf_db, NF_FLOOR_DB), floored


def fit_nf_profile(model: EdfaModel, f, nf0_db, n_knots=NF_KNOTS) -> SpectralProfile:
    """Least-squares piecewise-linear NF profile on evenly spaced band knots."""
    kf = knot_frequencies(model.band_lo, model.band_hi, n_knots)
    prev = model.nf0(kf)
    B = hat_basis(kf, f)
    vals = prev.copy()
    seen = B.sum(axis=0) > 1e-9
    if seen.any():
        sol, *_ = np.linalg.lstsq(B[:, seen], np.asarray(nf0_db) - B[:, ~seen] @ prev[~seen], rcond=None)
        vals[seen] = sol
    return SpectralProfile.from_arrays(kf, np.maximum(vals, NF_FLOOR_DB))


def stage4_nf(
    twin: TwinState,
    osnr_snapshots: Mapping[str, TelemetrySnapshot],
    ocm_snapshots: Optional[Mapping[str, TelemetrySnapshot]] = None,
    rx_osnr: Optional[TelemetrySnapshot] = None,
) -> TwinState:
    """Noise figures from OSNR before/after each monitored amplifier.

    Amplifiers whose input or output OSNR is unmonitored share one NF offset
    per band, solved so the predicted receiver OSNR matches ``rx_osnr``.
    """
    if twin.stage_completed < 3:
        raise NotCalibratedError("stage 4 needs stage-3 gain profiles")
    topo = twin.estimate
    grid = topo.grid
    f = grid.frequencies
    b = grid.symbol_rates
    act = twin.active
    trace = twin.predict()
    flags = list(twin.flags)
    sites = topo.sites
    monitored = [s.name in osnr_snapshots and s.has_osnr_monitor for s in sites]
    estimable = [monitored[k] and (k == 0 or monitored[k - 1]) for k in range(len(sites))]

    def totals(k, key):
        snap = None if ocm_snapshots is None else ocm_snapshots.get(sites[k].name)
        if snap is not None:
            return np.where(act, 10.0 ** (snap.array(key) / 10.0), 0.0)
        rec = trace.elements[k]
        return (rec.amp_in if key == "in_dbm" else rec.amp_out).total_mw

    new = topo
    for k, site in enumerate(sites):
        if not estimable[k]:
            continue
        o_out = osnr_snapshots[site.name].array("osnr_db")
        o_in = None if k == 0 else osnr_snapshots[sites[k - 1].name].array("osnr_db")
        sig_out = _signal_from_total(totals(k, "out_dbm"), o_out, b)
        sig_in = totals(k, "in_dbm") if o_in is None else _signal_from_total(totals(k, "in_dbm"), o_in, b)
        for band in ("C", "L"):
            model = site.model(band)
            cfg = site.config(band)
            sel = model.in_band(f) & act & np.isfinite(o_out)
            if o_in is not None:
                sel &= np.isfinite(o_in)
            if not sel.any():
                continue
            g_db = cfg.gain_target + cfg.tilt * (f - model.center) / (model.band_hi - model.band_lo) + model.ripple(f)
            ok = sel & (g_db > 0)
            if (sel & ~ok).any():
                flags.append(f"{site.name}.{band}: skipped {int((sel & ~ok).sum())} channels with gain <= 0 dB")
            if not ok.any():
                continue
            nf_db, floored = estimate_nf(
                g_db[ok], sig_in[ok], None if o_in is None else o_in[ok], sig_out[ok], o_out[ok], f[ok]
            )
            if floored.any():
                flags.append(f"{site.name}.{band}: {int(floored.sum())} channels at NF floor (no added ASE)")
            penalty = effective_nf(model, cfg, f[ok]) - model.nf0(f[ok])
            prof = fit_nf_profile(model, f[ok], nf_db - penalty)
            new = new.with_site(k, new.sites[k].with_model(band, model.evolve(nf0=prof)))
            site = new.sites[k]
    keys = [f"site{k}.{band}.nf0" for k in range(len(sites)) if estimable[k] for band in ("C", "L")]
    prov = _retag(twin.provenance, keys, "stage4")
    out = twin.evolve(estimate=new, provenance=prov)

    fallback = [k for k in range(len(sites)) if not estimable[k]]
    if fallback:
        if rx_osnr is None:
            raise ValidationError("unmonitored amplifiers need a receiver OSNR snapshot")
        out = _common_nf_offset(out, fallback, rx_osnr.array("osnr_db"))
        prov = _retag(out.provenance, [f"site{k}.{band}.nf0" for k in fallback for band in ("C", "L")], "stage4")
        out = out.evolve(provenance=prov)

    pred = out.predict().receiver.osnr
    ref = None
    if rx_osnr is not None:
        ref = rx_osnr.array("osnr_db")
    elif sites[-1].name in osnr_snapshots:
        ref = osnr_snapshots[sites[-1].name].array("osnr_db")
    rms = None
    if ref is not None:
        sel = act & np.isfinite(ref) & np.isfinite(pred)
        rms = float(np.sqrt(np.mean((pred[sel] - ref[sel]) ** 2))) if sel.any() else None
    residuals = dict(out.residuals)
    residuals["stage4"] = {"power_rms": twin.residuals.get("stage3", {}).get("power_rms"), "gsnr_rms": rms}
    return out.evolve(residuals=residuals, stage_completed=max(twin.stage_completed, 4), flags=tuple(flags))


def _common_nf_offset(twin: TwinState, sites_idx, rx_osnr_db) -> TwinState:
    grid = twin.estimate.grid
    act = twin.active
    base = twin.estimate

    def shifted(band, delta):
        topo = base
        for k in sites_idx:
            m = topo.sites[k].model(band)
            vals = np.maximum(m.nf0.values + delta, NF_FLOOR_DB)
            prof = SpectralProfile.from_arrays(m.nf0.frequencies, vals)
            topo = topo.with_site(k, topo.sites[k].with_model(band, m.evolve(nf0=prof)))
        return topo

    topo = base
    for band in ("C", "L"):
        sel = act & grid.band_mask(band) & np.isfinite(rx_osnr_db)
        if not sel.any():
            continue

        def mismatch(delta):
            t = shifted(band, delta)
            pred = propagate_link(t, t.launch_spectrum(act), twin.step).receiver.osnr
            return float(np.mean(pred[sel] - rx_osnr_db[sel]))

        lo, hi = -3.0, 8.0
        m_lo, m_hi = mismatch(lo), mismatch(hi)
        if m_lo * m_hi > 0:
            delta = lo if abs(m_lo) < abs(m_hi) else hi
        else:
            delta = brentq(mismatch, lo, hi, xtol=1e-6)
        base = shifted(band, delta)
    return twin.evolve(estimate=base)


# ---------------------------------------------------------------- reports


@dataclass(frozen=True, eq=False)
class CalibrationReport:
    """Per-channel prediction errors (twin minus field) and their summaries."""

    label: str
    frequency: np.ndarray
    active: np.ndarray
    power_error: dict
    osnr_error: dict
    gsnr_error: np.ndarray
    span_attribution: np.ndarray
    flagged_spans: tuple = ()
    loadings: tuple = ()
    inconclusive: bool = False

    @staticmethod
    def _finite(a):
        a = np.asarray(a, float)
        return a[np.isfinite(a)]

    def max_abs(self, kind="power", probe="rx") -> float:
        a = self._finite(self._pick(kind, probe))
        return float(np.max(np.abs(a))) if a.size else 0.0

    def rms(self, kind="power", probe="rx") -> float:
        a = self._finite(self._pick(kind, probe))
        return float(np.sqrt(np.mean(a**2))) if a.size else 0.0

    def _pick(self, kind, probe):
        if kind == "power":
            return self.power_error[probe]
        if kind == "osnr":
            return self.osnr_error[probe]
        if kind == "gsnr":
            return self.gsnr_error
        raise ValidationError(f"unknown error kind {kind!r}")

    def summary(self) -> dict:
        return {
            "label": self.label,
            "power_max": self.max_abs("power"),
            "power_rms": self.rms("power"),
            "osnr_max": self.max_abs("osnr"),
            "osnr_rms": self.rms("osnr"),
            "gsnr_max": self.max_abs("gsnr"),
            "gsnr_rms": self.rms("gsnr"),
            "flagged_spans": list(self.flagged_spans),
            "inconclusive": self.inconclusive,
        }


def _span_attribution(topo: LinkTopology, pred: PropagationTrace, meas_in: dict, meas_out: dict, act) -> np.ndarray:
    """RMS (dB) of the prediction error each span adds between its bracketing probes."""
    contrib = np.zeros(len(topo.elements))
    prev_err = np.zeros(len(topo.grid))
    for k, site in enumerate(topo.sites):
        p_in = safe_dbm(pred.elements[k].amp_in.total_mw)
        if site.name in meas_in:
            err_in = p_in - meas_in[site.name]
            sel = act & np.isfinite(err_in)
            contrib[k] = float(np.sqrt(np.mean((err_in[sel] - prev_err[sel]) ** 2))) if sel.any() else 0.0
        if site.name in meas_out:
            prev_err = safe_dbm(pred.elements[k].amp_out.total_mw) - meas_out[site.name]
        elif site.name in meas_in:
            prev_err = err_in
    return contrib


def accuracy_report(twin: TwinState, field: GroundTruth, label: str = "") -> CalibrationReport:
    """Twin predictions against the noise-free field state (test-harness access)."""
    twin = twin.with_status(field.device_configs(), field.loading())
    act = twin.active
    pred = twin.predict()
    truth = field.trace()
    topo = twin.estimate
    power, osnr = {}, {}
    meas_in, meas_out = {}, {}
    for k, site in enumerate(topo.sites):
        for key, p, t in (
            ("in", pred.elements[k].amp_in, truth.elements[k].amp_in),
            ("out", pred.elements[k].amp_out, truth.elements[k].amp_out),
        ):
            e = np.full(len(act), np.nan)
            e[act] = safe_dbm(p.total_mw[act]) - safe_dbm(t.total_mw[act])
            power[f"{site.name}.{key}"] = e
        meas_in[site.name] = safe_dbm(truth.elements[k].amp_in.total_mw)
        meas_out[site.name] = safe_dbm(truth.elements[k].amp_out.total_mw)
        po, to = pred.elements[k].amp_out, truth.elements[k].amp_out
        e = np.full(len(act), np.nan)
        lit = act & (po.signal_power > 0) & (to.signal_power > 0)
        b = topo.grid.symbol_rates
        e[lit] = osnr_ref(po.signal_power[lit], po.ase_power[lit], b[lit]) - osnr_ref(
            to.signal_power[lit], to.ase_power[lit], b[lit]
        )
        osnr[f"{site.name}.out"] = e
    power["rx"] = power[f"{topo.sites[-1].name}.out"]
    osnr["rx"] = pred.receiver.osnr - truth.receiver.osnr
    gsnr_err = pred.receiver.gsnr - truth.receiver.gsnr
    attribution = _span_attribution(topo, pred, meas_in, meas_out, act)
    return CalibrationReport(
        label or f"stage{twin.stage_completed}",
        topo.grid.frequencies.copy(),
        act.copy(),
        power,
        osnr,
        gsnr_err,
        attribution,
    )


def _measured_gsnr(curve: TransponderCurve, ber_values: dict) -> dict:
    out = {}
    for k, ber in ber_values.items():
        lo, hi = curve.ber_hull
        out[float(k)] = curve.ber_to_snr(min(max(ber, lo), hi))
    return out


def stage5_verify(
    twin: TwinState,
    field: GroundTruth,
    loadings: Sequence,
    threshold: float = VERIFY_GSNR_THRESHOLD,
) -> CalibrationReport:
    """Re-check GSNR under changed loading; flag spans that likely need refinement.

    Receiver GSNR is measured on CUT channels by translating BER through the
    transponder curve. Attribution uses OCM readings where available.
    """
    if twin.stage_completed < 4:
        raise NotCalibratedError("verification needs a twin calibrated through stage 4")
    grid = twin.estimate.grid
    masks = []
    for m in loadings:
        m = np.asarray(m, bool)
        if m.shape != (len(grid),) or not m.any():
            raise ValidationError("each loading must be a non-empty boolean mask over the grid")
        masks.append(m)
    if len(masks) < 2:
        raise ValidationError("verification needs at least two loadings")
    inconclusive = all(np.array_equal(masks[0], m) for m in masks[1:])
    original = field.loading()
    configs = field.device_configs()
    per_loading = []
    worst_attr = np.zeros(len(twin.estimate.elements))
    all_err = np.full(len(grid), np.nan)
    try:
        for m in masks:
            field.apply_event(SetLoading(tuple(m)))
            ber = field.query("rx_ber", RECEIVER).values["ber"]
            meas = _measured_gsnr(twin.curve, ber)
            pred = twin.with_status(configs, m).predict()
            err = np.full(len(grid), np.nan)
            for fr, g in meas.items():
                i = int(np.argmin(np.abs(grid.frequencies - fr)))
                p = pred.receiver.gsnr[i]
                lo, hi = twin.curve.snr_hull
                err[i] = min(max(p, lo), hi) - g
            meas_in, meas_out = {}, {}
            for site in twin.estimate.sites:
                if site.has_ocm:
                    snap = field.query("ocm", site.name)
                    meas_in[site.name] = snap.array("in_dbm")
                    meas_out[site.name] = snap.array("out_dbm")
            attr = _span_attribution(twin.estimate, pred, meas_in, meas_out, m)
            worst_attr = np.maximum(worst_attr, attr)
            finite = err[np.isfinite(err)]
            per_loading.append(
                {
                    "active": m.copy(),
                    "gsnr_error": err,
                    "max_abs": float(np.max(np.abs(finite))) if finite.size else 0.0,
                    "span_attribution": attr,
                }
            )
            upd = np.isfinite(err) & (~np.isfinite(all_err) | (np.abs(err) > np.abs(np.nan_to_num(all_err))))
            all_err[upd] = err[upd]
    finally:
        field.apply_event(SetLoading(tuple(original)))
    worst = max(p["max_abs"] for p in per_loading)
    flagged = ()
    if worst > threshold and worst_attr.max() > 0:
        flagged = tuple(int(k) for k in np.flatnonzero(worst_attr >= (1.0 - ATTRIBUTION_TIE) * worst_attr.max()))
    nan = np.full(len(grid), np.nan)
    return CalibrationReport(
        "stage5",
        grid.frequencies.copy(),
        np.any(masks, axis=0),
        {"rx": nan},
        {"rx": nan},
        all_err,
        worst_attr,
        flagged,
        tuple(per_loading),
        inconclusive,
    )


# ---------------------------------------------------------------- pipeline


def collect(field: GroundTruth, kind: str, sites=None) -> dict:
    """Query ``kind`` at every capable site; returns ``{site: snapshot}``."""
    out = {}
    for site in field.truth.sites if sites is None else sites:
        if kind == "ocm" and not site.has_ocm:
            continue
        if kind == "osnr" and not site.has_osnr_monitor:
            continue
        out[site.name] = field.query(kind, site.name)
    return out


def collect_all(field: GroundTruth) -> dict:
    """One snapshot of every kind the calibration stages consume, keyed by kind."""
    return {
        "totals": collect(field, "totals"),
        "ocm": collect(field, "ocm"),
        "osnr": collect(field, "osnr"),
        "rx_osnr": field.query("osnr", RECEIVER),
    }


def calibrate_from_telemetry(
    datasheet: LinkTopology,
    configs: Mapping,
    loading,
    telemetry: Mapping,
    curve: TransponderCurve,
    through_stage: int = 4,
    step: float = DEFAULT_STEP_KM,
    refine_rounds: int = 1,
    max_iter: int = 50,
) -> list:
    """Run stages 1..``through_stage`` on recorded telemetry; returns the twin after each stage.

    ``telemetry`` maps ``totals``/``ocm``/``osnr`` to ``{site: snapshot}`` and
    ``rx_osnr`` to the receiver OSNR snapshot. ``refine_rounds`` repeats
    stages 3 and 4 warm-started so stage-3 gains are refit once the noise
    figures are known.
    """
    if not 1 <= through_stage <= 4:
        raise ValidationError("through_stage must be within 1..4 (stage 5 is stage5_verify)")
    twin = stage1_baseline(datasheet.with_configs(configs), curve, loading, step)
    history = [twin]
    if through_stage >= 2:
        twin = stage2_totals(twin, telemetry["totals"])
        history.append(twin)
    if through_stage >= 3:
        twin = stage3_fit(twin, telemetry["ocm"], max_iter=max_iter)
        history.append(twin)
    if through_stage >= 4:
        osnr, ocm, rx = telemetry["osnr"], telemetry["ocm"], telemetry.get("rx_osnr")
        twin = stage4_nf(twin, osnr, ocm, rx)
        for _ in range(refine_rounds):
            twin = stage3_fit(twin, ocm, max_iter=max_iter)
            twin = stage4_nf(twin, osnr, ocm, rx)
        history.append(twin)
    return history


def calibrate(
    datasheet: LinkTopology,
    field: GroundTruth,
    through_stage: int = 4,
    curve: Optional[TransponderCurve] = None,
    step: float = DEFAULT_STEP_KM,
    refine_rounds: int = 1,
    max_iter: int = 50,
) -> list:
    """Query ``field`` and run stages 1..``through_stage``; returns the twin after each stage."""
    return calibrate_from_telemetry(
        datasheet,
        field.device_configs(),
        field.loading(),
        collect_all(field),
        field.curve if curve is None else curve,
        through_stage,
        step,
        refine_rounds,
        max_iter,
    )
