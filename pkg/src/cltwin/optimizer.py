"""EDFA gain/tilt optimization against the twin, and fiber-cut recovery."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
from scipy.special import logsumexp

from .amplifier import EdfaConfig
from .calibration import DARK_DBM, TwinState
from .exceptions import NotCalibratedError, ValidationError
from .field import RECEIVER, GroundTruth, SetConfig
from .qot import HullError
from .spectral import safe_dbm, total_power

log = logging.getLogger(__name__)

OBJECTIVES = ("min_gsnr",)
DEFAULT_THRESHOLDS = {"total_power_delta": 1.0}


def channel_gsnr(twin: TwinState, configs: Mapping, loading=None) -> np.ndarray:
    """Receiver GSNR (dB) of the active channels under ``configs``."""
    act = twin.active if loading is None else np.asarray(loading, bool)
    if not act.any():
        raise ValidationError("objective needs at least one active channel")
    try:
        tr = twin.predict(act, configs)
    except ValidationError as exc:
        desc = {f"{k}.{b}": (c.gain_target, c.tilt) for (k, b), c in configs.items()}
        raise ValidationError(f"propagation failed for configs {desc}: {exc}") from exc
    return tr.receiver.gsnr[act]


def objective(twin: TwinState, configs: Mapping, loading=None) -> float:
    """Minimum receiver GSNR (dB) over active channels under ``configs``."""
    return float(np.min(channel_gsnr(twin, configs, loading)))


def soft_min(values, temperature: float) -> float:
    """Smooth lower envelope ``-t*log(sum(exp(-v/t)))``; the plain min when ``t == 0``."""
    v = np.asarray(values, float)
    if temperature == 0:
        return float(np.min(v))
    return float(-temperature * logsumexp(-v / temperature))


@dataclass(frozen=True, eq=False)
class OptimizationProblem:
    """Gain and tilt of every band amplifier at every site, maximizing min GSNR.

    ``bounds`` may narrow the box per ``(site_index, band)`` as
    ``((gain_lo, gain_hi), (tilt_lo, tilt_hi))``; the rest come from each
    amplifier's datasheet ranges.
    """

    twin: TwinState
    loading: Optional[np.ndarray] = None
    objective: str = "min_gsnr"
    max_steps: int = 60
    fd_step: float = 0.1
    initial_rate: float = 1.0
    backtrack_factor: float = 0.5
    min_rate: float = 0.01
    bounds: Optional[Mapping] = None
    smoothing: float = 0.1
    shared_tilt: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.smoothing < 0:
            raise ValidationError("smoothing must be non-negative")
        if self.max_steps < 0 or self.fd_step <= 0 or self.initial_rate <= 0 or self.min_rate <= 0:
            raise ValidationError("optimizer options must be positive")
        if not 0 < self.backtrack_factor < 1:
            raise ValidationError("backtrack_factor must lie in (0, 1)")
        act = self.twin.active if self.loading is None else np.asarray(self.loading, bool)
        if act.shape != (len(self.twin.estimate.grid),) or not act.any():
            raise ValidationError("loading must be a non-empty mask over the grid")
        object.__setattr__(self, "loading", act.copy())
        lo, hi = self.box()
        if np.any(lo > hi):
            raise ValidationError("optimizer bounds are empty")

    @property
    def keys(self) -> list:
        """Decision variables as ``(site_index, band, 'gain'|'tilt')``; site ``-1`` is a shared tilt."""
        n = len(self.twin.estimate.sites)
        if self.shared_tilt:
            return [(k, b, "gain") for k in range(n) for b in ("C", "L")] + [(-1, b, "tilt") for b in ("C", "L")]
        return [(k, b, v) for k in range(n) for b in ("C", "L") for v in ("gain", "tilt")]

    def _range(self, k, b, v):
        sites = self.twin.estimate.sites
        custom = {} if self.bounds is None else dict(self.bounds)
        idx = range(len(sites)) if k < 0 else (k,)
        lo, hi = -np.inf, np.inf
        for i in idx:
            m = sites[i].model(b)
            g, t = custom.get((i, b), (m.gain_range, m.tilt_range))
            r = g if v == "gain" else t
            lo, hi = max(lo, float(r[0])), min(hi, float(r[1]))
        return lo, hi

    def box(self):
        lo, hi = zip(*(self._range(*key) for key in self.keys))
        return np.array(lo), np.array(hi)

    def to_vector(self, configs: Mapping) -> np.ndarray:
        out = []
        for k, b, v in self.keys:
            if v == "gain":
                out.append(configs[(k, b)].gain_target)
            elif k < 0:
                out.append(float(np.mean([c.tilt for (_, bb), c in configs.items() if bb == b])))
            else:
                out.append(configs[(k, b)].tilt)
        return np.array(out)

    def to_configs(self, x) -> dict:
        n = len(self.twin.estimate.sites)
        gain, tilt = {}, {}
        for (k, b, v), val in zip(self.keys, x):
            target = gain if v == "gain" else tilt
            for i in range(n) if k < 0 else (k,):
                target[(i, b)] = float(val)
        return {key: EdfaConfig(gain[key], tilt[key]) for key in sorted(gain)}

    def channels(self, x) -> np.ndarray:
        return channel_gsnr(self.twin, self.to_configs(x), self.loading)

    def evaluate(self, x) -> float:
        return float(np.min(self.channels(x)))


@dataclass(frozen=True, eq=False)
class OptimizationOutcome:
    best_configs: dict
    init_configs: dict
    trajectory: tuple
    objective_init: float
    objective_best: float
    status: str = "optimized"
    active: Optional[np.ndarray] = None
    before: dict = field(default_factory=dict)
    after: dict = field(default_factory=dict)
    n_evals: int = 0

    @property
    def accepted(self) -> list:
        return [t for t in self.trajectory if t["accepted"]]

    def to_dict(self) -> dict:
        def cfgs(c):
            return [{"site": k, "band": b, **v.to_dict()} for (k, b), v in sorted(c.items())]

        def arrays(d):
            return {k: [None if not np.isfinite(x) else float(x) for x in v] for k, v in d.items()}

        return {
            "status": self.status,
            "objective_init": self.objective_init,
            "objective_best": self.objective_best,
            "best_configs": cfgs(self.best_configs),
            "init_configs": cfgs(self.init_configs),
            "trajectory": list(self.trajectory),
            "active": None if self.active is None else [bool(a) for a in self.active],
            "before": arrays(self.before),
            "after": arrays(self.after),
            "n_evals": self.n_evals,
        }


def optimize(problem: OptimizationProblem, init: Mapping) -> OptimizationOutcome:
    """Normalized-gradient ascent with backtracking on the problem's box."""
    lo, hi = problem.box()
    x = problem.to_vector(init)
    if np.any(x < lo - 1e-9) or np.any(x > hi + 1e-9):
        raise ValidationError("initial configs lie outside the optimizer bounds")
    x = np.clip(x, lo, hi)
    g = problem.channels(x)
    f, s = float(np.min(g)), soft_min(g, problem.smoothing)
    f0 = f
    n_evals = 1
    rate = problem.initial_rate
    trajectory = []
    free = hi > lo
    for step in range(1, problem.max_steps + 1):
        grad = np.zeros_like(x)
        for p in np.flatnonzero(free):
            h = problem.fd_step if x[p] + problem.fd_step <= hi[p] else -problem.fd_step
            xp = x.copy()
            xp[p] += h
            grad[p] = (soft_min(problem.channels(xp), problem.smoothing) - s) / h
            n_evals += 1
        norm = float(np.linalg.norm(grad))
        if norm == 0.0 or not np.isfinite(norm):
            break
        moved = False
        while rate >= problem.min_rate:
            cand = np.clip(x + rate * grad / norm, lo, hi)
            if np.array_equal(cand, x):
                rate *= problem.backtrack_factor
                continue
            gc = problem.channels(cand)
            fc = float(np.min(gc))
            n_evals += 1
            accepted = bool(fc > f)
            trajectory.append({"step": step, "objective": fc, "accepted": accepted, "rate": rate})
            if accepted:
                x, f, s = cand, fc, soft_min(gc, problem.smoothing)
                moved = True
                break
            rate *= problem.backtrack_factor
        if not moved:
            break
    log.info("optimizer: %.3f -> %.3f dB in %d evaluations", f0, f, n_evals)
    return OptimizationOutcome(
        problem.to_configs(x),
        dict(init),
        tuple(trajectory),
        f0,
        f,
        "optimized" if f > f0 else "no improvement",
        problem.loading.copy(),
        n_evals=n_evals,
    )


def lattice_search(problem: OptimizationProblem, init: Mapping, spacing: float = 0.5, tilt_span=(-3.0, 3.0)):
    """Brute-force oracle: one shared tilt per band on a regular lattice, gains at ``init``.

    Returns ``(best_value, best_configs)``.
    """
    tilts = np.arange(tilt_span[0], tilt_span[1] + 1e-9, spacing)
    best, best_cfg = -np.inf, None
    bands = ("C", "L")
    for combo in itertools.product(tilts, repeat=len(bands)):
        cfg = {}
        for (k, b), c in init.items():
            cfg[(k, b)] = EdfaConfig(c.gain_target, float(combo[bands.index(b)]))
        x = problem.to_vector(cfg)
        lo, hi = problem.box()
        if np.any(x < lo) or np.any(x > hi):
            continue
        v = problem.evaluate(x)
        if v > best:
            best, best_cfg = v, cfg
    return best, best_cfg


def equalize_receiver(
    twin: TwinState, configs: Mapping, loading=None, rounds: int = 3, tolerance: float = 0.01
) -> dict:
    """Flatten received power with the last amplifier's gain and tilt.

    The last site scales signal, ASE and NLI alike, so it barely moves GSNR.
    Each round removes the per-band linear trend of received power (dB) and
    levels both bands to the common mean. The result is discarded if min
    GSNR drops by more than ``tolerance`` dB.
    """
    act = twin.active if loading is None else np.asarray(loading, bool)
    last = len(twin.estimate.sites) - 1
    site = twin.estimate.sites[last]
    f = twin.estimate.grid.frequencies
    base = float(np.min(channel_gsnr(twin, configs, act)))
    cfg = dict(configs)
    for _ in range(rounds):
        rx = twin.predict(act, cfg).receiver
        p = safe_dbm(rx.p_sig + rx.p_ase)
        target = float(np.mean(p[act]))
        for band in ("C", "L"):
            m = site.model(band)
            sel = act & m.in_band(f)
            if not sel.any():
                continue
            x = (f[sel] - m.center) / (m.band_hi - m.band_lo)
            slope, level = np.polyfit(x, p[sel], 1) if sel.sum() > 1 else (0.0, float(p[sel][0]))
            c = cfg[(last, band)]
            cfg[(last, band)] = EdfaConfig(
                float(np.clip(c.gain_target - (level - target), *m.gain_range)),
                float(np.clip(c.tilt - slope, *m.tilt_range)),
            )
    if float(np.min(channel_gsnr(twin, cfg, act))) < base - tolerance:
        log.info("receiver equalization would cost min GSNR; keeping optimized configs")
        return dict(configs)
    return cfg


def _field_totals(field: GroundTruth) -> dict:
    out = {}
    for name in field.site_names():
        snap = field.query("totals", name)
        out[name] = snap.values
    return out


def _twin_totals(twin: TwinState) -> dict:
    tr = twin.predict()
    grid = twin.estimate.grid
    out = {}
    for k, site in enumerate(twin.estimate.sites):
        rec = tr.elements[k]
        out[site.name] = {
            key: {b: total_power(spec, grid.band_mask(b)) for b in ("C", "L")}
            for key, spec in (("in_dbm", rec.amp_in), ("out_dbm", rec.amp_out))
        }
    return out


def _snapshot_metrics(field: GroundTruth, twin: TwinState) -> dict:
    """Fresh receiver-side readings: per-channel power at the last OCM, CUT GSNR via BER."""
    grid = twin.estimate.grid
    last = [s for s in twin.estimate.sites if s.has_ocm]
    power = np.full(len(grid), np.nan)
    if last:
        p = field.query("ocm", last[-1].name).array("out_dbm")
        power = np.where(field.loading(), p, np.nan)
    gsnr = np.full(len(grid), np.nan)
    lo, hi = twin.curve.ber_hull
    for fr, ber in field.query("rx_ber", RECEIVER).values["ber"].items():
        i = int(np.argmin(np.abs(grid.frequencies - float(fr))))
        try:
            gsnr[i] = twin.curve.ber_to_snr(min(max(ber, lo), hi))
        except HullError:
            pass
    predicted = twin.with_status(field.device_configs(), field.loading()).predict().receiver.gsnr
    return {"power_dbm": power, "gsnr_db": gsnr, "gsnr_twin_db": predicted}


def detect_change(twin: TwinState, field: GroundTruth, threshold: float) -> dict:
    """Sites whose measured band totals moved more than ``threshold`` dB from the twin's expectation."""
    expected = _twin_totals(twin.with_status(field.device_configs()))
    measured = _field_totals(field)
    moved = {}
    for name, vals in measured.items():
        worst = max(
            abs(vals[key][b] - expected[name][key][b]) for key in ("in_dbm", "out_dbm") for b in ("C", "L")
        )
        if worst > threshold:
            moved[name] = worst
    return moved


def recover(
    twin: TwinState,
    field: GroundTruth,
    thresholds: Optional[Mapping] = None,
    equalize: bool = True,
    **options,
) -> OptimizationOutcome:
    """Detect a loading change, re-optimize the twin and push configs to the field.

    ``options`` are forwarded to :class:`OptimizationProblem`; ``equalize``
    finishes with :func:`equalize_receiver`.
    """
    if twin.stage_completed < 4:
        raise NotCalibratedError("recovery needs a twin calibrated through stage 4")
    th = dict(DEFAULT_THRESHOLDS)
    th.update(thresholds or {})
    init = field.device_configs()
    moved = detect_change(twin, field, th["total_power_delta"])
    if not moved:
        return OptimizationOutcome(init, init, (), np.nan, np.nan, "no action", twin.active.copy())
    log.info("recovery triggered at %s", sorted(moved))
    grid = twin.estimate.grid
    active = np.ones(len(grid), bool)
    for site in twin.estimate.sites:
        if site.has_ocm:
            snap = field.query("ocm", site.name)
            active &= (snap.array("in_dbm") > DARK_DBM) & (snap.array("out_dbm") > DARK_DBM)
    if not active.any():
        raise ValidationError("no surviving channels detected by the OCMs")
    updated = twin.with_status(init, active)
    before = _snapshot_metrics(field, updated)
    problem = OptimizationProblem(updated, active, **options)
    out = optimize(problem, init)
    if equalize:
        out = replace(out, best_configs=equalize_receiver(updated, out.best_configs, active))
    for (k, b), cfg in sorted(out.best_configs.items()):
        if cfg != init[(k, b)]:
            field.apply_event(SetConfig(field.site_names()[k], b, cfg))
    after = _snapshot_metrics(field, updated.with_status(out.best_configs))
    return OptimizationOutcome(
        out.best_configs,
        init,
        out.trajectory,
        out.objective_init,
        out.objective_best,
        "recovered",
        active,
        before,
        after,
        out.n_evals,
    )
