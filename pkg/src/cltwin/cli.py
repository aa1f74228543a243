"""Command-line entry point: ``cltwin <command> -c config.ini``.

Exit codes: 0 success, 2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .calibration import (
    accuracy_report,
    calibrate_from_telemetry,
    collect_all,
    stage5_verify,
)
from .exceptions import NumericalError, ValidationError
from .fiber import DEFAULT_STEP_KM
from .field import RECEIVER, FiberCut, NoiseSpec, PerturbationSpec, SetConfig, SetLoading, make_field
from .link import LinkTopology, replica_topology
from .optimizer import OptimizationProblem, equalize_receiver, optimize, recover
from .qot import default_curve
from .spectral import safe_dbm
from .validation import check_positive, check_range, check_seed, check_stage

log = logging.getLogger("cltwin")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

TWIN_FILE = "twin_state.json"
TELEMETRY_FILE = "telemetry.jsonl"
EVENTS_FILE = "events.json"
REPORTS_DIR = "reports"
FIELD_FILE = "ground_truth.json"
STATUS_FILE = "network_status.json"

EXAMPLE_CONFIG = """\
# cltwin run configuration. Paths are relative to this file.
[run]
output_dir = run
topology = topology.json
seed = 0
step_km = 0.05

[perturbation]
connector_lo = 0.3
connector_hi = 2.5
ripple_amplitude = 0.8
cr_scale_lo = 0.8
cr_scale_hi = 1.2
nf_offset_lo = -0.5
nf_offset_hi = 1.0

[noise]
ocm_sigma = 0.1
total_sigma = 0.05
osnr_sigma = 0.3

[calibration]
refine_rounds = 1
max_iter = 50
verify_threshold = 0.5

[optimizer]
max_steps = 60
fd_step = 0.1
initial_rate = 1.0
backtrack_factor = 0.5
min_rate = 0.01
smoothing = 0.1
total_power_delta = 1.0
"""


@dataclass
class RunConfig:
    output_dir: Path
    topology: Optional[Path] = None
    seed: int = 0
    step_km: float = DEFAULT_STEP_KM
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    refine_rounds: int = 1
    max_iter: int = 50
    verify_threshold: float = 0.5
    optimizer: dict = field(default_factory=dict)
    total_power_delta: float = 1.0

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file {path} does not exist")
        cp = configparser.ConfigParser()
        try:
            cp.read_string(path.read_text(), str(path))
        except configparser.Error as exc:
            raise ValidationError(f"{path}: {exc}") from exc
        return cls.from_parser(cp, path.parent)

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser, base: Path) -> "RunConfig":
        def get(section, key, conv, default):
            if not cp.has_option(section, key):
                return default
            raw = cp.get(section, key)
            try:
                return conv(raw)
            except ValueError as exc:
                raise ValidationError(f"[{section}] {key} = {raw!r} is not a valid {conv.__name__}") from exc

        if not cp.has_option("run", "seed"):
            raise ValidationError("[run] seed is required: the field simulation is stochastic")
        topo = get("run", "topology", str, "")
        topo_path = None
        if topo:
            topo_path = (base / topo).resolve()
            if not topo_path.is_file():
                raise ValidationError(f"[run] topology file {topo_path} does not exist")
        p = PerturbationSpec()
        conn = (get("perturbation", "connector_lo", float, 0.3), get("perturbation", "connector_hi", float, 2.5))
        pert = PerturbationSpec(
            check_range(conn, "connector range"),
            get("perturbation", "ripple_amplitude", float, p.ripple_amplitude),
            check_range(
                (get("perturbation", "cr_scale_lo", float, 0.8), get("perturbation", "cr_scale_hi", float, 1.2)),
                "Raman scale range",
            ),
            check_range(
                (get("perturbation", "nf_offset_lo", float, -0.5), get("perturbation", "nf_offset_hi", float, 1.0)),
                "NF offset range",
            ),
        )
        noise = NoiseSpec(
            get("noise", "ocm_sigma", float, 0.1),
            get("noise", "total_sigma", float, 0.05),
            get("noise", "osnr_sigma", float, 0.3),
        )
        opt = {
            "max_steps": get("optimizer", "max_steps", int, 60),
            "fd_step": get("optimizer", "fd_step", float, 0.1),
            "initial_rate": get("optimizer", "initial_rate", float, 1.0),
            "backtrack_factor": get("optimizer", "backtrack_factor", float, 0.5),
            "min_rate": get("optimizer", "min_rate", float, 0.01),
            "smoothing": get("optimizer", "smoothing", float, 0.1),
        }
        return cls(
            output_dir=(base / get("run", "output_dir", str, "run")).resolve(),
            topology=topo_path,
            seed=check_seed(get("run", "seed", int, 0)),
            step_km=check_positive(get("run", "step_km", float, DEFAULT_STEP_KM), "step_km"),
            perturbation=pert,
            noise=noise,
            refine_rounds=get("calibration", "refine_rounds", int, 1),
            max_iter=get("calibration", "max_iter", int, 50),
            verify_threshold=check_positive(get("calibration", "verify_threshold", float, 0.5), "verify_threshold"),
            optimizer=opt,
            total_power_delta=check_positive(get("optimizer", "total_power_delta", float, 1.0), "total_power_delta"),
        )

    def datasheet(self) -> LinkTopology:
        if self.topology is None:
            return replica_topology()
        obj = io.restore(self.topology)
        if not isinstance(obj, LinkTopology):
            raise ValidationError(f"{self.topology} does not hold a topology document")
        return obj


# ---------------------------------------------------------------- helpers


def _run_dir(cfg: RunConfig) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / REPORTS_DIR).mkdir(exist_ok=True)
    return cfg.output_dir


def _need(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise ValidationError(f"{path} not found; run `cltwin {hint}` first")
    return path


def _load_field(run: Path):
    return io.restore(_need(run / FIELD_FILE, "simulate"))


def _save_field(run: Path, fld) -> None:
    io.persist(fld, run / FIELD_FILE)
    io.write_telemetry(fld.telemetry, run / TELEMETRY_FILE)
    io.write_events(fld.event_log, run / EVENTS_FILE)


def _telemetry_bundle(run: Path, through_sequence: int) -> dict:
    records = io.read_telemetry(_need(run / TELEMETRY_FILE, "simulate"))
    latest = io.latest_snapshots(s for s in records if s.sequence_number <= through_sequence)
    bundle = {"totals": {}, "ocm": {}, "osnr": {}, "rx_osnr": latest.get(("osnr", RECEIVER))}
    for (kind, site), snap in latest.items():
        if kind in ("totals", "ocm", "osnr") and site != RECEIVER:
            bundle[kind][site] = snap
    return bundle


def _history(cfg: RunConfig, run: Path, through: int) -> list:
    status = json.loads(_need(run / STATUS_FILE, "simulate").read_text())
    configs, loading = io.configs_from_document(status)
    return calibrate_from_telemetry(
        cfg.datasheet(),
        configs,
        loading,
        _telemetry_bundle(run, int(status.get("sequence_number", 0))),
        default_curve(),
        through,
        cfg.step_km,
        cfg.refine_rounds,
        cfg.max_iter,
    )


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _rx_summary(trace, mask=None) -> dict:
    act = trace.active if mask is None else trace.active & mask
    f = trace.grid.frequencies[act]
    p = safe_dbm(trace.receiver.p_sig + trace.receiver.p_ase)[act]
    return {
        "min_gsnr_db": float(np.min(trace.receiver.gsnr[act])),
        "power_spread_db": float(np.ptp(p)),
        "power_slope_db_per_thz": float(np.polyfit(f, p, 1)[0]),
    }


# ---------------------------------------------------------------- commands


def cmd_init(args) -> int:
    target = Path(args.dir)
    target.mkdir(parents=True, exist_ok=True)
    cfg_path = target / "config.ini"
    if cfg_path.exists() and not args.force:
        raise ValidationError(f"{cfg_path} exists; pass --force to overwrite")
    cfg_path.write_text(EXAMPLE_CONFIG)
    io.persist(replica_topology(), target / "topology.json")
    print(f"wrote {cfg_path} and {target / 'topology.json'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = RunConfig.load(args.config)
    run = _run_dir(cfg)
    fld = make_field(cfg.datasheet(), cfg.perturbation, cfg.seed, cfg.noise, step=cfg.step_km)
    collect_all(fld)
    fld.query("rx_ber", RECEIVER)
    status = io.configs_document(fld.device_configs(), fld.loading())
    status["sequence_number"] = fld.sequence_number
    _write(run / STATUS_FILE, json.dumps(status, sort_keys=True, indent=1) + "\n")
    _save_field(run, fld)
    tr = fld.trace()
    for kind in io.SERIES_KINDS:
        io.emit_series(tr, kind, run / REPORTS_DIR / f"field_{kind}.csv")
    print(f"simulated field (seed {cfg.seed}) into {run}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = RunConfig.load(args.config)
    run = _run_dir(cfg)
    stage = check_stage(args.through_stage)
    history = _history(cfg, run, min(stage, 4))
    twin = history[-1]
    rows = ["stage,power_rms_db,gsnr_rms_db"]
    for t in history:
        r = t.residuals.get(f"stage{t.stage_completed}", {})
        vals = [r.get("power_rms"), r.get("gsnr_rms")]
        rows.append(",".join([str(t.stage_completed)] + ["" if v is None else f"{v:.9f}" for v in vals]))
    _write(run / REPORTS_DIR / "residuals.csv", "\n".join(rows) + "\n")
    if stage == 5:
        fld = _load_field(run)
        grid = twin.estimate.grid
        full = np.ones(len(grid), bool)
        half_l = full.copy()
        l_idx = np.flatnonzero(grid.band_mask("L"))
        half_l[l_idx[1::2]] = False
        half_l |= grid.role_mask("CUT")
        rep = stage5_verify(twin, fld, [full, half_l], cfg.verify_threshold)
        _write(run / REPORTS_DIR / "verification.csv", io.report_csv(rep))
        io.persist(rep, run / "verification.json")
        _save_field(run, fld)
        flags = twin.flags + tuple(f"stage5: span{k} needs re-refinement" for k in rep.flagged_spans)
        twin = twin.evolve(stage_completed=5, flags=flags)
        print(f"verification: max |GSNR error| {rep.max_abs('gsnr'):.3f} dB, flagged spans {list(rep.flagged_spans)}")
    io.persist(twin, run / TWIN_FILE)
    print(f"twin calibrated through stage {twin.stage_completed}; wrote {run / TWIN_FILE}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = RunConfig.load(args.config)
    run = _run_dir(cfg)
    twin = io.restore(_need(run / TWIN_FILE, "calibrate"))
    fld = _load_field(run)
    history = _history(cfg, run, 4)
    rep = accuracy_report(twin, fld)
    io.persist(rep, run / REPORTS_DIR / "accuracy.json")
    _write(run / REPORTS_DIR / "accuracy.csv", io.report_csv(rep))
    configs, loading = fld.device_configs(), fld.loading()
    series = {
        "stage1": history[0].with_status(configs, loading).predict(),
        "stage2": history[1].with_status(configs, loading).predict(),
        "stage34": history[-1].with_status(configs, loading).predict(),
        "truth": fld.trace(),
    }
    for kind in io.SERIES_KINDS:
        io.emit_series(series, kind, run / REPORTS_DIR / f"{kind}.csv")
    s = rep.summary()
    print(
        f"received power error max {s['power_max']:.3f} dB rms {s['power_rms']:.3f} dB; "
        f"GSNR error max {s['gsnr_max']:.3f} dB rms {s['gsnr_rms']:.3f} dB"
    )
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = RunConfig.load(args.config)
    run = _run_dir(cfg)
    twin = io.restore(_need(run / TWIN_FILE, "calibrate"))
    fld = _load_field(run)
    twin = twin.with_status(fld.device_configs(), fld.loading())
    before = twin.predict()
    out = _optimize_and_apply(twin, fld, cfg)
    twin = twin.with_status(out.best_configs)
    io.persist(out, run / "optimization.json")
    io.persist(twin, run / TWIN_FILE)
    _save_field(run, fld)
    for kind in ("power", "gsnr"):
        io.emit_series({"before": before, "after": twin.predict()}, kind, run / REPORTS_DIR / f"optimized_{kind}.csv")
    print(f"min GSNR {out.objective_init:.3f} -> {out.objective_best:.3f} dB ({len(out.accepted)} accepted steps)")
    return EXIT_OK


def _optimize_and_apply(twin, fld, cfg: RunConfig):
    """Optimize on the twin, equalize at the receiver and push changed configs to the field."""
    out = optimize(OptimizationProblem(twin, **cfg.optimizer), twin.estimate.configs())
    out = replace(out, best_configs=equalize_receiver(twin, out.best_configs))
    for (k, b), c in sorted(out.best_configs.items()):
        if c != out.init_configs[(k, b)]:
            fld.apply_event(SetConfig(fld.site_names()[k], b, c))
    return out


def cmd_scenario(args) -> int:
    cfg = RunConfig.load(args.config)
    run = _run_dir(cfg)
    twin = io.restore(_need(run / TWIN_FILE, "calibrate"))
    fld = _load_field(run)
    end = {"low": "low_freq", "high": "high_freq"}[args.end]
    if args.loading == "cut-band-full":
        # the cut band fully loaded, only the CUTs lit in the other band; re-optimized before the cut
        grid = twin.estimate.grid
        mask = grid.band_mask(args.band) | grid.role_mask("CUT")
        fld.apply_event(SetLoading(tuple(mask)))
        twin = twin.with_status(fld.device_configs(), mask)
        out = _optimize_and_apply(twin, fld, cfg)
        twin = twin.with_status(out.best_configs)
    else:
        twin = twin.with_status(fld.device_configs(), fld.loading())
    pre = fld.trace()
    fld.apply_event(FiberCut(args.band, end, args.drop))
    cut = fld.trace()
    outcome = recover(twin, fld, {"total_power_delta": cfg.total_power_delta}, **cfg.optimizer)
    rec = fld.trace()
    summary = {
        "event": {"band": args.band, "end": end, "n_channels": args.drop, "loading": args.loading},
        "status": outcome.status,
        "pre_cut": _rx_summary(pre),
        "pre_cut_survivors": _rx_summary(pre, cut.active),
        "post_cut": _rx_summary(cut),
        "recovered": _rx_summary(rec),
    }
    summary["checks"] = {
        "tilt_more_positive_after_cut": summary["post_cut"]["power_slope_db_per_thz"]
        > summary["pre_cut_survivors"]["power_slope_db_per_thz"],
        "spread_within_0p5_db": summary["recovered"]["power_spread_db"] <= summary["pre_cut"]["power_spread_db"] + 0.5,
        "min_gsnr_restored": summary["recovered"]["min_gsnr_db"] >= summary["pre_cut"]["min_gsnr_db"],
    }
    _write(run / "scenario.json", json.dumps(summary, sort_keys=True, indent=1) + "\n")
    io.persist(outcome, run / "recovery.json")
    _save_field(run, fld)
    for kind in ("power", "gsnr"):
        io.emit_series(
            {"pre_cut": pre, "post_cut": cut, "recovered": rec}, kind, run / REPORTS_DIR / f"fiber_cut_{kind}.csv"
        )
    print(
        f"fiber cut {args.band}/{end}/{args.drop}: {outcome.status}; min GSNR "
        f"{summary['pre_cut']['min_gsnr_db']:.3f} -> {summary['recovered']['min_gsnr_db']:.3f} dB"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cltwin", description="C+L band optical link digital twin")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write an example config and the replica topology")
    p.add_argument("--dir", default=".")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init)

    def with_config(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", default="config.ini")
        p.set_defaults(func=func)
        return p

    with_config("simulate", cmd_simulate, "sample a hidden field link and record telemetry")
    p = with_config("calibrate", cmd_calibrate, "calibrate the twin from recorded telemetry")
    p.add_argument("--through-stage", type=int, default=4, choices=range(1, 6), metavar="N")
    with_config("report", cmd_report, "compare twin predictions against the field")
    with_config("optimize", cmd_optimize, "optimize EDFA gains and tilts on the twin and apply them")

    p = sub.add_parser("scenario", help="run a disruption scenario")
    ssub = p.add_subparsers(dest="scenario", required=True)
    fc = ssub.add_parser("fiber-cut", help="drop channels at one band edge, then recover")
    fc.add_argument("-c", "--config", default="config.ini")
    fc.add_argument("--drop", type=int, default=20)
    fc.add_argument("--band", choices=("C", "L"), default="L")
    fc.add_argument("--end", choices=("low", "high"), default="low")
    fc.add_argument(
        "--loading",
        choices=("cut-band-full", "current"),
        default="cut-band-full",
        help="pre-cut loading: the cut band full plus CUTs elsewhere (default), or the field's current loading",
    )
    fc.set_defaults(func=cmd_scenario)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
