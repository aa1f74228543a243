"""Versioned JSON persistence, figure-ready CSV series and JSON-lines telemetry."""

from __future__ import annotations

import csv
import io as _io
import json
import math
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .amplifier import EdfaConfig
from .calibration import CalibrationReport, TwinState
from .exceptions import ValidationError
from .field import DO_NOT_READ, GroundTruth, NoiseSpec, TelemetrySnapshot, event_from_dict, event_to_dict
from .link import LinkTopology, PropagationTrace
from .optimizer import OptimizationOutcome
from .qot import TransponderCurve
from .spectral import safe_dbm

DOCUMENT_VERSION = 1
CSV_DECIMALS = 9
SERIES_KINDS = ("power", "osnr", "gsnr")


# ---------------------------------------------------------------- encoding helpers


def _num(x):
    x = float(x)
    return None if not math.isfinite(x) else x


def _nums(a):
    return [_num(x) for x in np.asarray(a, float).ravel()]


def _arr(v):
    return np.array([np.nan if x is None else x for x in v], float)


def _curve_doc(c: TransponderCurve) -> dict:
    return {"snr_db": [float(x) for x in c.snr], "ber": [float(x) for x in c.ber]}


def _curve_from(d) -> TransponderCurve:
    return TransponderCurve(d["snr_db"], d["ber"])


def _configs_doc(configs: Mapping) -> list:
    return [{"site": k, "band": b, **c.to_dict()} for (k, b), c in sorted(configs.items())]


def _configs_from(rows) -> dict:
    return {(int(r["site"]), r["band"]): EdfaConfig.from_dict(r) for r in rows}


def _twin_doc(t: TwinState) -> dict:
    return {
        "estimate": t.estimate.to_dict(),
        "datasheet": t.datasheet.to_dict(),
        "curve": _curve_doc(t.curve),
        "loading": list(t.loading),
        "provenance": dict(sorted(t.provenance.items())),
        "residuals": t.residuals,
        "stage_completed": t.stage_completed,
        "flags": list(t.flags),
        "step": t.step,
    }


def _twin_from(d) -> TwinState:
    return TwinState(
        LinkTopology.from_dict(d["estimate"]),
        LinkTopology.from_dict(d["datasheet"]),
        _curve_from(d["curve"]),
        tuple(d["loading"]),
        dict(d["provenance"]),
        d["residuals"],
        int(d["stage_completed"]),
        tuple(d["flags"]),
        float(d["step"]),
    )


def _field_doc(g: GroundTruth) -> dict:
    return {
        "notice": DO_NOT_READ,
        "truth": g.truth.to_dict(),
        "noise": g.noise.to_dict(),
        "seed": g.seed,
        "curve": _curve_doc(g.curve),
        "active": [bool(a) for a in g.active],
        "step": g.step,
        "event_log": [event_to_dict(e) for e in g.event_log],
        "telemetry": [s.to_dict() for s in g.telemetry],
        "sequence_number": g.sequence_number,
        "rng_state": g.rng.bit_generator.state,
    }


def _field_from(d) -> GroundTruth:
    g = GroundTruth(
        LinkTopology.from_dict(d["truth"]),
        NoiseSpec.from_dict(d["noise"]),
        int(d["seed"]),
        _curve_from(d["curve"]),
        d["active"],
        float(d["step"]),
    )
    g.event_log = [event_from_dict(e) for e in d["event_log"]]
    g.telemetry = [TelemetrySnapshot.from_dict(s) for s in d["telemetry"]]
    g.sequence_number = int(d["sequence_number"])
    g.rng.bit_generator.state = d["rng_state"]
    return g


def _report_doc(r: CalibrationReport) -> dict:
    return {
        "label": r.label,
        "frequency": _nums(r.frequency),
        "active": [bool(a) for a in r.active],
        "power_error": {k: _nums(v) for k, v in sorted(r.power_error.items())},
        "osnr_error": {k: _nums(v) for k, v in sorted(r.osnr_error.items())},
        "gsnr_error": _nums(r.gsnr_error),
        "span_attribution": _nums(r.span_attribution),
        "flagged_spans": list(r.flagged_spans),
        "loadings": [
            {
                "active": [bool(a) for a in p["active"]],
                "gsnr_error": _nums(p["gsnr_error"]),
                "max_abs": p["max_abs"],
                "span_attribution": _nums(p["span_attribution"]),
            }
            for p in r.loadings
        ],
        "inconclusive": r.inconclusive,
        "summary": r.summary(),
    }


def _report_from(d) -> CalibrationReport:
    return CalibrationReport(
        d["label"],
        _arr(d["frequency"]),
        np.array(d["active"], bool),
        {k: _arr(v) for k, v in d["power_error"].items()},
        {k: _arr(v) for k, v in d["osnr_error"].items()},
        _arr(d["gsnr_error"]),
        _arr(d["span_attribution"]),
        tuple(d["flagged_spans"]),
        tuple(
            {
                "active": np.array(p["active"], bool),
                "gsnr_error": _arr(p["gsnr_error"]),
                "max_abs": p["max_abs"],
                "span_attribution": _arr(p["span_attribution"]),
            }
            for p in d["loadings"]
        ),
        bool(d["inconclusive"]),
    )


def _outcome_from(d) -> OptimizationOutcome:
    return OptimizationOutcome(
        _configs_from(d["best_configs"]),
        _configs_from(d["init_configs"]),
        tuple(d["trajectory"]),
        np.nan if d["objective_init"] is None else d["objective_init"],
        np.nan if d["objective_best"] is None else d["objective_best"],
        d["status"],
        None if d["active"] is None else np.array(d["active"], bool),
        {k: _arr(v) for k, v in d["before"].items()},
        {k: _arr(v) for k, v in d["after"].items()},
        int(d["n_evals"]),
    )


def _outcome_doc(o: OptimizationOutcome) -> dict:
    d = o.to_dict()
    d["objective_init"] = _num(d["objective_init"])
    d["objective_best"] = _num(d["objective_best"])
    return d


_CODECS = {
    "twin_state": (TwinState, _twin_doc, _twin_from),
    "ground_truth": (GroundTruth, _field_doc, _field_from),
    "topology": (LinkTopology, lambda t: t.to_dict(), LinkTopology.from_dict),
    "calibration_report": (CalibrationReport, _report_doc, _report_from),
    "optimization_outcome": (OptimizationOutcome, _outcome_doc, _outcome_from),
}


# ---------------------------------------------------------------- documents


def to_document(obj) -> dict:
    for kind, (cls, enc, _) in _CODECS.items():
        if isinstance(obj, cls):
            return {"schema_version": DOCUMENT_VERSION, "type": kind, "data": enc(obj)}
    raise ValidationError(f"cannot persist objects of type {type(obj).__name__}")


def from_document(doc: dict, source: str = "<document>"):
    if not isinstance(doc, dict):
        raise ValidationError(f"{source}: top level must be an object")
    if doc.get("schema_version") != DOCUMENT_VERSION:
        raise ValidationError(f"{source}: unsupported schema_version {doc.get('schema_version')!r}")
    kind = doc.get("type")
    if kind not in _CODECS:
        raise ValidationError(f"{source}: unknown document type {kind!r}")
    try:
        return _CODECS[kind][2](doc["data"])
    except KeyError as exc:
        raise ValidationError(f"{source}: {kind} document is missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise ValidationError(f"{source}: {exc}") from exc
        raise ValidationError(f"{source}: malformed {kind} document: {exc}") from exc


def dumps(obj) -> str:
    return json.dumps(to_document(obj), sort_keys=True, indent=1) + "\n"


def loads(text: str, source: str = "<string>"):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{source}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    return from_document(doc, source)


def persist(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def restore(path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such file")
    return loads(path.read_text(), str(path))


# ---------------------------------------------------------------- CSV series


def _fmt(v) -> str:
    v = float(v)
    return "" if not math.isfinite(v) else f"{v:.{CSV_DECIMALS}f}"


def _series_of(source, kind: str):
    """Per-channel (frequency, values) for one source."""
    if isinstance(source, PropagationTrace):
        act = source.active
        rx = source.receiver
        if kind == "power":
            vals = np.where(act, safe_dbm(rx.p_sig + rx.p_ase), np.nan)
        elif kind == "osnr":
            vals = rx.osnr
        else:
            vals = rx.gsnr
        return source.grid.frequencies, vals
    if isinstance(source, CalibrationReport):
        if kind == "power":
            vals = source.power_error["rx"]
        elif kind == "osnr":
            vals = source.osnr_error["rx"]
        else:
            vals = source.gsnr_error
        return source.frequency, vals
    raise ValidationError(f"cannot emit a series from {type(source).__name__}")


def series_csv(source, kind: str) -> str:
    """CSV text: ``frequency_thz,value`` or ``frequency_thz,<label>...`` for a mapping."""
    if kind not in SERIES_KINDS:
        raise ValidationError(f"series kind must be one of {SERIES_KINDS}, got {kind!r}")
    if isinstance(source, Mapping):
        labels = list(source)
        cols = [_series_of(source[k], kind) for k in labels]
    else:
        labels = ["value"]
        cols = [_series_of(source, kind)]
    if not cols or len(cols[0][0]) == 0:
        raise ValidationError("cannot emit an empty series")
    freq = np.asarray(cols[0][0], float)
    for f, v in cols:
        if not np.array_equal(np.asarray(f, float), freq):
            raise ValidationError("series being compared use different channel grids")
        if np.all(~np.isfinite(np.asarray(v, float))):
            raise ValidationError("cannot emit a series with no values")
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frequency_thz"] + labels)
    for i, f in enumerate(freq):
        w.writerow([_fmt(f)] + [_fmt(np.asarray(v, float)[i]) for _, v in cols])
    return buf.getvalue()


def emit_series(source, kind: str, path) -> Path:
    path = Path(path)
    text = series_csv(source, kind)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def report_csv(report: CalibrationReport) -> str:
    """One row per channel per probe: power, OSNR and GSNR errors (dB)."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["probe", "frequency_thz", "active", "power_error_db", "osnr_error_db", "gsnr_error_db"])
    nan = np.full(len(report.frequency), np.nan)
    for probe in sorted(set(report.power_error) | set(report.osnr_error)):
        p = report.power_error.get(probe, nan)
        o = report.osnr_error.get(probe, nan)
        g = report.gsnr_error if probe == "rx" else nan
        for i, f in enumerate(report.frequency):
            w.writerow([probe, _fmt(f), int(report.active[i]), _fmt(p[i]), _fmt(o[i]), _fmt(g[i])])
    return buf.getvalue()


def read_series(path) -> dict:
    """Columns of a series CSV as float arrays (empty cells become NaN)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    return {h: np.array([float(r[i]) if r[i] else np.nan for r in body]) for i, h in enumerate(header)}


# ---------------------------------------------------------------- telemetry


def telemetry_lines(snapshots: Iterable[TelemetrySnapshot]) -> str:
    return "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in snapshots)


def write_telemetry(snapshots: Iterable[TelemetrySnapshot], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(telemetry_lines(snapshots))
    return path


def read_telemetry(path) -> list:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(TelemetrySnapshot.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{n}: malformed telemetry record ({exc})") from exc
    return out


def latest_snapshots(snapshots: Iterable[TelemetrySnapshot]) -> dict:
    """Newest snapshot per ``(kind, site)``."""
    out = {}
    for s in sorted(snapshots, key=lambda s: s.sequence_number):
        out[(s.kind, s.site)] = s
    return out


def write_events(events, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([event_to_dict(e) for e in events], sort_keys=True, indent=1) + "\n")
    return path


def read_events(path) -> list:
    try:
        return [event_from_dict(d) for d in json.loads(Path(path).read_text())]
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON at line {exc.lineno}") from exc


def configs_document(configs: Mapping, loading) -> dict:
    """Known network status: amplifier configs and channel loading."""
    return {"configs": _configs_doc(configs), "loading": [bool(a) for a in loading]}


def configs_from_document(d) -> tuple:
    try:
        return _configs_from(d["configs"]), np.array(d["loading"], bool)
    except KeyError as exc:
        raise ValidationError(f"network status is missing field {exc}") from exc
