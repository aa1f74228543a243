import json

import numpy as np
import pytest

from cltwin import io
from cltwin.calibration import accuracy_report
from cltwin.exceptions import ValidationError
from cltwin.field import FiberCut, NoiseSpec, PerturbationSpec, SetLoading, make_field
from cltwin.link import propagate_link
from cltwin.optimizer import OptimizationProblem, optimize


def test_topology_round_trip(replica, tmp_path):
    path = io.persist(replica, tmp_path / "topo.json")
    assert io.restore(path) == replica


def test_twin_round_trip_predicts_identically(calibrated_noise_free):
    _, hist = calibrated_noise_free[2]
    twin = hist[-1]
    back = io.loads(io.dumps(twin))
    assert back.estimate == twin.estimate
    assert back.provenance == twin.provenance and back.stage_completed == 4
    assert np.array_equal(back.predict().receiver.gsnr, twin.predict().receiver.gsnr)
    assert io.dumps(back) == io.dumps(twin)


def test_ground_truth_round_trip_continues_identically(replica):
    fld = make_field(replica, seed=9)
    fld.query("ocm", "amp1")
    fld.apply_event(FiberCut("L", "low_freq", 4))
    back = io.loads(io.dumps(fld))
    assert back.truth == fld.truth and back.event_log == fld.event_log
    assert back.sequence_number == fld.sequence_number
    assert back.query("ocm", "amp4").values == fld.query("ocm", "amp4").values


def test_report_and_outcome_round_trip(calibrated_noise_free, replica, curve):
    fld, hist = calibrated_noise_free[0]
    rep = accuracy_report(hist[-1], fld)
    back = io.loads(io.dumps(rep))
    assert back.summary() == rep.summary()
    assert np.array_equal(back.gsnr_error, rep.gsnr_error, equal_nan=True)
    out = optimize(OptimizationProblem(hist[0], max_steps=1), hist[0].estimate.configs())
    again = io.loads(io.dumps(out))
    assert again.best_configs == out.best_configs and again.trajectory == out.trajectory


def test_tampered_documents_rejected(replica):
    doc = json.loads(io.dumps(replica))
    doc["schema_version"] = 2
    with pytest.raises(ValidationError, match="schema_version"):
        io.from_document(doc)
    doc = json.loads(io.dumps(replica))
    doc["type"] = "spreadsheet"
    with pytest.raises(ValidationError, match="unknown document type"):
        io.from_document(doc)
    with pytest.raises(ValidationError, match="invalid JSON"):
        io.loads("{not json", "x.json")
    with pytest.raises(ValidationError):
        io.to_document(object())


def test_series_csv_matches_trace(replica, tmp_path):
    tr = propagate_link(replica, replica.launch_spectrum())
    cols = io.read_series(io.emit_series(tr, "gsnr", tmp_path / "g.csv"))
    assert np.allclose(cols["frequency_thz"], replica.grid.frequencies, atol=1e-9)
    assert np.allclose(cols["value"], tr.receiver.gsnr, atol=1e-9)


def test_stage_comparison_csv_shape(calibrated_noise_free, tmp_path):
    fld, hist = calibrated_noise_free[0]
    series = {
        "stage1": hist[0].predict(),
        "stage2": hist[1].predict(),
        "stage34": hist[-1].predict(),
        "truth": fld.trace(),
    }
    text = io.series_csv(series, "power")
    lines = text.strip().split("\n")
    assert lines[0] == "frequency_thz,stage1,stage2,stage34,truth"
    assert len(lines) == 97
    assert all(len(line.split(",")) == 5 for line in lines)


def test_dark_channels_are_empty_cells(replica, tmp_path):
    fld = make_field(replica, PerturbationSpec.zero(), noise=NoiseSpec.none())
    mask = np.ones(96, bool)
    mask[:3] = False
    fld.apply_event(SetLoading(mask))
    cols = io.read_series(io.emit_series(fld.trace(), "power", tmp_path / "p.csv"))
    assert np.isnan(cols["value"][:3]).all() and np.isfinite(cols["value"][3:]).all()


def test_series_validation(replica):
    tr = propagate_link(replica, replica.launch_spectrum())
    with pytest.raises(ValidationError):
        io.series_csv(tr, "ber")
    with pytest.raises(ValidationError):
        io.series_csv(42, "power")


def test_telemetry_jsonl_round_trip(replica, tmp_path):
    fld = make_field(replica, seed=4)
    fld.query("totals", "amp1")
    fld.query("ocm", "amp2")
    fld.query("osnr", "amp2")
    path = io.write_telemetry(fld.telemetry, tmp_path / "t.jsonl")
    back = io.read_telemetry(path)
    assert [s.to_dict() for s in back] == [s.to_dict() for s in fld.telemetry]
    latest = io.latest_snapshots(back)
    assert set(latest) == {("totals", "amp1"), ("ocm", "amp2"), ("osnr", "amp2")}
    path.write_text(path.read_text() + "{broken\n")
    with pytest.raises(ValidationError, match=":4:"):
        io.read_telemetry(path)


def test_events_round_trip(tmp_path):
    events = [FiberCut("L", "low_freq", 20), SetLoading(tuple([True] * 96))]
    assert io.read_events(io.write_events(events, tmp_path / "e.json")) == events
