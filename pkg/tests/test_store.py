import json

import numpy as np
import pytest

from conformal_hj import store
from conformal_hj.conformal import CalibratedValueFunction, CalibrationPoint
from conformal_hj.exceptions import IntegrityError, ResolutionError, UnsupportedVersionError
from conformal_hj.highway import HighwaySystem
from conformal_hj.learn import MLP, SafetyValueRegressor


@pytest.fixture
def model():
    sys = HighwaySystem()
    rng = np.random.default_rng(0)
    net = MLP.initialize([14, 16, 16, 1], rng, x_shift=rng.normal(size=14),
                         x_scale=rng.uniform(0.5, 2, 14), y_shift=0.1 + 1e-17, y_scale=3.3)
    return SafetyValueRegressor.from_network(sys, net, gamma=0.999)


def test_model_round_trip_bit_identical(tmp_path, model):
    digest, path = store.save_model(tmp_path, model, {"lr": 0.01})
    assert path == tmp_path / "models" / f"{digest}.model.json"
    loaded = store.load_model(path)
    X = model.system.sample_initial_batch(np.random.default_rng(1), 100)
    assert loaded.predict(X).tobytes() == model.predict(X).tobytes()
    assert loaded.system.params() == model.system.params()
    assert loaded.gamma == model.gamma


def test_hash_is_deterministic_and_content_sensitive(tmp_path, model):
    d1, _ = store.save_model(tmp_path, model)
    d2, _ = store.save_model(tmp_path, model)
    assert d1 == d2
    model.network_.biases[0][0] = np.nextafter(model.network_.biases[0][0], 1.0)
    d3, _ = store.save_model(tmp_path, model)
    assert d3 != d1


def test_future_version_rejected(tmp_path, model):
    _, path = store.save_model(tmp_path, model)
    env = json.loads(path.read_text())
    env["format_version"] = store.FORMAT_VERSION + 1
    env["hash"] = store.content_hash(env)
    path.write_text(json.dumps(env))
    with pytest.raises(UnsupportedVersionError):
        store.load_model(path)


def test_tampered_artifact_rejected(tmp_path, model):
    _, path = store.save_model(tmp_path, model)
    env = json.loads(path.read_text())
    env["gamma"] = 0.5
    path.write_text(json.dumps(env))
    with pytest.raises(IntegrityError):
        store.load_model(path)


def test_missing_artifact(tmp_path):
    with pytest.raises(ResolutionError):
        store.load_model(tmp_path / "models" / "nope.model.json")


def test_calibration_round_trip_quantile(tmp_path, model):
    scores = np.random.default_rng(2).exponential(size=10_000)
    cal = CalibratedValueFunction(model, 0.06).fit_scores(scores)
    before = cal.quantile(0.06)
    digest, path = store.save_calibration(tmp_path, cal, "abc", meta={"n_traj": 10_000})
    loaded, env = store.load_calibration(path, model)
    assert loaded.quantile(0.06) == before
    assert env["model_hash"] == "abc" and loaded.n_calibration_ == 10_000


def test_calibration_points_are_stored(tmp_path, model):
    pts = [CalibrationPoint(np.arange(10.0) + i, 1.0 + i, 0.5, 0.5 + i) for i in range(3)]
    cal = CalibratedValueFunction(model, 0.1).fit_scores([p.score for p in pts])
    _, path = store.save_calibration(tmp_path, cal, "abc", pts)
    env = store.read_envelope(path, "calibration")
    np.testing.assert_array_equal(store.decode_array(env["states"])[2], np.arange(10.0) + 2)


def test_trace_and_report_io(tmp_path):
    recs = [{"step": 0, "controller": "nominal"}, {"step": 1, "controller": "safe"}]
    store.append_trace_record(tmp_path, "ep-0", recs)
    assert store.read_trace(tmp_path, "ep-0") == recs
    store.write_report(tmp_path, "r", {"a": 1})
    store.write_report(tmp_path, "r", {"a": 2})
    assert store.read_report(tmp_path, "r") == {"a": 2}
    assert not list((tmp_path / "reports").glob(".*tmp"))


def test_manifest(tmp_path):
    store.write_manifest(tmp_path, "train-x", "train", {"k": 1}, 3, produced=["h1"])
    m = store.read_manifest(tmp_path, "train-x")
    assert m["produced"] == ["h1"] and m["seed"] == 3 and "timestamp" in m
    with pytest.raises(ResolutionError):
        store.read_manifest(tmp_path, "missing")


def test_array_encoding_is_little_endian_float64():
    block = store.encode_array(np.array([1.0, -2.5]))
    assert block["dtype"] == "<f8" and block["shape"] == [2]
    np.testing.assert_array_equal(store.decode_array(block), [1.0, -2.5])
