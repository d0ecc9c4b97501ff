"""Versioned, content-hashed persistence of models, calibrations, traces and reports.

Artifacts are JSON envelopes. Numeric arrays are stored as base64 blocks of
little-endian float64 so that a save/load round trip is bit-exact, while the
surrounding metadata stays readable. The content hash is the SHA-256 of the
canonical JSON encoding of the envelope without its ``hash`` field. Every
write goes to a temporary file in the target directory and is then renamed
into place, so readers never observe a partial file.

Layout below an output root::

    runs/<run-id>/manifest.json
    models/<hash>.model.json
    calib/<hash>.calib.json
    traces/<episode>.jsonl
    reports/<name>.json
"""

import base64
import datetime
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .conformal import CalibratedValueFunction
from .exceptions import ArtifactError, IntegrityError, ResolutionError, UnsupportedVersionError
from .learn import MLP, SafetyValueRegressor
from .systems import make_system, system_spec

FORMAT_VERSION = 1


# -- encoding helpers ---------------------------------------------------------

def encode_array(a):
    a = np.array(a, dtype="<f8", order="C")
    return {"dtype": "<f8", "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(block):
    if block.get("dtype") != "<f8":
        raise ArtifactError(f"unsupported array dtype {block.get('dtype')!r}")
    raw = base64.b64decode(block["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(tuple(block["shape"])).astype(float)


def canonical_bytes(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


def content_hash(envelope):
    body = {k: v for k, v in envelope.items() if k != "hash"}
    return hashlib.sha256(canonical_bytes(body)).hexdigest()


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_json(path, obj):
    return atomic_write_bytes(path, json.dumps(obj, indent=1, sort_keys=True).encode("utf-8") + b"\n")


def _seal(envelope):
    envelope = dict(envelope, format_version=FORMAT_VERSION)
    envelope["hash"] = content_hash(envelope)
    return envelope


def read_envelope(path, kind):
    path = Path(path)
    if not path.exists():
        raise ResolutionError(f"artifact not found: {path}")
    try:
        env = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: not valid JSON ({exc})") from exc
    version = env.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: format_version {version!r} is not supported (expected {FORMAT_VERSION})")
    if env.get("kind") != kind:
        raise ArtifactError(f"{path}: expected a {kind} artifact, found {env.get('kind')!r}")
    if env.get("hash") != content_hash(env):
        raise IntegrityError(f"{path}: content hash mismatch")
    return env


# -- models -------------------------------------------------------------------

def model_envelope(estimator, train_config=None):
    net = estimator.network_
    return _seal({
        "kind": "model",
        "system": system_spec(estimator.system),
        "gamma": float(estimator.gamma),
        "sizes": net.sizes,
        "network": {
            "weights": [encode_array(w) for w in net.weights],
            "biases": [encode_array(b) for b in net.biases],
            "x_shift": encode_array(net.x_shift),
            "x_scale": encode_array(net.x_scale),
            "y_shift": encode_array(net.y_shift),
            "y_scale": encode_array(net.y_scale),
        },
        "train_config": train_config,
    })


def model_from_envelope(env, system=None):
    n = env["network"]
    net = MLP([decode_array(w) for w in n["weights"]], [decode_array(b) for b in n["biases"]],
              decode_array(n["x_shift"]), decode_array(n["x_scale"]),
              float(decode_array(n["y_shift"])), float(decode_array(n["y_scale"])))
    if net.sizes != env["sizes"]:
        raise IntegrityError(f"layer sizes {net.sizes} disagree with header {env['sizes']}")
    system = make_system(**env["system"]) if system is None else system
    return SafetyValueRegressor.from_network(system, net, gamma=env["gamma"])


def save_model(root, estimator, train_config=None):
    """Write ``models/<hash>.model.json``; returns ``(hash, path)``."""
    env = model_envelope(estimator, train_config)
    path = Path(root) / "models" / f"{env['hash']}.model.json"
    atomic_write_json(path, env)
    return env["hash"], path


def model_path(root, digest):
    return Path(root) / "models" / f"{digest}.model.json"


def load_model(path, system=None):
    return model_from_envelope(read_envelope(path, "model"), system)


# -- calibrations -------------------------------------------------------------

def calibration_envelope(cal, model_hash, points=None, meta=None):
    env = {"kind": "calibration", "model_hash": model_hash, "alpha": float(cal.alpha),
           "n": cal.n_calibration_, "scores": encode_array(cal.scores_), "meta": meta or {}}
    if points:
        env["states"] = encode_array(np.array([p.state for p in points]))
        env["v_theta"] = encode_array([p.v_theta for p in points])
        env["v_star"] = encode_array([p.v_star for p in points])
    return _seal(env)


def save_calibration(root, cal, model_hash, points=None, meta=None):
    """Write ``calib/<hash>.calib.json``; returns ``(hash, path)``."""
    env = calibration_envelope(cal, model_hash, points, meta)
    path = Path(root) / "calib" / f"{env['hash']}.calib.json"
    atomic_write_json(path, env)
    return env["hash"], path


def calib_path(root, digest):
    return Path(root) / "calib" / f"{digest}.calib.json"


def load_calibration(path, estimator=None):
    """Return ``(CalibratedValueFunction, envelope)``.

    ``estimator`` is attached as the calibrated model; pass the model loaded
    from ``envelope["model_hash"]``.
    """
    env = read_envelope(path, "calibration")
    scores = decode_array(env["scores"])
    if scores.size != env["n"]:
        raise IntegrityError(f"{path}: header says n={env['n']} but holds {scores.size} scores")
    cal = CalibratedValueFunction(estimator, env["alpha"]).fit_scores(scores)
    return cal, env


# -- traces, reports, manifests -----------------------------------------------

def append_trace_record(root, episode, records):
    """Write one episode's step records as ``traces/<episode>.jsonl`` in one atomic step."""
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    return atomic_write_bytes(Path(root) / "traces" / f"{episode}.jsonl", lines.encode("utf-8"))


def read_trace(root, episode):
    path = Path(root) / "traces" / f"{episode}.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines() if line]


def write_report(root, name, report):
    return atomic_write_json(Path(root) / "reports" / f"{name}.json", report)


def read_report(root, name):
    path = Path(root) / "reports" / f"{name}.json"
    if not path.exists():
        raise ResolutionError(f"report not found: {path}")
    return json.loads(path.read_text())


def write_manifest(root, run_id, command, config, seed, consumed=(), produced=(), extra=None):
    """Record a command invocation; the only artifact carrying wall-clock time."""
    now = datetime.datetime.now(datetime.timezone.utc).isoformat()
    manifest = {"run_id": run_id, "command": command, "config": config, "seed": seed,
                "consumed": list(consumed), "produced": list(produced),
                "format_version": FORMAT_VERSION, "timestamp": now}
    if extra:
        manifest.update(extra)
    return atomic_write_json(Path(root) / "runs" / run_id / "manifest.json", manifest)


def read_manifest(root, run_id):
    path = Path(root) / "runs" / run_id / "manifest.json"
    if not path.exists():
        raise ResolutionError(f"no manifest for run {run_id!r} under {root}")
    return json.loads(path.read_text())
