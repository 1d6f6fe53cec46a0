"""Single-file model checkpoints.

Line 1 is a JSON header; line 2 is the hex encoding of a little-endian
float64 payload whose named segments are listed in the header.  Every
number that affects evaluation lives in the payload, so a loaded model
reproduces the saved one bitwise.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .dynamics import DynamicsConfig, FlowModel, build_model
from .odeint import SolverConfig
from .training import FitState

FORMAT = "survflow-checkpoint"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def _segments(model: FlowModel, state: FitState | None):
    segs = [("params", model.params()), ("x_mean", model.x_mean), ("x_scale", model.x_scale),
            ("time_affine", np.array([model.time_shift, model.time_scale]))]
    if state is not None:
        segs += [("fit.theta", state.theta), ("fit.best_theta", state.best_theta),
                 ("fit.m", state.m), ("fit.v", state.v),
                 ("fit.best_valid", np.array([state.best_valid])),
                 ("fit.train_loss", np.asarray(state.train_loss, dtype=float)),
                 ("fit.valid_loss", np.asarray(state.valid_loss, dtype=float))]
    return segs


def save(path, model: FlowModel, metadata: dict | None = None, state: FitState | None = None) -> None:
    """Write ``model`` (and optionally the optimizer state) to ``path``."""
    segs = _segments(model, state)
    header = {
        "format": FORMAT,
        "schema_version": SCHEMA_VERSION,
        "dynamics": asdict(model.cfg),
        "eval_solver": asdict(model.eval_solver),
        "layout": [[name, list(shape)] for name, shape in model.layout().segments],
        "segments": [[name, int(np.asarray(a).size)] for name, a in segs],
        "metadata": metadata or {},
    }
    if state is not None:
        header["fit"] = {"step": state.step, "epoch": state.epoch, "best_epoch": state.best_epoch,
                         "since_best": state.since_best, "stopped": state.stopped}
    payload = np.concatenate([np.asarray(a, dtype=float).ravel() for _, a in segs])
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        fh.write(payload.astype("<f8").tobytes().hex() + "\n")


def _read(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    try:
        header = json.loads(lines[0])
        raw = bytes.fromhex(lines[1])
    except (json.JSONDecodeError, ValueError, IndexError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema_version {header.get('schema_version')}")
    payload = np.frombuffer(raw, dtype="<f8").astype(float)
    total = sum(n for _, n in header["segments"])
    if payload.size != total:
        raise CheckpointError(f"{path}: payload has {payload.size} values, header expects {total}")
    arrays, pos = {}, 0
    for name, n in header["segments"]:
        arrays[name] = payload[pos:pos + n].copy()
        pos += n
    return header, arrays


def load(path):
    """Return ``(model, metadata)``."""
    model, header, _ = load_full(path)
    return model, header["metadata"]


def load_full(path):
    """Return ``(model, header, fit_state_or_None)``."""
    header, arrays = _read(path)
    dyn = dict(header["dynamics"])
    for key in ("breakpoints", "centers"):
        dyn[key] = tuple(dyn[key])
    cfg = DynamicsConfig(**dyn)
    skeleton = build_model(cfg, np.random.default_rng(0), eval_solver=SolverConfig(**header["eval_solver"]))
    layout = [[name, list(shape)] for name, shape in skeleton.layout().segments]
    if layout != header["layout"]:
        raise CheckpointError(f"{path}: parameter layout does not match the architecture")
    shift, scale = arrays["time_affine"]
    model = skeleton.with_params(arrays["params"])
    model.x_mean, model.x_scale = arrays["x_mean"], arrays["x_scale"]
    model.time_shift, model.time_scale = float(shift), float(scale)
    state = None
    if "fit" in header:
        f = header["fit"]
        state = FitState(theta=arrays["fit.theta"], best_theta=arrays["fit.best_theta"],
                         m=arrays["fit.m"], v=arrays["fit.v"], step=f["step"], epoch=f["epoch"],
                         best_valid=float(arrays["fit.best_valid"][0]), best_epoch=f["best_epoch"],
                         since_best=f["since_best"], train_loss=arrays["fit.train_loss"].tolist(),
                         valid_loss=arrays["fit.valid_loss"].tolist(), stopped=f["stopped"])
    return model, header, state
