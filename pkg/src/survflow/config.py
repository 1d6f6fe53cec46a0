"""Versioned JSON run configuration.

A config has a required ``schema_version`` and optional sections ``data``,
``model``, ``train``, ``eval`` and ``portfolio``.  Unknown keys anywhere are
rejected.  When ``data.dataset`` names one of the tuned architectures in
:data:`PRESETS`, that row supplies the model defaults; explicit ``model``
keys still win.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .dynamics import DynamicsConfig
from .odeint import SolverConfig
from .portfolio import ExperimentConfig
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


# S_pi S_sigma S_g L_pi L_sigma L_g K (L = number of hidden layers)
_TABLE = {
    "support": (4, 4, 12, 3, 3, 3, 16),
    "whas": (12, 8, 12, 4, 4, 3, 32),
    "rgbsg": (4, 4, 12, 3, 3, 3, 16),
    "metabric": (4, 4, 12, 3, 4, 4, 32),
}
# the synthetic benchmark uses the smallest tuned architecture
_TABLE["synthetic"] = _TABLE["support"]

PRESETS = {
    name: dict(pi_size=r[0], sigma_size=r[1], g_size=r[2], pi_depth=r[3], sigma_depth=r[4],
               g_depth=r[5], K=r[6])
    for name, r in _TABLE.items()
}


@dataclass
class DataConfig:
    dataset: str = "synthetic"
    path: str | None = None
    n: int = 3000
    d: int = 10
    p: float = 0.3
    beta_seed: int = 0
    censor_target: float = 0.8
    train_fraction: float = 0.7
    valid_fraction: float = 0.15


@dataclass
class EvalConfig:
    samples_per_record: int = 64
    risk: str = "pairwise"
    solver: str = "tsit5"
    rtol: float = 1e-4
    atol: float = 1e-6
    fixed_steps: int = 16
    calibration_points: int = 10

    def solver_config(self) -> SolverConfig:
        return SolverConfig(method=self.solver, rtol=self.rtol, atol=self.atol,
                            fixed_steps=self.fixed_steps)


@dataclass
class PortfolioConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    repetitions: int = 10
    universe_seed: int = 100


_MODEL_KEYS = {f.name for f in fields(DynamicsConfig)} - {"n_features"}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    portfolio: PortfolioConfig = field(default_factory=PortfolioConfig)
    schema_version: int = SCHEMA_VERSION

    def dynamics(self, n_features: int) -> DynamicsConfig:
        """Model architecture: preset row for the dataset, then explicit keys."""
        kw = dict(PRESETS.get(self.data.dataset.lower(), {}))
        kw.update(self.model)
        for key in ("breakpoints", "centers"):
            if key in kw:
                kw[key] = tuple(kw[key])
        try:
            return DynamicsConfig(n_features=n_features, **kw)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def to_dict(self) -> dict:
        out = {"schema_version": self.schema_version, "data": asdict(self.data),
               "model": dict(self.model), "train": asdict(self.train), "eval": asdict(self.eval),
               "portfolio": asdict(self.portfolio)}
        return out


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "schema_version" not in doc:
        raise ConfigError("missing required key schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc['schema_version']!r}")
    unknown = sorted(set(doc) - {"schema_version", "data", "model", "train", "eval", "portfolio"})
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    model = doc.get("model", {})
    if not isinstance(model, dict):
        raise ConfigError("model: expected an object")
    bad = sorted(set(model) - _MODEL_KEYS)
    if bad:
        raise ConfigError(f"model: unknown key(s) {', '.join(bad)}")
    pf = dict(doc.get("portfolio", {}))
    if not isinstance(pf, dict):
        raise ConfigError("portfolio: expected an object")
    exp = _build(ExperimentConfig, pf.pop("experiment", {}), "portfolio.experiment")
    cfg = RunConfig(
        data=_build(DataConfig, doc.get("data", {}), "data"),
        model=dict(model),
        train=_build(TrainConfig, doc.get("train", {}), "train"),
        eval=_build(EvalConfig, doc.get("eval", {}), "eval"),
        portfolio=_build(PortfolioConfig, {**pf, "experiment": exp}, "portfolio"),
    )
    if cfg.eval.risk not in ("pairwise", "mean_time"):
        raise ConfigError(f"eval: unknown risk {cfg.eval.risk!r}")
    return cfg


def load(path) -> RunConfig:
    """Read a config file; JSON syntax errors report line and column."""
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return from_dict(doc)
