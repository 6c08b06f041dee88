"""Run configuration: flat ``key = value`` text with dotted keys.

Both of these spell the same setting::

    model.d_prime = 256

    [model]
    d_prime = 256

Values may reference environment variables (``$REVGN_DATA_DIR/mnist``).
Comma-separated learning rates define a sweep.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

from .linalg import Damp, Noise, Truncate
from .optim import AdamConfig, GNConfig, SGDConfig, make_pinv_policy

log = logging.getLogger(__name__)

_ROOT = "__root__"


class ConfigError(ValueError):
    """The configuration text is malformed or inconsistent."""


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def parse_flat(text):
    """Parse config text into a flat ``{dotted.key: str}`` dict."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_ROOT}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    flat = {}
    for section in parser.sections():
        prefix = "" if section == _ROOT else section + "."
        for key, value in parser.items(section):
            flat[prefix + key] = os.path.expandvars(value.strip())
    return flat


@dataclass
class DatasetSpec:
    name: str = "mnist"
    path: Optional[str] = None
    subset: Optional[int] = None
    subset_seed: int = 0
    test_subset: Optional[int] = None
    augment: bool = False
    d: int = 8
    n: int = 8
    teacher_seed: int = 0
    target_cols: Optional[str] = None


@dataclass
class ModelSpec:
    d_prime: int = 256
    blocks: int = 2
    d_y: Optional[int] = None
    init: str = "gaussian"
    no_bottleneck: bool = False
    activation: str = "relu"


@dataclass
class OptimSpec:
    kind: str = "gn"
    lrs: List[float] = field(default_factory=lambda: [1.0])
    gn: GNConfig = field(default_factory=GNConfig)
    sgd: SGDConfig = field(default_factory=SGDConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    schedule: Optional[list] = None

    def config_for(self, kind, lr=None):
        base = getattr(self, kind)
        if lr is None:
            return base
        return type(base)(**{**_config_fields(base), "lr": lr})


def _config_fields(cfg):
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


@dataclass
class AnalysisSpec:
    probe_size: int = 100
    probe_seed: int = 0
    ntk: bool = False
    cka: bool = False
    every: int = 1


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)
    loss: str = "cross_entropy"
    regime: str = "minibatch"
    batch_size: int = 128
    epochs: int = 10
    seeds: List[int] = field(default_factory=lambda: [0])
    target_acc: Optional[float] = None
    batch_change: bool = True
    eval_test: bool = True
    checkpoint_every: int = 1
    output: str = "runs/default"
    name: str = "run"

    def to_dict(self):
        out = asdict(self)
        gn = self.optim.gn
        out["optim"]["gn"]["pinv"] = _policy_dict(gn.pinv)
        return out

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _policy_dict(p):
    if isinstance(p, Truncate):
        return {"name": "truncate", "rtol": p.rtol, "atol": p.atol}
    if isinstance(p, Damp):
        return {"name": "damp", "frac": p.frac}
    if isinstance(p, Noise):
        return {"name": "noise", "frac": p.frac, "seed": p.seed}
    raise TypeError(p)


_SIMPLE = {
    "dataset.name": ("dataset", "name", str),
    "dataset.path": ("dataset", "path", str),
    "dataset.subset": ("dataset", "subset", int),
    "dataset.subset_seed": ("dataset", "subset_seed", int),
    "dataset.test_subset": ("dataset", "test_subset", int),
    "dataset.augment": ("dataset", "augment", _bool),
    "dataset.d": ("dataset", "d", int),
    "dataset.n": ("dataset", "n", int),
    "dataset.teacher_seed": ("dataset", "teacher_seed", int),
    "dataset.target_cols": ("dataset", "target_cols", str),
    "model.d_prime": ("model", "d_prime", int),
    "model.blocks": ("model", "blocks", int),
    "model.d_y": ("model", "d_y", int),
    "model.init": ("model", "init", str),
    "model.no_bottleneck": ("model", "no_bottleneck", _bool),
    "model.activation": ("model", "activation", str),
    "optim.kind": ("optim", "kind", str),
    "analysis.probe_size": ("analysis", "probe_size", int),
    "analysis.probe_seed": ("analysis", "probe_seed", int),
    "analysis.ntk": ("analysis", "ntk", _bool),
    "analysis.cka": ("analysis", "cka", _bool),
    "analysis.every": ("analysis", "every", int),
    "loss": (None, "loss", str),
    "train.regime": (None, "regime", str),
    "train.batch_size": (None, "batch_size", int),
    "train.epochs": (None, "epochs", int),
    "train.seeds": (None, "seeds", _ints),
    "train.target_acc": (None, "target_acc", float),
    "train.batch_change": (None, "batch_change", _bool),
    "train.eval_test": (None, "eval_test", _bool),
    "train.checkpoint_every": (None, "checkpoint_every", int),
    "output.dir": (None, "output", str),
    "name": (None, "name", str),
}

_OPT_KEYS = {
    "gn": {"weight_decay": float},
    "sgd": {"weight_decay": float},
    "adam": {"beta1": float, "beta2": float, "eps": float, "weight_decay": float},
}


def from_flat(flat):
    """Build a :class:`RunConfig` from a flat dotted-key dict."""
    cfg = RunConfig()
    flat = dict(flat)
    pinv = {}
    opt_kw = {"gn": {}, "sgd": {}, "adam": {}}
    lrs = {}
    for key, raw in flat.items():
        try:
            if key in _SIMPLE:
                part, attr, conv = _SIMPLE[key]
                target = cfg if part is None else getattr(cfg, part)
                setattr(target, attr, conv(raw))
            elif key == "optim.schedule":
                cfg.optim.schedule = _schedule(raw)
            elif key.startswith("optim.gn.pinv"):
                pinv[key.rsplit(".", 1)[1] if key != "optim.gn.pinv" else "name"] = raw
            elif key.count(".") == 2 and key.startswith("optim."):
                _, kind, attr = key.split(".")
                if kind not in _OPT_KEYS:
                    raise ConfigError(f"unknown optimizer {kind!r}")
                if attr == "lr":
                    lrs[kind] = _floats(raw)
                elif attr in _OPT_KEYS[kind]:
                    opt_kw[kind]["eps_hat" if attr == "eps" else attr] = _OPT_KEYS[kind][attr](raw)
                else:
                    raise ConfigError(f"unknown key {key!r}")
            else:
                raise ConfigError(f"unknown key {key!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: {exc}") from exc
    try:
        policy = make_pinv_policy(
            pinv.get("name", "truncate"),
            float(pinv.get("rtol", 0.01)), float(pinv.get("atol", 1e-5)),
            float(pinv["frac"]) if "frac" in pinv else None, int(pinv.get("seed", 0)))
        cfg.optim.gn = GNConfig(lr=lrs.get("gn", [1.0])[0], pinv=policy, **opt_kw["gn"])
        cfg.optim.sgd = SGDConfig(lr=lrs.get("sgd", [0.1])[0], **opt_kw["sgd"])
        cfg.optim.adam = AdamConfig(lr=lrs.get("adam", [1e-3])[0], **opt_kw["adam"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    kind = cfg.optim.kind
    if kind not in ("gn", "sgd", "adam"):
        raise ConfigError(f"unknown optimizer kind {kind!r}")
    cfg.optim.lrs = lrs.get(kind, [getattr(cfg.optim, kind).lr])
    validate(cfg)
    return cfg


def _schedule(raw):
    out = []
    for item in str(raw).split(","):
        if not item.strip():
            continue
        start, _, name = item.partition(":")
        out.append((int(start), name.strip()))
    return out


def validate(cfg):
    if not cfg.seeds:
        raise ConfigError("train.seeds must list at least one seed")
    if cfg.regime not in ("full_batch", "minibatch"):
        raise ConfigError(f"unknown regime {cfg.regime!r}")
    if cfg.loss not in ("square", "cross_entropy"):
        raise ConfigError(f"unknown loss {cfg.loss!r}")
    if cfg.epochs < 0:
        raise ConfigError("epochs must be non-negative")
    if cfg.regime == "minibatch" and cfg.batch_size > cfg.model.d_prime:
        if cfg.model.no_bottleneck:
            log.warning("batch size %d exceeds bottleneck width %d (no-bottleneck model)",
                        cfg.batch_size, cfg.model.d_prime)
        else:
            raise ConfigError(f"train.batch_size {cfg.batch_size} exceeds model.d_prime "
                              f"{cfg.model.d_prime}")
    if cfg.dataset.path and cfg.dataset.name not in ("synthetic",):
        if not Path(cfg.dataset.path).exists():
            raise ConfigError(f"dataset path does not exist: {cfg.dataset.path}")
    if cfg.optim.schedule:
        from .optim import switch_schedule

        try:
            switch_schedule(0, cfg.optim.schedule)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.optim.schedule[0][0] != 0:
            raise ConfigError("optim.schedule must start at epoch 0")
        for _, name in cfg.optim.schedule:
            if name not in ("gn", "sgd", "adam"):
                raise ConfigError(f"unknown optimizer {name!r} in schedule")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_flat(parse_flat(text))
