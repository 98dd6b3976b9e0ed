"""Experiment configuration: YAML in, validated dataclasses out.

Grammar (YAML mapping; every key optional unless noted)::

    seed: 0                       # drives data, init and shuffling seeds
    output_dir: runs/example      # required
    data:
      source: gaussian            # gaussian | csv
      gaussian: {means: [[-1, 0], [1, 0]], scale: 0.7, n_per_class: 2500}
      csv: {train: path.csv, test: null}   # test null -> split from train
      test_fraction: 0.2          # balanced test split (ignored when csv.test is set)
      imbalance: {kind: long_tailed, rho: 100, minority_classes: null}   # or null
    model:
      layer_sizes: [2, 16, 16, 2]
    train:
      total_epochs: 60
      transition_epoch: 30        # null -> total_epochs // 2
      batch_size: 128
      base_lr: 0.1
      warmup_epochs: 5
      decay_points: [[48, 0.1]]   # [epoch, factor] pairs
      momentum: 0.9
      weight_decay: 2.0e-4
    loss:
      phase1: {kind: ce}
      phase2: {kind: ib, gamma: 0, beta: 0, alpha: null, epsilon: 1.0e-3, norm: L1, renormalize: false}
    report:
      top_m: 20
      k_for_topk: 1

Sub-seeds are derived from ``seed`` and a fixed name ("data", "split",
"imbalance", "init", "shuffle") so the whole run is a function of one
integer. ``resolve`` materialises every default; dumping that mapping and
loading it back reproduces the same run.
"""

from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from ibloss.data import GaussianMixtureSpec, ImbalanceSpec
from ibloss.errors import ValidationError
from ibloss.losses import LossSpec
from ibloss.trainer import TrainConfig

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": None,
    "data": {
        "source": "gaussian",
        "gaussian": {"means": [[-1.0, 0.0], [1.0, 0.0]], "scale": 0.7, "n_per_class": 2500},
        "csv": {"train": None, "test": None},
        "test_fraction": 0.2,
        "imbalance": {"kind": "long_tailed", "rho": 100.0, "minority_classes": None},
    },
    "model": {"layer_sizes": [2, 16, 16, 2]},
    "train": {
        "total_epochs": 60,
        "transition_epoch": None,
        "batch_size": 128,
        "base_lr": 0.1,
        "warmup_epochs": 5,
        "decay_points": [[48, 0.1]],
        "momentum": 0.9,
        "weight_decay": 2e-4,
    },
    "loss": {
        "phase1": {"kind": "ce"},
        "phase2": {"kind": "ib"},
    },
    "report": {"top_m": 20, "k_for_topk": 1},
}

LOSS_DEFAULTS = {
    "kind": "ce", "gamma": 0.0, "beta": 0.0, "alpha": None,
    "epsilon": 1e-3, "norm": "L1", "renormalize": False,
}


def derive_seed(seed: int, name: str) -> int:
    """Stable sub-seed for one consumer of randomness."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: Path
    source: str
    mixture: GaussianMixtureSpec | None
    csv_train: Path | None
    csv_test: Path | None
    test_fraction: float
    imbalance: ImbalanceSpec | None
    layer_sizes: list[int]
    train: TrainConfig
    top_m: int
    k_for_topk: int
    resolved: dict = field(repr=False, default_factory=dict)

    def sub_seed(self, name: str) -> int:
        return derive_seed(self.seed, name)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ValidationError(f"{where}: unknown key")
        if isinstance(base[key], dict) and key not in ("phase1", "phase2"):
            if value is None and key == "imbalance":
                out[key] = None
                continue
            if not isinstance(value, dict):
                raise ValidationError(f"{where}: expected a mapping, got {type(value).__name__}")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _resolve_loss(raw, where: str) -> dict:
    if isinstance(raw, str):
        raw = {"kind": raw}
    if not isinstance(raw, dict):
        raise ValidationError(f"{where}: expected a mapping or a loss kind")
    unknown = set(raw) - set(LOSS_DEFAULTS)
    if unknown:
        raise ValidationError(f"{where}.{sorted(unknown)[0]}: unknown key")
    return {**LOSS_DEFAULTS, **raw}


def _build(where: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: {exc}") from None


def _num(value, where: str, kind=float):
    if isinstance(value, bool) or value is None:
        raise ValidationError(f"{where}: expected a number, got {value!r}")
    try:
        out = kind(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{where}: expected a number, got {value!r}") from None
    if kind is int and out != value:
        raise ValidationError(f"{where}: expected an integer, got {value!r}")
    return out


def resolve(raw: dict | None) -> dict:
    """Merge ``raw`` over the defaults, checking keys; returns the full mapping."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ValidationError("config root must be a mapping")
    merged = _merge(DEFAULTS, raw)
    merged["loss"]["phase1"] = _resolve_loss(merged["loss"]["phase1"], "loss.phase1")
    merged["loss"]["phase2"] = _resolve_loss(merged["loss"]["phase2"], "loss.phase2")
    if merged["train"]["transition_epoch"] is None:
        merged["train"]["transition_epoch"] = _num(merged["train"]["total_epochs"], "train.total_epochs", int) // 2
    return merged


def parse(raw: dict | None, base_dir: Path | None = None, check_files: bool = True) -> ExperimentConfig:
    r = resolve(raw)
    if r["output_dir"] is None:
        raise ValidationError("output_dir: required")
    seed = _num(r["seed"], "seed", int)
    d = r["data"]
    source = d["source"]
    if source not in ("gaussian", "csv"):
        raise ValidationError(f"data.source: expected 'gaussian' or 'csv', got {source!r}")

    def _path(p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() or base_dir is None else base_dir / p

    mixture = None
    csv_train = csv_test = None
    if source == "gaussian":
        g = d["gaussian"]
        mixture = _build(
            "data.gaussian", GaussianMixtureSpec,
            means=g["means"], scale=_num(g["scale"], "data.gaussian.scale"),
            n_per_class=_num(g["n_per_class"], "data.gaussian.n_per_class", int),
            seed=derive_seed(seed, "data"),
        )
    else:
        csv_train, csv_test = _path(d["csv"]["train"]), _path(d["csv"]["test"])
        if csv_train is None:
            raise ValidationError("data.csv.train: required when data.source is 'csv'")
        if check_files:
            for key, p in (("train", csv_train), ("test", csv_test)):
                if p is not None and not p.exists():
                    raise ValidationError(f"data.csv.{key}: file not found: {p}")
    test_fraction = _num(d["test_fraction"], "data.test_fraction")
    if not 0 < test_fraction < 1:
        raise ValidationError(f"data.test_fraction: must lie in (0, 1), got {test_fraction}")
    imbalance = None
    if d["imbalance"] is not None:
        im = d["imbalance"]
        imbalance = _build(
            "data.imbalance", ImbalanceSpec,
            kind=im["kind"], rho=_num(im["rho"], "data.imbalance.rho"),
            minority_classes=None if im["minority_classes"] is None
            else _num(im["minority_classes"], "data.imbalance.minority_classes", int),
            seed=derive_seed(seed, "imbalance"),
        )
        if imbalance.kind == "step" and imbalance.minority_classes is None:
            raise ValidationError("data.imbalance.minority_classes: required for step imbalance")

    sizes = r["model"]["layer_sizes"]
    if not isinstance(sizes, list) or len(sizes) < 2:
        raise ValidationError(f"model.layer_sizes: need a list of >= 2 sizes, got {sizes!r}")
    sizes = [_num(s, f"model.layer_sizes[{i}]", int) for i, s in enumerate(sizes)]
    if min(sizes) < 1:
        raise ValidationError("model.layer_sizes: all sizes must be >= 1")
    if mixture is not None:
        if sizes[0] != mixture.means.shape[1]:
            raise ValidationError(f"model.layer_sizes[0]: {sizes[0]} != data dimension {mixture.means.shape[1]}")
        if sizes[-1] != mixture.n_classes:
            raise ValidationError(f"model.layer_sizes[-1]: {sizes[-1]} != number of classes {mixture.n_classes}")

    losses = {}
    for phase in ("phase1", "phase2"):
        spec = r["loss"][phase]
        losses[phase] = _build(f"loss.{phase}", LossSpec, **spec)

    t = r["train"]
    dp = t["decay_points"] or []
    if not isinstance(dp, list) or any(not isinstance(p, (list, tuple)) or len(p) != 2 for p in dp):
        raise ValidationError("train.decay_points: expected a list of [epoch, factor] pairs")
    train = _build(
        "train", TrainConfig,
        total_epochs=_num(t["total_epochs"], "train.total_epochs", int),
        transition_epoch=_num(t["transition_epoch"], "train.transition_epoch", int),
        batch_size=_num(t["batch_size"], "train.batch_size", int),
        base_lr=_num(t["base_lr"], "train.base_lr"),
        warmup_epochs=_num(t["warmup_epochs"], "train.warmup_epochs", int),
        decay_points=[(_num(e, "train.decay_points", int), _num(f, "train.decay_points")) for e, f in dp],
        momentum=_num(t["momentum"], "train.momentum"),
        weight_decay=_num(t["weight_decay"], "train.weight_decay"),
        phase1_loss=losses["phase1"], phase2_loss=losses["phase2"],
        seed=derive_seed(seed, "shuffle"),
    )
    rep = r["report"]
    return ExperimentConfig(
        seed=seed,
        output_dir=_path(r["output_dir"]),
        source=source,
        mixture=mixture,
        csv_train=csv_train,
        csv_test=csv_test,
        test_fraction=test_fraction,
        imbalance=imbalance,
        layer_sizes=sizes,
        train=train,
        top_m=_num(rep["top_m"], "report.top_m", int),
        k_for_topk=_num(rep["k_for_topk"], "report.k_for_topk", int),
        resolved=r,
    )


def load(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: invalid YAML: {exc}") from None
    return raw or {}


def set_dotted(raw: dict, dotted: str, value) -> dict:
    """Return a copy of ``raw`` with ``a.b.c = value`` applied."""
    out = copy.deepcopy(raw)
    keys = dotted.split(".")
    node = out
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ValidationError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value
    return out


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ValidationError(f"override {text!r}: expected dotted.path=value")
    key, value = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ValidationError(f"override {text!r}: {exc}") from None


def dump(resolved: dict) -> str:
    return yaml.safe_dump(resolved, sort_keys=False, default_flow_style=None)
