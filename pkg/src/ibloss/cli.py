"""Command-line experiment driver.

Subcommands: gen-data, train, eval, influence, sweep, plus ``run`` which
chains gen-data, train and eval (and the influence report) for one config.
Exit status: 0 success, 1 validation error, 2 runtime / numerical error.

Layout under ``output_dir``::

    config.resolved.yaml        every default materialised
    data/train.csv, data/test.csv (+ .meta.json sidecars)
    model.ckpt                  binary checkpoint (see ibloss.model.save_checkpoint)
    history.csv                 one row per epoch
    metrics.json, metrics_per_class.csv
    influence/                  summary.json, samples.csv, top_m.csv
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from ibloss import config as cfgmod
from ibloss._io import atomic_write_text
from ibloss.data import (
    Dataset,
    apply_imbalance,
    imbalance_ratio,
    load_csv,
    make_gaussian_mixture,
    save_csv,
    stratified_split,
)
from ibloss.errors import NumericalError, ValidationError
from ibloss.influence import MAX_HESSIAN_PARAMS, exact_influence, spearman_rank_corr
from ibloss.metrics import Metrics, evaluate, influence_report
from ibloss.model import init_model, load_checkpoint, save_checkpoint
from ibloss.trainer import train

logger = logging.getLogger("ibloss")

SWEEP_AXES = ("transition_epoch", "norm", "epsilon", "loss")


def build_datasets(cfg: cfgmod.ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train/test split for ``cfg``; the imbalance transform touches the train side only."""
    if cfg.source == "gaussian":
        full = make_gaussian_mixture(cfg.mixture)
        train_ds, test_ds = stratified_split(full, cfg.test_fraction, cfg.sub_seed("split"))
    else:
        if cfg.csv_test is not None:
            train_ds = load_csv(cfg.csv_train)
            test_ds = load_csv(cfg.csv_test, n_classes=train_ds.n_classes)
        else:
            train_ds, test_ds = stratified_split(load_csv(cfg.csv_train), cfg.test_fraction,
                                                 cfg.sub_seed("split"))
    if cfg.imbalance is not None:
        train_ds = apply_imbalance(train_ds, cfg.imbalance)
    train_ds.name, test_ds.name = "train", "test"
    return train_ds, test_ds


def _data_meta(cfg: cfgmod.ExperimentConfig) -> dict:
    return {
        "seed": cfg.seed,
        "data": cfg.resolved["data"],
    }


def cmd_gen_data(cfg: cfgmod.ExperimentConfig) -> tuple[Dataset, Dataset]:
    train_ds, test_ds = build_datasets(cfg)
    out = cfg.output_dir / "data"
    save_csv(train_ds, out / "train.csv", _data_meta(cfg))
    save_csv(test_ds, out / "test.csv", _data_meta(cfg))
    logger.info("train counts %s (rho=%.4g), test counts %s", train_ds.class_counts.tolist(),
                imbalance_ratio(train_ds), test_ds.class_counts.tolist())
    return train_ds, test_ds


def cmd_train(cfg: cfgmod.ExperimentConfig, train_ds: Dataset | None = None):
    if train_ds is None:
        train_ds, _ = build_datasets(cfg)
    if train_ds.n_features != cfg.layer_sizes[0] or train_ds.n_classes != cfg.layer_sizes[-1]:
        raise ValidationError(
            f"model.layer_sizes: {cfg.layer_sizes} does not fit data "
            f"(d={train_ds.n_features}, K={train_ds.n_classes})"
        )
    out = cfg.output_dir
    atomic_write_text(out / "config.resolved.yaml", cfgmod.dump(cfg.resolved))
    model = init_model(cfg.layer_sizes, cfg.sub_seed("init"))
    model, history = train(model, train_ds, cfg.train)
    save_checkpoint(model, out / "model.ckpt")
    history.save(out / "history.csv")
    return model, history


def cmd_eval(checkpoint, dataset, out_dir, k_for_topk: int = 1) -> Metrics:
    model = load_checkpoint(checkpoint)
    ds = dataset if isinstance(dataset, Dataset) else load_csv(dataset, n_classes=None)
    if ds.n_features != model.n_features:
        raise ValidationError(f"dataset has {ds.n_features} features, checkpoint expects {model.n_features}")
    if ds.n_classes > model.n_classes:
        raise ValidationError(f"dataset has {ds.n_classes} classes, checkpoint predicts {model.n_classes}")
    ds = Dataset(ds.features, ds.labels, model.n_classes, ds.name)
    metrics = evaluate(model, ds, k_for_topk)
    metrics.save(out_dir)
    return metrics


def cmd_influence(checkpoint, dataset, top_m: int, out_dir, damping: float = 1e-4) -> dict:
    """Write the IB-factor report; adds the exact-influence check for linear models."""
    model = load_checkpoint(checkpoint)
    ds = dataset if isinstance(dataset, Dataset) else load_csv(dataset)
    if ds.n_features != model.n_features or ds.n_classes > model.n_classes:
        raise ValidationError(f"dataset (d={ds.n_features}, K={ds.n_classes}) does not fit checkpoint "
                              f"{model.layer_sizes}")
    ds = Dataset(ds.features, ds.labels, model.n_classes, ds.name)
    report = influence_report(model, ds, top_m)
    summary = report.summary()
    counts = ds.class_counts
    major, minor = int(np.argmax(counts)), int(np.argmin(counts))
    summary["majority_class"] = major
    summary["minority_class"] = minor
    summary["majority_mean_normalized"] = float(report.class_mean_normalized[major])
    summary["minority_mean_normalized"] = float(report.class_mean_normalized[minor])
    summary["majority_top_m_mean_normalized"] = summary["class_top_m_mean_normalized"][major]
    summary["minority_top_m_mean_normalized"] = summary["class_top_m_mean_normalized"][minor]
    summary["majority_dominates"] = bool(
        summary["majority_top_m_mean_normalized"] > summary["minority_top_m_mean_normalized"]
    )
    n_params = model.weights[-1].size
    if len(model.weights) == 1 and n_params <= MAX_HESSIAN_PARAMS:
        exact = exact_influence(model, ds, damping=damping)
        try:
            rho = spearman_rank_corr(exact.l1, report.raw)
        except ValidationError as exc:
            # e.g. identical samples: every factor equal, ranking undefined
            logger.warning("rank correlation skipped: %s", exc)
            rho = None
        summary["exact_influence"] = {
            "damping": damping,
            "spearman_exact_l1_vs_ib_factor": rho,
            "residual": exact.residual(),
        }
    out = Path(out_dir)
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    atomic_write_text(out / "samples.csv", report.samples_csv())
    atomic_write_text(out / "top_m.csv", report.top_csv())
    return summary


def cmd_run(cfg: cfgmod.ExperimentConfig, influence: bool = True) -> dict:
    train_ds, test_ds = cmd_gen_data(cfg)
    cmd_train(cfg, train_ds)
    out = cfg.output_dir
    metrics = cmd_eval(out / "model.ckpt", test_ds, out, cfg.k_for_topk)
    result = {"metrics": metrics, "train_counts": train_ds.class_counts}
    if influence:
        result["influence"] = cmd_influence(out / "model.ckpt", train_ds, cfg.top_m, out / "influence")
    return result


@dataclass
class SweepSpec:
    axis: str
    values: list
    seeds: list[int]

    @classmethod
    def from_dict(cls, raw: dict) -> "SweepSpec":
        if not isinstance(raw, dict):
            raise ValidationError("sweep spec must be a mapping")
        unknown = set(raw) - {"axis", "values", "seeds"}
        if unknown:
            raise ValidationError(f"sweep.{sorted(unknown)[0]}: unknown key")
        axis = raw.get("axis")
        if axis not in SWEEP_AXES:
            raise ValidationError(f"sweep.axis: expected one of {SWEEP_AXES}, got {axis!r}")
        values = raw.get("values")
        seeds = raw.get("seeds", [0])
        if not isinstance(values, list) or not values:
            raise ValidationError("sweep.values: expected a non-empty list")
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ValidationError("sweep.seeds: expected a non-empty list of integers")
        return cls(axis, values, seeds)


def value_label(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, dict):
        return ",".join(f"{k}={v}" for k, v in value.items())
    return str(value)


def apply_axis(raw: dict, axis: str, value) -> dict:
    """Config mapping for one sweep cell.

    - transition_epoch: sets train.transition_epoch.
    - norm: sets the phase-2 IB factor norm (L1 | L2 | Linf).
    - epsilon: sets the phase-2 epsilon; ``none`` drops the IB factor and
      keeps a constant 1e-3 denominator.
    - loss: a kind name or loss mapping. IB kinds replace phase 2 only;
      other kinds are used for both phases. Unspecified parameters (gamma,
      beta, alpha, ...) come from the configured phase-2 loss.
    """
    r = cfgmod.resolve(raw)
    phase2 = dict(r["loss"]["phase2"])
    if axis == "transition_epoch":
        r["train"]["transition_epoch"] = value
    elif axis == "norm":
        phase2["norm"] = value
        r["loss"]["phase2"] = phase2
    elif axis == "epsilon":
        if value is None or str(value).lower() == "none":
            phase2.update(norm="none", epsilon=1e-3)
        else:
            phase2["epsilon"] = float(value)
        r["loss"]["phase2"] = phase2
    elif axis == "loss":
        spec = {"kind": value} if isinstance(value, str) else dict(value)
        merged = {**phase2, **spec}
        if str(merged["kind"]).lower().startswith("ib"):
            r["loss"]["phase2"] = merged
        else:
            r["loss"]["phase1"] = merged
            r["loss"]["phase2"] = dict(merged)
    else:
        raise ValidationError(f"unknown sweep axis {axis!r}")
    return r


def _minority_classes(counts) -> np.ndarray:
    counts = np.asarray(counts)
    return np.flatnonzero(counts == counts.min())


def _fmt(x: float) -> str:
    return repr(float(x))


def cmd_sweep(raw: dict, sweep: SweepSpec) -> list[dict]:
    """Run every (value, seed) cell and aggregate mean and sample std over seeds.

    Each finished cell is appended to ``sweep/cells.csv`` right away, so a
    failure leaves the completed cells on disk.
    """
    base = cfgmod.resolve(raw)
    root = Path(base["output_dir"]) / "sweep"
    cell_cols = ["axis", "value", "seed", "overall", "balanced", "minority"]
    cells_buf = io.StringIO()
    cw = csv.writer(cells_buf, lineterminator="\n")
    cw.writerow(cell_cols)
    atomic_write_text(root / "cells.csv", cells_buf.getvalue())
    rows = []
    for value in sweep.values:
        label = value_label(value)
        scores = []
        for seed in sweep.seeds:
            cell_raw = apply_axis(base, sweep.axis, value)
            cell_raw["seed"] = seed
            cell_raw["output_dir"] = str(root / f"{sweep.axis}={label}" / f"seed{seed}")
            try:
                cfg = cfgmod.parse(cell_raw)
                res = cmd_run(cfg, influence=False)
            except (ValidationError, NumericalError) as exc:
                raise type(exc)(f"sweep cell {sweep.axis}={label} seed={seed}: {exc}") from exc
            m: Metrics = res["metrics"]
            minority = float(np.nanmean(m.per_class[_minority_classes(res["train_counts"])]))
            scores.append((m.overall, m.balanced, minority))
            cw.writerow([sweep.axis, label, seed, _fmt(m.overall), _fmt(m.balanced), _fmt(minority)])
            atomic_write_text(root / "cells.csv", cells_buf.getvalue())
            logger.info("sweep %s=%s seed=%d: balanced=%.4f minority=%.4f", sweep.axis, label, seed,
                        m.balanced, minority)
        s = np.array(scores)
        std = s.std(axis=0, ddof=1) if len(s) > 1 else np.zeros(3)
        rows.append({
            "value": label, "n_seeds": len(s),
            "overall_mean": s[:, 0].mean(), "overall_std": std[0],
            "balanced_mean": s[:, 1].mean(), "balanced_std": std[1],
            "minority_mean": s[:, 2].mean(), "minority_std": std[2],
        })
    cols = ["value", "n_seeds", "overall_mean", "overall_std", "balanced_mean", "balanced_std",
            "minority_mean", "minority_std"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([sweep.axis] + cols[1:])
    for row in rows:
        w.writerow([row[c] if c in ("value", "n_seeds") else _fmt(row[c]) for c in cols])
    atomic_write_text(root / "table.csv", buf.getvalue())
    return rows


def _load_raw(args) -> dict:
    raw = cfgmod.load(args.config)
    for item in args.set or []:
        key, value = cfgmod.parse_override(item)
        raw = cfgmod.set_dotted(raw, key, value)
    return raw


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ibloss", description="Influence-balanced loss experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--set", action="append", metavar="PATH=VALUE",
                        help="override one config value, e.g. train.total_epochs=10")
        return sp

    with_config(sub.add_parser("gen-data", help="write train/test CSVs and metadata"))
    with_config(sub.add_parser("train", help="train and write checkpoint + history"))
    with_config(sub.add_parser("run", help="gen-data, train, eval and influence in one go"))
    sp = with_config(sub.add_parser("sweep", help="run a one-axis sweep over seeds"))
    sp.add_argument("--sweep", required=True, help="YAML sweep spec (axis, values, seeds)")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a CSV dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--k", type=int, default=1, help="k for top-k accuracy")

    sp = sub.add_parser("influence", help="IB-factor influence report for a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--top-m", type=int, required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--damping", type=float, default=1e-4)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval":
            m = cmd_eval(args.checkpoint, args.dataset, args.out, args.k)
            print(json.dumps(m.to_dict()))
        elif args.command == "influence":
            s = cmd_influence(args.checkpoint, args.dataset, args.top_m, args.out, args.damping)
            print(json.dumps({k: v for k, v in s.items() if k != "top_indices"}))
        else:
            raw = _load_raw(args)
            if args.command == "sweep":
                rows = cmd_sweep(raw, SweepSpec.from_dict(cfgmod.load(args.sweep)))
                for row in rows:
                    print(f"{row['value']}: balanced {row['balanced_mean']:.4f} +- {row['balanced_std']:.4f}, "
                          f"minority {row['minority_mean']:.4f} +- {row['minority_std']:.4f}")
            else:
                cfg = cfgmod.parse(raw)
                if args.command == "gen-data":
                    cmd_gen_data(cfg)
                elif args.command == "train":
                    cmd_train(cfg)
                else:
                    m = cmd_run(cfg)["metrics"]
                    print(json.dumps(m.to_dict()))
    except (ValidationError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc, (FileNotFoundError, FileExistsError, PermissionError, NotADirectoryError)) else 2
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
