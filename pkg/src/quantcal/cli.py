"""Experiment harness: train / recalibrate / sweep / report.

Runs the base-versus-regularized comparison over seeded splits of a CSV or
synthetic dataset, writes everything as CSV (full-precision floats, stable
row order, so identical configs produce byte-identical files), and renders
mean +/- std tables from the results.

Config is a JSON object; every key is optional and defaults reproduce the
reference settings (two hidden layers of 128, Adam at 1e-2, batch 512,
100 epochs, dropout 0.25, 10 Monte-Carlo passes, ensembles of 5, lambda
grid {0, 20}, 20 metric bins). `--desk-scale` caps epochs at 25 and rows
at 500 so a full run finishes in well under a minute.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .datasets import Dataset, SplitSpec, load_csv, load_from_descriptor, make_splits, standardize, synth_hetero
from .gaussian import pit
from .metrics import MetricConfig, MetricsReport
from .models import (
    EnsembleConfig,
    TrainConfig,
    ensemble_predict,
    ensemble_train,
    load_params,
    mc_dropout_predict,
    save_params,
    train,
)
from .recalib import apply_map, fit_calibration_map, save_map
from .metrics import calibration_error

DESK_EPOCHS = 25
DESK_MAX_ROWS = 500
# per-split seed derivation; lambda-independent so base and regularized runs
# start from identical weights and batch orders
TRAIN_SEED_STRIDE = 1000
PREDICT_SEED_OFFSET = 500000
CALIB_SEED_OFFSET = 600000

MODELS = ("mc_dropout", "ensemble")
CALIB_SPLITS = ("train", "holdout")

METRICS_FIELDS = ("dataset", "model", "lam", "split", "n_train", "n_test", "calib_error", "rmse", "nll")
RELIABILITY_FIELDS = ("dataset", "model", "lam", "split", "expected", "observed")
SUMMARY_FIELDS = ("dataset", "model", "lam", "metric", "mean", "std")
RECALIB_FIELDS = ("dataset", "model", "lam", "split", "pre_calib_error", "post_calib_error", "flag")
CURVE_FIELDS = ("lam", "calib_error_mean", "calib_error_std", "rmse_mean", "rmse_std", "nll_mean", "nll_std")


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "synth_hetero"
    data_dir: str = "data"
    synth_n: int = 2000
    model: str = "mc_dropout"
    lambdas: list | None = None
    learning_rate: float = 1e-2
    batch_size: int = 512
    epochs: int = 100
    dropout_rate: float = 0.25
    tau: float = 0.1
    mc_passes: int = 10
    ensemble_size: int = 5
    adv_eps_scale: float = 0.01
    bins: int = 20
    percent: bool = True
    n_splits: int = 5
    test_fraction: float = 0.2
    seed: int = 0
    out: str = "results"
    desk_scale: bool = False
    calib_split: str = "train"

    @classmethod
    def from_file(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"
            ) from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw, source=str(path))

    @classmethod
    def from_dict(cls, raw, source="config"):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"{source}: unknown keys {unknown}; known keys: {sorted(known)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.calib_split not in CALIB_SPLITS:
            raise ConfigError(
                f"calib_split must be one of {CALIB_SPLITS}, got {self.calib_split!r}"
            )
        if self.lambdas is not None:
            if not self.lambdas:
                raise ConfigError("lambdas must be a nonempty list when given")
            if any(l < 0 for l in self.lambdas):
                raise ConfigError(f"lambdas must be nonnegative, got {self.lambdas}")
        for name in ("epochs", "batch_size", "mc_passes", "ensemble_size", "bins", "n_splits", "synth_n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def resolved_lambdas(self, command):
        if self.lambdas is not None:
            return [float(l) for l in self.lambdas]
        if command == "sweep":
            return [0.0, 1.0, 5.0, 10.0, 20.0]
        return [0.0, 20.0]

    def effective_epochs(self):
        return min(self.epochs, DESK_EPOCHS) if self.desk_scale else self.epochs

    def metric_config(self):
        return MetricConfig(bins=self.bins, percent=self.percent)

    def train_seed(self, split):
        return self.seed + TRAIN_SEED_STRIDE * (split + 1)


def _load_base_dataset(cfg):
    if cfg.dataset == "synth_hetero":
        ds = synth_hetero(cfg.synth_n, seed=cfg.seed)
    elif cfg.dataset.endswith(".csv"):
        path = Path(cfg.dataset)
        if not path.exists():
            raise FileNotFoundError(f"dataset file {path} not found")
        ds = load_csv(path)
    else:
        ds = load_from_descriptor(cfg.dataset, cfg.data_dir)
    if cfg.desk_scale and len(ds) > DESK_MAX_ROWS:
        keep = np.sort(np.random.default_rng(cfg.seed).permutation(len(ds))[:DESK_MAX_ROWS])
        ds = ds.subset(keep)
    return ds


def _fit_rows(cfg, train_idx, split):
    """Rows the model trains on, and rows reserved for fitting the
    calibration map. `holdout` carves a seeded fifth of the train split off
    before training so the map never sees training rows."""
    if cfg.calib_split == "train":
        return train_idx, train_idx
    rng = np.random.default_rng(cfg.train_seed(split) + 17)
    perm = rng.permutation(len(train_idx))
    n_calib = max(1, int(round(0.2 * len(train_idx))))
    calib = np.sort(train_idx[perm[:n_calib]])
    fit = np.sort(train_idx[perm[n_calib:]])
    return fit, calib


def _train_one(cfg, std_train, lam, split):
    tcfg = TrainConfig(
        lam=lam,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.effective_epochs(),
        dropout_rate=cfg.dropout_rate,
        tau=cfg.tau,
        seed=cfg.train_seed(split),
    )
    if cfg.model == "mc_dropout":
        return [train(std_train, tcfg)]
    ens = EnsembleConfig(size=cfg.ensemble_size, adv_eps_scale=cfg.adv_eps_scale)
    return ensemble_train(std_train, tcfg, ens)


def _predict(cfg, members, x, seed):
    if cfg.model == "mc_dropout":
        return mc_dropout_predict(
            members[0], x, passes=cfg.mc_passes, dropout_rate=cfg.dropout_rate, seed=seed
        )
    return ensemble_predict(members, x)


def _artifact_paths(out_dir, cfg, lam, split):
    base = out_dir / "models"
    if cfg.model == "mc_dropout":
        return [base / f"mc_dropout_lam{lam:g}_split{split}.bin"]
    return [
        base / f"ensemble_lam{lam:g}_split{split}_m{j}.bin"
        for j in range(cfg.ensemble_size)
    ]


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        writer.writerows(rows)


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _summarize(metric_rows):
    """(dataset, model, lam) -> metric -> (mean, std). Sample std, 0 for a
    single value."""
    groups = {}
    for row in metric_rows:
        key = (row["dataset"], row["model"], row["lam"])
        groups.setdefault(key, []).append(row)
    summary = {}
    for key, rows in sorted(groups.items()):
        stats = {}
        for metric in ("calib_error", "rmse", "nll"):
            vals = np.array([r[metric] for r in rows])
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            stats[metric] = (float(vals.mean()), std)
        summary[key] = stats
    return summary


def _run_experiment(cfg, lambdas):
    """Train every (lambda, split) pair; returns metric rows, reliability
    rows, and in-memory artifacts keyed by (lam, split)."""
    ds = _load_base_dataset(cfg)
    splits = make_splits(
        len(ds), SplitSpec(n_splits=cfg.n_splits, test_fraction=cfg.test_fraction, seed=cfg.seed)
    )
    mcfg = cfg.metric_config()
    metric_rows = []
    reliability_rows = []
    artifacts = {}
    for split, (train_idx, test_idx) in enumerate(splits):
        fit_idx, calib_idx = _fit_rows(cfg, train_idx, split)
        std_train, transform = standardize(ds.subset(fit_idx))
        x_test, y_test_std = transform.apply(ds.features[test_idx], ds.targets[test_idx])
        for lam in lambdas:
            try:
                members = _train_one(cfg, std_train, lam, split)
                pred = _predict(
                    cfg, members, x_test, cfg.train_seed(split) + PREDICT_SEED_OFFSET
                )
            except (RuntimeError, ValueError) as exc:
                raise RuntimeError(f"split {split}, lam={lam:g}: {exc}") from exc
            pits = pit(pred, y_test_std)
            report = MetricsReport.evaluate(
                transform.inverse_predictions(pred), ds.targets[test_idx], pits, mcfg
            )
            metric_rows.append(
                {
                    "dataset": cfg.dataset,
                    "model": cfg.model,
                    "lam": lam,
                    "split": split,
                    "n_train": len(fit_idx),
                    "n_test": len(test_idx),
                    "calib_error": report.calib_error,
                    "rmse": report.rmse,
                    "nll": report.nll,
                }
            )
            for expected, observed in report.reliability:
                reliability_rows.append((cfg.dataset, cfg.model, lam, split, expected, observed))
            artifacts[(lam, split)] = {
                "members": members,
                "transform": transform,
                "calib_idx": calib_idx,
                "test_idx": test_idx,
            }
    return ds, metric_rows, reliability_rows, artifacts


def _write_run_outputs(cfg, out_dir, metric_rows, reliability_rows, artifacts):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "models").mkdir(exist_ok=True)
    _write_csv(
        out_dir / "metrics.csv",
        METRICS_FIELDS,
        [[_fmt(r[f]) for f in METRICS_FIELDS] for r in metric_rows],
    )
    _write_csv(
        out_dir / "reliability.csv",
        RELIABILITY_FIELDS,
        [[_fmt(v) for v in row] for row in reliability_rows],
    )
    summary = _summarize(metric_rows)
    summary_rows = []
    for (dataset, model, lam), stats in summary.items():
        for metric, (mean, std) in stats.items():
            summary_rows.append([dataset, model, _fmt(lam), metric, _fmt(mean), _fmt(std)])
    _write_csv(out_dir / "summary.csv", SUMMARY_FIELDS, summary_rows)
    for (lam, split), art in artifacts.items():
        for member, path in zip(art["members"], _artifact_paths(out_dir, cfg, lam, split)):
            save_params(member, path)
    resolved = dataclasses.asdict(cfg)
    resolved["version"] = __version__
    with open(out_dir / "run_config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(cfg):
    lambdas = cfg.resolved_lambdas("train")
    out_dir = Path(cfg.out)
    ds, metric_rows, reliability_rows, artifacts = _run_experiment(cfg, lambdas)
    _write_run_outputs(cfg, out_dir, metric_rows, reliability_rows, artifacts)
    summary = _summarize(metric_rows)
    for (dataset, model, lam), stats in summary.items():
        mean, std = stats["calib_error"]
        print(
            f"{dataset} {model} lam={lam:g}: calib_error {mean:.4f} +/- {std:.4f}, "
            f"rmse {stats['rmse'][0]:.4f}, nll {stats['nll'][0]:.4f}"
        )
    print(f"wrote {out_dir / 'metrics.csv'}")
    return 0


def cmd_sweep(cfg):
    lambdas = cfg.resolved_lambdas("sweep")
    out_dir = Path(cfg.out)
    ds, metric_rows, reliability_rows, artifacts = _run_experiment(cfg, lambdas)
    _write_run_outputs(cfg, out_dir, metric_rows, reliability_rows, artifacts)
    summary = _summarize(metric_rows)
    curve_rows = []
    means = []
    for lam in lambdas:
        stats = summary[(cfg.dataset, cfg.model, lam)]
        means.append(stats["calib_error"][0])
        curve_rows.append(
            [_fmt(lam)]
            + [_fmt(v) for metric in ("calib_error", "rmse", "nll") for v in stats[metric]]
        )
    _write_csv(out_dir / "curve.csv", CURVE_FIELDS, curve_rows)
    for lam, mean in zip(lambdas, means):
        print(f"lam={lam:g}: mean calib_error {mean:.4f}")
    if len(lambdas) > 1:
        rho = float(spearmanr(lambdas, means).statistic)
        print(f"spearman(lambda, calib_error) = {rho:.3f}")
    print(f"wrote {out_dir / 'curve.csv'}")
    return 0


def _load_artifacts(cfg, out_dir, lam, split):
    paths = _artifact_paths(out_dir, cfg, lam, split)
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"model artifact(s) not found: {missing}")
    return [load_params(p) for p in paths]


def cmd_recalibrate(cfg):
    out_dir = Path(cfg.out)
    run_config_path = out_dir / "run_config.json"
    if not run_config_path.exists():
        raise ConfigError(
            f"{run_config_path} not found; run `quantcal train` into this directory first"
        )
    with open(run_config_path) as fh:
        stored = json.load(fh)
    stored.pop("version", None)
    run_cfg = ExperimentConfig.from_dict(stored, source=str(run_config_path))
    # the stored run is authoritative for everything except the calibration
    # data choice, which the user may override on the command line
    run_cfg.calib_split = cfg.calib_split
    cfg = run_cfg

    lambdas = cfg.resolved_lambdas("train")
    ds = _load_base_dataset(cfg)
    splits = make_splits(
        len(ds), SplitSpec(n_splits=cfg.n_splits, test_fraction=cfg.test_fraction, seed=cfg.seed)
    )
    mcfg = cfg.metric_config()
    (out_dir / "maps").mkdir(exist_ok=True)
    rows = []
    for split, (train_idx, test_idx) in enumerate(splits):
        fit_idx, calib_idx = _fit_rows(cfg, train_idx, split)
        std_train, transform = standardize(ds.subset(fit_idx))
        x_calib, y_calib = transform.apply(ds.features[calib_idx], ds.targets[calib_idx])
        x_test, y_test = transform.apply(ds.features[test_idx], ds.targets[test_idx])
        for lam in lambdas:
            members = _load_artifacts(cfg, out_dir, lam, split)
            if members[0].n_features != std_train.n_features:
                raise ValueError(
                    f"artifact for lam={lam:g} split={split} expects "
                    f"{members[0].n_features} features, dataset has {std_train.n_features}"
                )
            seed = cfg.train_seed(split)
            pred_calib = _predict(cfg, members, x_calib, seed + CALIB_SEED_OFFSET)
            cal_map = fit_calibration_map(pred_calib, y_calib)
            save_map(cal_map, out_dir / "maps" / f"{cfg.model}_lam{lam:g}_split{split}.csv")
            pred_test = _predict(cfg, members, x_test, seed + PREDICT_SEED_OFFSET)
            pits = pit(pred_test, y_test)
            pre = calibration_error(pits, mcfg)
            post = calibration_error(apply_map(cal_map, pits), mcfg)
            rows.append(
                {
                    "dataset": cfg.dataset,
                    "model": cfg.model,
                    "lam": lam,
                    "split": split,
                    "pre_calib_error": pre,
                    "post_calib_error": post,
                    "flag": "*" if post > pre else "",
                }
            )
    _write_csv(
        out_dir / "recalib.csv",
        RECALIB_FIELDS,
        [[_fmt(r[f]) for f in RECALIB_FIELDS] for r in rows],
    )
    for r in rows:
        print(
            f"{r['dataset']} {r['model']} lam={r['lam']:g} split={r['split']}: "
            f"calib_error {r['pre_calib_error']:.4f} -> {r['post_calib_error']:.4f}"
            f"{r['flag']}"
        )
    print(f"wrote {out_dir / 'recalib.csv'}")
    return 0


def _read_csv_dicts(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _bold_pair(values, lower_better=True):
    """Indices to bold: the best value, plus anything within 1e-9 of it."""
    best = min(values) if lower_better else max(values)
    return [abs(v - best) <= 1e-9 for v in values]


def cmd_report(cfg):
    out_dir = Path(cfg.out)
    metrics_path = out_dir / "metrics.csv"
    if not metrics_path.exists():
        raise ConfigError(f"{metrics_path} not found; nothing to report")
    raw = _read_csv_dicts(metrics_path)
    if not raw:
        raise ConfigError(f"{metrics_path} has no rows")
    metric_rows = [
        {
            "dataset": r["dataset"],
            "model": r["model"],
            "lam": float(r["lam"]),
            "split": int(r["split"]),
            "calib_error": float(r["calib_error"]),
            "rmse": float(r["rmse"]),
            "nll": float(r["nll"]),
        }
        for r in raw
    ]
    summary = _summarize(metric_rows)
    lambdas = sorted({key[2] for key in summary})
    groups = sorted({(key[0], key[1]) for key in summary})
    lines = []
    summary_rows = []
    for metric in ("calib_error", "rmse", "nll"):
        lines.append(f"== {metric} (mean +/- std over splits; best per row in **bold**) ==")
        header = ["dataset/model"] + [f"lam={lam:g}" for lam in lambdas]
        lines.append(" | ".join(header))
        for dataset, model in groups:
            cells = []
            means = []
            for lam in lambdas:
                stats = summary.get((dataset, model, lam))
                if stats is None:
                    cells.append("-")
                    means.append(float("inf"))
                    continue
                mean, std = stats[metric]
                means.append(mean)
                cells.append(f"{mean:.4f} +/- {std:.4f}")
                summary_rows.append([dataset, model, _fmt(lam), metric, _fmt(mean), _fmt(std)])
            for i, bold in enumerate(_bold_pair(means)):
                if bold and cells[i] != "-":
                    cells[i] = f"**{cells[i]}**"
            lines.append(" | ".join([f"{dataset}/{model}"] + cells))
        lines.append("")
    recalib_path = out_dir / "recalib.csv"
    if recalib_path.exists():
        rec = _read_csv_dicts(recalib_path)
        if rec:
            lines.append("== recalibration (pre -> post calibration error; * marks post > pre) ==")
            header = ["dataset/model/lam", "pre", "post"]
            lines.append(" | ".join(header))
            grouped = {}
            for r in rec:
                key = (r["dataset"], r["model"], float(r["lam"]))
                grouped.setdefault(key, []).append(r)
            for key, rs in sorted(grouped.items()):
                pre = np.mean([float(r["pre_calib_error"]) for r in rs])
                post = np.mean([float(r["post_calib_error"]) for r in rs])
                stars = sum(1 for r in rs if r["flag"] == "*")
                mark = "*" if stars > len(rs) / 2 else ""
                lines.append(
                    f"{key[0]}/{key[1]}/lam={key[2]:g} | {pre:.4f} | {post:.4f}{mark} "
                    f"({stars}/{len(rs)} splits worse)"
                )
            lines.append("")
    text = "\n".join(lines)
    _write_csv(out_dir / "summary.csv", SUMMARY_FIELDS, summary_rows)
    with open(out_dir / "report.txt", "w") as fh:
        fh.write(text)
    print(text)
    print(f"wrote {out_dir / 'report.txt'}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="quantcal",
        description="Quantile-calibration experiments for probabilistic regression.",
    )
    parser.add_argument("--version", action="version", version=f"quantcal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train base and regularized models over seeded splits"),
        ("recalibrate", "fit isotonic maps for a finished run and re-score"),
        ("sweep", "train across a lambda grid and emit the trade-off curve"),
        ("report", "render mean +/- std tables from a results directory"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--dataset", help="synth_hetero, a shipped descriptor name, or a CSV path")
        p.add_argument("--lambda", dest="lambdas", type=float, action="append",
                       help="penalty weight; repeat for a grid (overrides config)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="results directory")
        p.add_argument("--desk-scale", action="store_true", default=None,
                       help=f"cap epochs at {DESK_EPOCHS} and rows at {DESK_MAX_ROWS}")
        p.add_argument("--calib-split", choices=CALIB_SPLITS,
                       help="rows used to fit the isotonic map (default train)")
        p.add_argument("--model", choices=MODELS, help="uncertainty model")
    return parser


def _config_from_args(args):
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {
        "dataset": args.dataset,
        "lambdas": args.lambdas,
        "seed": args.seed,
        "out": args.out,
        "desk_scale": args.desk_scale,
        "calib_split": args.calib_split,
        "model": args.model,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "recalibrate": cmd_recalibrate,
        "sweep": cmd_sweep,
        "report": cmd_report,
    }
    try:
        cfg = _config_from_args(args)
        return handlers[args.command](cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
