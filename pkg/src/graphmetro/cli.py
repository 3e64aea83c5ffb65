"""Command line entry point: ``gmetro <command> --config PATH [--seed N] [--out DIR]``.

Artifacts go to ``OUT/seed_{N}/{method}/``. Every CSV carries ``config_hash``
and ``seed`` columns and every JSON carries those keys; wall-clock
timestamps live in a separate ``timestamps.json`` so repeated runs produce
identical result files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import experiment
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .evaluation import EnvResult, summarize_trials
from .io import write_graph
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .training import HISTORY_COLUMNS

logger = logging.getLogger("gmetro")

EXIT_ERROR = 1
EXIT_MISSING = 2
COMMANDS = ("train", "evaluate", "invariance", "discover", "report", "gen-data")


class CommandError(RuntimeError):
    def __init__(self, message, code=EXIT_ERROR):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers


def _run_dir(out: Path, seed: int, method: str) -> Path:
    return out / f"seed_{seed}" / method


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_json(path: Path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stamp(directory: Path, command: str):
    path = directory / "timestamps.json"
    stamps = json.loads(path.read_text()) if path.exists() else {}
    stamps[command] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    _write_json(path, stamps)


def _fmt(v) -> str:
    return repr(float(v))


def _methods(cfg, args):
    return [args.method] if args.method else list(cfg.methods)


def _seeds(cfg, args):
    return [args.seed] if args.seed is not None else list(cfg.seeds)


def _load_model(cfg: ExperimentConfig, directory: Path):
    ckpt = directory / "checkpoint.pt"
    if not ckpt.exists():
        raise CommandError(f"checkpoint not found: {ckpt}", EXIT_MISSING)
    try:
        model, payload = load_checkpoint(ckpt, cfg.transform_set().index_map())
    except CheckpointError as e:
        raise CommandError(str(e)) from e
    if payload["extra"].get("config_hash") != cfg.hash():
        raise CommandError(f"checkpoint {ckpt} was trained under a different config")
    return model


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


# --------------------------------------------------------------- commands


def cmd_gen_data(cfg: ExperimentConfig, args):
    if cfg.synthetic is None:
        raise CommandError("gen-data needs a synthetic section in the config")
    out = Path(args.out) / "data"
    data = experiment.load_dataset(cfg)
    write_graph(out, data, num_classes=cfg.synthetic_spec().num_classes)
    _write_json(out / "provenance.json", {"config_hash": cfg.hash(), "synthetic": cfg.synthetic})
    print(f"wrote dataset to {out}")


def cmd_train(cfg: ExperimentConfig, args):
    out = Path(args.out)
    data = experiment.load_dataset(cfg)
    h = cfg.hash()
    index_map = cfg.transform_set().index_map()
    for seed in _seeds(cfg, args):
        split = experiment.make_split(cfg, data, seed)
        for method in _methods(cfg, args):
            d = _run_dir(out, seed, method)
            est = experiment.fit(cfg, method, split, seed)
            save_checkpoint(
                d / "checkpoint.pt", est.module_, index_map, {"config_hash": h, "seed": seed, "method": method}
            )
            rows = [[h, seed] + [_fmt(r[c]) if c != "epoch" else r[c] for c in HISTORY_COLUMNS] for r in est.history_]
            _write_csv(d / "history.csv", ["config_hash", "seed", *HISTORY_COLUMNS], rows)
            _stamp(d, "train")
            best = max(r["val_acc"] for r in est.history_)
            print(f"seed {seed} {method}: best val acc {best:.4f} -> {d}")
    dump_config(cfg, out / "config.yaml")


def cmd_evaluate(cfg: ExperimentConfig, args):
    out = Path(args.out)
    data = experiment.load_dataset(cfg)
    h = cfg.hash()
    tset = cfg.transform_set()
    envs = tset.enumerate_environments(cfg.transforms.k)
    for seed in _seeds(cfg, args):
        split = experiment.make_split(cfg, data, seed)
        for method in _methods(cfg, args):
            d = _run_dir(out, seed, method)
            model = _load_model(cfg, d)
            results = experiment.environment_results(cfg, model, split, seed)
            rows = [[h, seed, method, r.env_id, r.env_label, r.metric, _fmt(r.value)] for r in results]
            _write_csv(d / "env_results.csv", ["config_hash", "seed", "method", "env_id", "env", "metric", "value"], rows)
            _write_json(d / "environments.json", {"config_hash": h, "seed": seed, "environments": tset.environments_json(cfg.transforms.k)})
            _plot_envs(d / "env_results.png", [r.env_label for r in results], {method: [r.value for r in results]})
            _stamp(d, "evaluate")
            shifted = np.mean([r.value for r in results[1:]]) if len(envs) > 1 else float("nan")
            print(f"seed {seed} {method}: iid {results[0].value:.4f} shifted mean {shifted:.4f}")


def cmd_invariance(cfg: ExperimentConfig, args):
    out = Path(args.out)
    data = experiment.load_dataset(cfg)
    h = cfg.hash()
    names = cfg.transform_set().index_map()[1:]
    for seed in _seeds(cfg, args):
        split = experiment.make_split(cfg, data, seed)
        d = _run_dir(out, seed, "graphmetro")
        model = _load_model(cfg, d)
        inv = experiment.invariance(cfg, model, split, seed)
        header = ["config_hash", "seed", "expert", *names]
        for fname, mat in (("invariance_matrix.csv", inv.I), ("invariance_matrix_norm.csv", inv.I_norm)):
            rows = [[h, seed, names[i], *map(_fmt, mat[i])] for i in range(len(names))]
            _write_csv(d / fname, header, rows)
        plt = _plt()
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(inv.I_norm, cmap="viridis")
        ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
        ax.set_yticks(range(len(names)), names)
        ax.set_xlabel("transform")
        ax.set_ylabel("expert")
        fig.colorbar(im)
        fig.tight_layout()
        fig.savefig(d / "invariance_matrix.png", dpi=100)
        plt.close(fig)
        _stamp(d, "invariance")
        diag = int(sum(inv.I[i, i] < np.delete(inv.I[i], i).mean() for i in range(len(names))))
        print(f"seed {seed}: diagonal below row mean in {diag}/{len(names)} rows")


def cmd_discover(cfg: ExperimentConfig, args):
    out = Path(args.out)
    data = experiment.load_dataset(cfg)
    h = cfg.hash()
    for seed in _seeds(cfg, args):
        split = experiment.make_split(cfg, data, seed)
        d = _run_dir(out, seed, "graphmetro")
        model = _load_model(cfg, d)
        report = experiment.discover(cfg, model, split, seed)
        payload = {"config_hash": h, "seed": seed, "target": list(cfg.evaluation.discover_target), **report.to_dict()}
        _write_json(d / "shift_report.json", payload)
        plt = _plt()
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.bar(report.component_names, report.mean_probs)
        ax.set_ylim(0, 1)
        ax.set_ylabel("mean gate probability")
        ax.tick_params(axis="x", rotation=45)
        fig.tight_layout()
        fig.savefig(d / "shift_report.png", dpi=100)
        plt.close(fig)
        _stamp(d, "discover")
        print(f"seed {seed}: ranking {report.ranking()} gate accuracy {report.gating_accuracy:.4f}")


def _plot_envs(path, labels, series):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(8, 3))
    width = 0.8 / max(len(series), 1)
    x = np.arange(len(labels))
    for i, (name, vals) in enumerate(series.items()):
        ax.bar(x + i * width, vals, width, label=name)
    ax.set_xticks(x + width * (len(series) - 1) / 2, labels, rotation=45, ha="right")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def collect_results(out: Path, method: str, config_hash: str, seeds) -> list:
    """Environment results of ``method`` across seeds; refuses foreign hashes."""
    results = []
    for seed in seeds:
        path = _run_dir(out, seed, method) / "env_results.csv"
        if not path.exists():
            raise CommandError(f"missing results: {path}", EXIT_MISSING)
        for row in _read_csv(path):
            if row["config_hash"] != config_hash:
                raise CommandError(
                    f"config hash mismatch in {path}: {row['config_hash']} != {config_hash}"
                )
            results.append(EnvResult(int(row["env_id"]), row["env"], row["metric"], float(row["value"]), int(row["seed"])))
    return results


def cmd_report(cfg: ExperimentConfig, args):
    out = Path(args.out)
    h = cfg.hash()
    seeds = _seeds(cfg, args)
    if len(seeds) < 2:
        raise CommandError("report needs at least two seeds")
    baseline = collect_results(out, cfg.baseline, h, seeds)
    rows, series = [], {}
    for method in [m for m in cfg.methods if m != cfg.baseline]:
        res = collect_results(out, method, h, seeds)
        for r in summarize_trials(res, baseline):
            rows.append(
                [h, " ".join(map(str, seeds)), method, cfg.baseline, r["env"], _fmt(r["mean"]), _fmt(r["std"]),
                 f"{r['mean']:.4f}±{r['std']:.4f}", _fmt(r["baseline_mean"]), _fmt(r["baseline_std"]),
                 _fmt(r["t"]), _fmt(r["p_value"])]
            )
        summary = summarize_trials(res, baseline)
        series[method] = [r["mean"] for r in summary if r["env"] not in ("shifted", "all")]
        labels = [r["env"] for r in summary if r["env"] not in ("shifted", "all")]
        shifted = next(r for r in summary if r["env"] == "shifted")
        print(f"{method}: shifted {shifted['mean']:.4f}±{shifted['std']:.4f} "
              f"vs {cfg.baseline} {shifted['baseline_mean']:.4f}±{shifted['baseline_std']:.4f} p={shifted['p_value']:.3g}")
    if not rows:
        raise CommandError("report needs a method other than the baseline")
    header = ["config_hash", "seeds", "method", "baseline", "env", "mean", "std", "mean±std",
              "baseline_mean", "baseline_std", "t", "p_value"]
    _write_csv(out / "summary.csv", header, rows)
    _plot_envs(out / "summary.png", labels, series)
    _stamp(out, "report")
    print(f"wrote {out / 'summary.csv'}")


HANDLERS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "invariance": cmd_invariance,
    "discover": cmd_discover,
    "report": cmd_report,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmetro", description="Mixture-of-experts graph models under distribution shift.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="YAML config path or preset name")
    p.add_argument("--seed", type=int, default=None, help="run one seed instead of the config's list")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.add_argument("--method", default=None, help="restrict to one method")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    if args.method is not None and args.method not in cfg.methods:
        print(f"error: method {args.method!r} is not in the config's methods {cfg.methods}", file=sys.stderr)
        return EXIT_ERROR
    if args.out is None:
        args.out = cfg.output_dir
    try:
        HANDLERS[args.command](cfg, args)
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
