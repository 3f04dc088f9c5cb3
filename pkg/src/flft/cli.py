"""Command-line interface: ``flft {pretrain,cost,select,run,report}``.

Exit codes: 0 success, 2 configuration error, 3 infeasible scenario,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from flft import data as D
from flft.arch import assign_devices
from flft.config import ExperimentConfig, load_config
from flft.costmodel import TrainingShape, default_breakdown_entries, memory_breakdown_report
from flft.errors import ConfigError, FlftError
from flft.fedsim import ClassificationTask, LanguageTask, metrics_csv, run_experiment
from flft.nn.store import atomic_write_bytes, load_checkpoint, save_checkpoint
from flft.pretrain import pretrain
from flft.selection import select_architecture

COST_COLUMNS = (
    "layers", "scheme", "knob", "t_or_rank", "params_B", "gradsopt_B",
    "activations_B", "output_B", "peak_B", "upload_B", "flops",
)


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _write_text(path: Path, text: str):
    atomic_write_bytes(str(path), text.encode("utf-8"))


def _threads(args) -> Optional[int]:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("FLIFT_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"FLIFT_THREADS: not an integer: {env!r}") from exc
    return None


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    return cfg


def _out_dir(args, default: Path) -> Path:
    return Path(args.out) if args.out else default


def _fl_shape(cfg: ExperimentConfig) -> TrainingShape:
    return cfg.fl_config(cfg.seeds[0]).shape


def _trained_archs(cfg: ExperimentConfig) -> list:
    """Architectures as federated training sees them: classification swaps in a per-class head."""
    if cfg.data.task != "classification":
        return list(cfg.archs)
    return [replace(a, num_outputs=cfg.data.classes) for a in cfg.archs]


# --- subcommands ------------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    tokens = D.load_corpus(cfg.pretrain_corpus)
    train, held = D.split_tokens(tokens, cfg.pretrain_eval_fraction)
    out = _out_dir(args, cfg.checkpoint_dir)
    for arch in cfg.archs:
        store, history = pretrain(arch, train, cfg.pretrain, cfg.seeds[0], held, _log)
        path = out / cfg.checkpoint_path(arch).name
        save_checkpoint(str(path), store)
        rows = "step,loss\n" + "".join(f"{s},{loss!r}\n" for s, loss in history)
        _write_text(out / f"pretrain_l{arch.layers}_d{arch.embed_dim}.csv", rows)
        _log(f"wrote {path}")
    return 0


def cmd_cost(args) -> int:
    cfg = _load(args)
    shape = _fl_shape(cfg)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COST_COLUMNS, lineterminator="\n")
    w.writeheader()
    for arch in _trained_archs(cfg):
        for row in memory_breakdown_report(arch, default_breakdown_entries(arch), shape):
            w.writerow({"layers": arch.layers, **row})
    if args.out:
        _write_text(Path(args.out) / "cost.csv", buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def _devices(cfg: ExperimentConfig, seed: int):
    return assign_devices(cfg.scenario, seed)


def cmd_select(args) -> int:
    cfg = _load(args)
    seed = cfg.seeds[0]
    profiles = _devices(cfg, seed)
    archs = _trained_archs(cfg)
    res = select_architecture(archs, [p.constraint for p in profiles], _fl_shape(cfg))
    payload = {
        "seed": seed,
        "layers": res.arch.layers,
        "arch_index": res.arch_index,
        "avg_trained_layers": res.avg_trained,
        "trained_layers": list(res.trained_layers),
        "device_groups": [cfg.scenario.names[p.group] for p in profiles],
        "feasible_layers": [archs[i].layers for i in res.feasible],
    }
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        _write_text(Path(args.out) / "select.json", text)
    else:
        sys.stdout.write(text)
    return 0


def build_task(cfg: ExperimentConfig, seed: int, profiles, context: int):
    spec = cfg.data
    n = cfg.num_devices
    if spec.task == "language":
        tokens = D.load_corpus(spec.corpus)
        train, held = D.split_tokens(tokens, spec.eval_fraction)
        x, y = D.eval_windows(held, context, spec.eval_windows)
        return LanguageTask(D.partition_equal(train, n, context), x, y)
    full = D.gen_synth_classification(
        spec.classes, spec.per_class + spec.eval_per_class, spec.length, seed, spec.signal
    )
    train, held = D.stratified_split(full, spec.eval_per_class)
    groups = [p.group for p in profiles]
    if spec.partition == "constraint_correlated":
        shards, p_weak = D.partition_constraint_correlated(train, groups, spec.alpha, seed, spec.leak)
    else:
        shards, p_weak = D.partition_dirichlet(train, n, spec.alpha, seed), None
    return ClassificationTask(train, shards, held, p_weak)


def load_stores(cfg: ExperimentConfig) -> list:
    stores = []
    for arch in cfg.archs:
        path = cfg.checkpoint_path(arch)
        if not path.is_file():
            raise ConfigError(f"checkpoint missing: {path} (run `flft pretrain` first)")
        store = load_checkpoint(str(path))
        if store.arch != arch:
            raise ConfigError(f"checkpoint {path} holds {store.arch}, config expects {arch}")
        stores.append(store)
    return stores


def run_seed(cfg: ExperimentConfig, stores, seed: int, threads: Optional[int] = None, log=_log):
    """One federated run of ``cfg`` for ``seed``; returns the RunResult."""
    fl = cfg.fl_config(seed, threads)
    if cfg.data.task == "classification" and cfg.data.length != fl.shape.context:
        raise ConfigError("[data] length must equal [federated] context for classification")
    profiles = _devices(cfg, seed)
    task = build_task(cfg, seed, profiles, fl.shape.context)
    if log:
        log(f"{cfg.name} seed {seed}: strategy {cfg.strategy}")
    return run_experiment(fl, stores, [p.constraint for p in profiles], task, log)


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg.output)
    threads = _threads(args)
    stores = load_stores(cfg)
    for seed in cfg.seeds:
        res = run_seed(cfg, stores, seed, threads)
        stem = out / f"{cfg.name}_seed{seed}"
        _write_text(stem.with_suffix(".csv"), metrics_csv(res.metrics))
        summary = res.summary()
        summary.update({"name": cfg.name, "seed": seed})
        _write_text(stem.with_suffix(".json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
        save_checkpoint(str(stem.with_suffix(".flft")), res.final)
    return 0


# --- report -----------------------------------------------------------------------------------


def _read_metrics(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path}: no metrics rows")
    return rows


def _config_name(path: Path) -> str:
    stem = path.stem
    return stem.rsplit("_seed", 1)[0] if "_seed" in stem else stem


def summarize(paths) -> list[dict]:
    """Mean and population std of the final-round metrics per configuration, order independent."""
    groups: dict = {}
    for p in sorted(Path(x) for x in paths):
        groups.setdefault(_config_name(p), []).append(_read_metrics(p))
    out = []
    for name in sorted(groups):
        finals = [runs[-1] for runs in groups[name]]
        row = {"config": name, "seeds": len(finals)}
        for key in ("loss", "acc", "f1_macro", "f1_weak"):
            vals = np.array([float(f[key]) for f in finals])
            row[f"{key}_mean"] = float(np.mean(vals))
            row[f"{key}_std"] = float(np.std(vals))
        out.append(row)
    return out


def _plot(paths, out: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups: dict = {}
    for p in sorted(Path(x) for x in paths):
        groups.setdefault(_config_name(p), []).append(_read_metrics(p))
    written = []
    for key, label in (("loss", "held-out loss"), ("acc", "accuracy")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name in sorted(groups):
            runs = groups[name]
            rounds = [int(r["round"]) for r in runs[0]]
            if any([int(r["round"]) for r in run] != rounds for run in runs):
                raise ConfigError(f"{name}: seed files disagree on evaluation rounds")
            vals = np.array([[float(r[key]) for r in run] for run in runs])
            mean, std = vals.mean(0), vals.std(0)
            ax.plot(rounds, mean, label=name)
            ax.fill_between(rounds, mean - std, mean + std, alpha=0.2)
        ax.set_xlabel("round")
        ax.set_ylabel(label)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"report_{key}.png"
        tmp = out / f".tmp-report_{key}.png"
        fig.savefig(tmp, dpi=120)
        plt.close(fig)
        os.replace(tmp, path)
        written.append(path)
    return written


def cmd_report(args) -> int:
    paths = []
    for item in args.inputs:
        p = Path(item)
        paths.extend(sorted(p.glob("*.csv")) if p.is_dir() else [p])
    paths = [p for p in paths if not p.name.startswith(("report", "cost", "pretrain_"))]
    if not paths:
        raise ConfigError("report: no metrics CSV files given")
    rows = summarize(paths)
    out = Path(args.out) if args.out else Path(".")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    _write_text(out / "report.csv", buf.getvalue())
    _write_text(out / "report.json", json.dumps(rows, indent=2) + "\n")
    if not args.no_plots:
        _plot(paths, out)
    for row in rows:
        print(
            f"{row['config']}: acc {row['acc_mean']:.4f} +- {row['acc_std']:.4f}, "
            f"loss {row['loss_mean']:.4f} +- {row['loss_std']:.4f} ({row['seeds']} seeds)"
        )
    return 0


# --- entry point ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flft", description="Federated layer finetuning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, help="override the config seeds with one seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="client training threads (env FLIFT_THREADS)")

    for name, fn, help_ in (
        ("pretrain", cmd_pretrain, "pretrain every architecture centrally and write checkpoints"),
        ("cost", cmd_cost, "memory/upload/FLOPs table for each architecture and scheme"),
        ("select", cmd_select, "architecture selection for the scenario as JSON"),
        ("run", cmd_run, "federated run: metrics CSV, JSON summary, final checkpoint"),
    ):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.set_defaults(fn=fn)
    p = sub.add_parser("report", help="mean and std across seed files, plus figures")
    p.add_argument("inputs", nargs="+", help="metrics CSV files or directories")
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    common(p, config=False)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FlftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
