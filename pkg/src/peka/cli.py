"""Command-line entry point: data generation, alignment, evaluation, and
the adapter benchmark, all reproducible from explicit seeds.

Every subcommand accepts ``--config FILE`` (JSON, keys matching the flag
names with dashes as underscores); explicit flags override file values,
which override built-in defaults. Unknown keys are rejected. The default
seed comes from the ``PEKA_SEED`` environment variable when set. Exit
codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .adapters import AdapterSpec, trainable_fraction
from .alignment import AlignmentConfig, train_alignment
from .data import (GeneratorConfig, generate_synthetic, load_dataset,
                   load_dataset_csv)
from .data import save_dataset
from .encoders import init_student, init_teacher
from .errors import ConfigError, DataFormatError, PekaError, ShapeError
from .model_io import load_model, save_model
from .probe import cross_validate, read_eval_csv, select_hvg
from .report import BenchCell, BenchmarkReport

DEFAULT_SEED = 7

_GEN_DEFAULTS = {
    "n": 2000, "d_latent": 8, "d_shared": 4, "d_in": 32, "genes": 60,
    "cluster_count": 10, "noise_img": 0.1, "noise_expr": 0.0,
    "rate_scale": 3.0, "seed": None,
}
_ALIGN_DEFAULTS = {
    "adapter": "bone", "block_size": 4, "rank": 8, "alpha": 1.0,
    "dropout": 0.1, "adalora_r0": 8, "adalora_target_rank": None,
    "lambda1": 0.5, "lambda2": 0.5, "tau": 1.0, "clusters": 10,
    "epochs": 50, "batch_size": 32, "lr": 1e-4, "seed": None,
    "student_hidden": "64,64", "d_emb": 48,
    "teacher_hidden": "64", "teacher_d_emb": 32, "history": None,
}
_EVAL_DEFAULTS = {
    "folds": 5, "hvg": 50, "pca_k": None, "ridge_lambda": 1.0,
    "use_projected": False, "seed": None,
}
_BENCH_DEFAULTS = {
    "adapters": "none,lora,peka", "holdout": None,
    **{k: v for k, v in _ALIGN_DEFAULTS.items()
       if k not in ("adapter", "history")},
    **_EVAL_DEFAULTS,
}


def default_seed() -> int:
    raw = os.environ.get("PEKA_SEED")
    if raw is None:
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"PEKA_SEED must be an integer, got {raw!r}") from None


def derive_model_seeds(seed: int) -> tuple[int, int]:
    """Deterministic (student, teacher) init seeds from the run seed, so
    every adapter cell of a benchmark shares identical frozen models."""
    state = np.random.SeedSequence(seed).generate_state(2)
    return int(state[0]), int(state[1])


def _parse_hidden(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(part) for part in str(text).split(",") if part != "")
    except ValueError:
        raise ConfigError(f"hidden dims must be comma-separated integers, "
                          f"got {text!r}") from None
    if not dims:
        raise ConfigError("hidden dims cannot be empty")
    return dims


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults < config file < explicit flags; reject unknown
    config keys."""
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") \
                from exc
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        if value is None:
            value = file_values.get(key, default)
        resolved[key] = value
    if "seed" in resolved and resolved["seed"] is None:
        resolved["seed"] = default_seed()
    return resolved


def _write_sidecar(out_path: Path, command: str, resolved: dict) -> None:
    echo = {"command": command,
            "resolved": {k: v for k, v in sorted(resolved.items())}}
    Path(str(out_path) + ".config.json").write_text(
        json.dumps(echo, indent=2, sort_keys=True) + "\n")


def _load_any_dataset(path_text: str):
    path = Path(path_text)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    if path.suffix == ".csv":
        return load_dataset_csv(path)
    return load_dataset(path)


# -- subcommands ---------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    rv = _resolve(args, _GEN_DEFAULTS)
    cfg = GeneratorConfig(
        n=rv["n"], d_latent=rv["d_latent"], d_shared=rv["d_shared"],
        d_in=rv["d_in"], n_genes=rv["genes"],
        cluster_count=rv["cluster_count"], noise_img=rv["noise_img"],
        noise_expr=rv["noise_expr"], rate_scale=rv["rate_scale"],
        seed=rv["seed"])
    ds = generate_synthetic(cfg)
    out = Path(args.out)
    save_dataset(ds, out)
    _write_sidecar(out, "gen-data", rv)
    print(f"wrote {out} ({ds.n} samples, d_in={ds.d_in}, genes={ds.n_genes})")
    return 0


def _build_models(rv: dict, ds):
    student_seed, teacher_seed = derive_model_seeds(rv["seed"])
    student = init_student(student_seed, d_in=ds.d_in,
                           hidden_dims=_parse_hidden(rv["student_hidden"]),
                           d_emb=rv["d_emb"])
    teacher = init_teacher(teacher_seed, n_genes=ds.n_genes,
                           hidden_dims=_parse_hidden(rv["teacher_hidden"]),
                           d_emb=rv["teacher_d_emb"])
    return student, teacher


def _adapter_spec(rv: dict, adapter: str) -> AdapterSpec:
    return AdapterSpec(kind=adapter, block_size=rv["block_size"],
                       rank=rv["rank"], alpha=rv["alpha"],
                       dropout=rv["dropout"], adalora_r0=rv["adalora_r0"],
                       adalora_target_rank=rv["adalora_target_rank"])


def _alignment_config(rv: dict) -> AlignmentConfig:
    return AlignmentConfig(
        lambda1=rv["lambda1"], lambda2=rv["lambda2"], tau=rv["tau"],
        clusters=rv["clusters"], epochs=rv["epochs"],
        batch_size=rv["batch_size"], lr=rv["lr"], seed=rv["seed"])


def cmd_align(args: argparse.Namespace) -> int:
    rv = _resolve(args, _ALIGN_DEFAULTS)
    ds = _load_any_dataset(args.data)
    student, teacher = _build_models(rv, ds)
    spec = _adapter_spec(rv, rv["adapter"])
    config = _alignment_config(rv)
    model = train_alignment(student, teacher, ds, spec, config)
    out = Path(args.out)
    save_model(model, out)
    history_path = rv["history"] or str(out) + ".history.csv"
    model.write_history_csv(history_path)
    _write_sidecar(out, "align", rv)
    final = model.history[-1].total if model.history else float("nan")
    print(f"wrote {out} (adapter={spec.kind}, epochs={model.config.epochs}, "
          f"final total loss={final:.6g})")
    return 0


def _run_eval(model, ds, rv: dict, out_prefix: Path):
    if model.backbone.d_in != ds.d_in:
        raise ConfigError(f"model expects d_in={model.backbone.d_in} but "
                          f"dataset has d_in={ds.d_in}")
    hvg_idx = select_hvg(ds.expr_counts, rv["hvg"])
    embeddings = model.embed(ds.img_features, projected=bool(rv["use_projected"]))
    report = cross_validate(embeddings, ds.expr_counts, hvg_idx,
                            folds=rv["folds"], seed=rv["seed"],
                            pca_k=rv["pca_k"],
                            ridge_lambda=rv["ridge_lambda"],
                            gene_names=ds.gene_names)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(Path(str(out_prefix) + "_per_gene.csv"))
    Path(str(out_prefix) + "_summary.txt").write_text(report.to_text())
    return report


def _fold_means(report) -> list[float]:
    """Across-gene mean of each fold's defined correlations."""
    means = []
    for fold in range(report.fold_count):
        cells = [rec.per_fold[fold] for rec in report.per_gene.values()
                 if not rec.undefined[fold]]
        means.append(float(np.mean(cells)) if cells else 0.0)
    return means


def cmd_eval(args: argparse.Namespace) -> int:
    rv = _resolve(args, _EVAL_DEFAULTS)
    ds = _load_any_dataset(args.data)
    model_path = Path(args.model)
    if not model_path.exists():
        raise ConfigError(f"model file not found: {model_path}")
    model = load_model(model_path)
    out_prefix = Path(args.out_prefix)
    report = _run_eval(model, ds, rv, out_prefix)
    _write_sidecar(out_prefix, "eval", rv)
    print(f"mean PCC: {report.mean_pcc:.6f}")
    return 0


def _holdout_split(ds, fraction: float, seed: int):
    from .data import PairedDataset

    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"holdout fraction must be in (0, 1), got {fraction}")
    n = ds.n
    n_eval = int(round(fraction * n))
    if n_eval < 2 or n - n_eval < 1:
        raise ConfigError(f"holdout fraction {fraction} leaves too few samples")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0]))
    perm = rng.permutation(n)
    parts = []
    for idx in (perm[n_eval:], perm[:n_eval]):
        idx = np.sort(idx)
        parts.append(PairedDataset(
            img_features=np.ascontiguousarray(ds.img_features[idx]),
            expr_counts=np.ascontiguousarray(ds.expr_counts[idx]),
            gene_names=list(ds.gene_names),
            provenance=dict(ds.provenance)))
    return parts[0], parts[1]


def run_bench(data_paths: list[str], adapters: list[str], out_dir: Path,
              rv: dict) -> BenchmarkReport:
    """Train and evaluate every (dataset, adapter) cell, persisting each
    model and evaluation report under ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cells: list[BenchCell] = []
    timings: dict[str, float] = {}
    for data_path in data_paths:
        ds = _load_any_dataset(data_path)
        stem = Path(data_path).stem
        if rv["holdout"] is not None:
            align_ds, eval_ds = _holdout_split(ds, rv["holdout"], rv["seed"])
        else:
            align_ds = eval_ds = ds
        for adapter in adapters:
            cell = BenchCell(dataset=stem, adapter=adapter)
            cells.append(cell)
            started = time.perf_counter()
            try:
                student, teacher = _build_models(rv, ds)
                spec = _adapter_spec(rv, adapter)
                config = _alignment_config(rv)
                model = train_alignment(student, teacher, align_ds, spec,
                                        config)
                model_path = out_dir / f"{stem}__{adapter}.pekm"
                save_model(model, model_path)
                model.write_history_csv(out_dir / f"{stem}__{adapter}.history.csv")
                cell.model_path = model_path.name
                cell.trainable_fraction = trainable_fraction(model.backbone,
                                                             model.adapters)
                prefix = out_dir / f"{stem}__{adapter}"
                eval_report = _run_eval(model, eval_ds, rv, prefix)
                cell.mean_pcc = eval_report.mean_pcc
                cell.report_path = f"{stem}__{adapter}_per_gene.csv"
                cell.fold_pccs = _fold_means(eval_report)
            except PekaError as exc:
                cell.error = f"{type(exc).__name__}: {exc}"
            timings[f"{stem}__{adapter}"] = time.perf_counter() - started
    report = BenchmarkReport(cells=cells)
    (out_dir / "bench_report.csv").write_text(report.to_csv())
    (out_dir / "bench_report.txt").write_text(report.to_text())
    index = [{"dataset": c.dataset, "adapter": c.adapter,
              "mean_pcc": c.mean_pcc, "trainable_fraction": c.trainable_fraction,
              "fold_pccs": c.fold_pccs, "model": c.model_path,
              "report": c.report_path, "error": c.error}
             for c in cells]
    (out_dir / "bench_cells.json").write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n")
    meta = {"finished_unix": time.time(), "durations_sec": timings,
            "resolved": {k: rv[k] for k in sorted(rv)}}
    (out_dir / "bench_meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return report


def cmd_bench(args: argparse.Namespace) -> int:
    rv = _resolve(args, _BENCH_DEFAULTS)
    data_paths = [part for chunk in args.data for part in chunk.split(",")]
    adapters = [part.strip() for part in rv["adapters"].split(",") if part.strip()]
    if not adapters:
        raise ConfigError("adapter list is empty")
    report = run_bench(data_paths, adapters, Path(args.out_dir), rv)
    sys.stdout.write(report.to_text())
    return 1 if report.any_failed() else 0


def cmd_report(args: argparse.Namespace) -> int:
    out_dir = Path(args.dir)
    index_path = out_dir / "bench_cells.json"
    if not index_path.exists():
        raise ConfigError(f"no bench_cells.json under {out_dir}")
    cells = []
    for entry in json.loads(index_path.read_text()):
        cell = BenchCell(dataset=entry["dataset"], adapter=entry["adapter"],
                         trainable_fraction=entry["trainable_fraction"],
                         fold_pccs=entry["fold_pccs"] or [],
                         model_path=entry["model"] or "",
                         report_path=entry["report"] or "",
                         error=entry["error"])
        if cell.error is None and cell.report_path:
            _, cell.mean_pcc = read_eval_csv(out_dir / cell.report_path)
        cells.append(cell)
    report = BenchmarkReport(cells=cells)
    sys.stdout.write(report.to_text())
    return 0


# -- parser --------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--seed", type=int, default=None)


def _add_align_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--block-size", type=int, default=None)
    parser.add_argument("--rank", type=int, default=None)
    parser.add_argument("--alpha", type=float, default=None)
    parser.add_argument("--dropout", type=float, default=None)
    parser.add_argument("--adalora-r0", type=int, default=None)
    parser.add_argument("--adalora-target-rank", type=int, default=None)
    parser.add_argument("--lambda1", type=float, default=None)
    parser.add_argument("--lambda2", type=float, default=None)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--clusters", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--student-hidden", default=None)
    parser.add_argument("--d-emb", type=int, default=None)
    parser.add_argument("--teacher-hidden", default=None)
    parser.add_argument("--teacher-d-emb", type=int, default=None)


def _add_eval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--folds", type=int, default=None)
    parser.add_argument("--hvg", type=int, default=None)
    parser.add_argument("--pca-k", type=int, default=None)
    parser.add_argument("--ridge-lambda", type=float, default=None)
    parser.add_argument("--use-projected", action="store_const", const=True,
                        default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peka",
        description="Cross-modal adapter alignment and probing toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--d-latent", type=int, default=None)
    p.add_argument("--d-shared", type=int, default=None)
    p.add_argument("--d-in", type=int, default=None)
    p.add_argument("--genes", type=int, default=None)
    p.add_argument("--cluster-count", type=int, default=None)
    p.add_argument("--noise-img", type=float, default=None)
    p.add_argument("--noise-expr", type=float, default=None)
    p.add_argument("--rate-scale", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("align", help="run the knowledge-transfer stage")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--adapter", default=None,
                   choices=["none", "bone", "peka", "lora", "adalora"])
    p.add_argument("--history", default=None)
    _add_align_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="probe a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out-prefix", required=True)
    _add_eval_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="compare adapter strategies end to end")
    p.add_argument("--data", required=True, action="append")
    p.add_argument("--adapters", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--holdout", type=float, default=None)
    _add_align_flags(p)
    _add_eval_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="re-render a persisted benchmark")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PekaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
