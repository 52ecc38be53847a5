"""Command-line entry point: ``caam {gen-data,train,eval,oracle,sweep}``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .data import DatasetFormatError, DatasetSpec, DatasetSpecError, generate_dataset, load_dataset, save_dataset
from .metrics import SUMMARY_FIELDS, evaluate_split, export_heatmap, collect_outputs, summary_csv
from .models import Checkpoint, load_checkpoint, save_checkpoint
from .scm import PositivityError, SCMValidationError, UndefinedConditionalError, check_scm, load_scm
from .trainer import ConfigError, TrainConfig, TrainHistory, TrainingError, train

log = logging.getLogger("caam")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
NUM_HEATMAPS = 16
EVAL_SPLITS = ("iid_test", "ood_test")
STUDIES = {
    "splits": [2, 3, 4, "all"],
    "layers": [1, 2, 4],
    "modes": ["erm", "erm_attention", "irm_fixed_partition", "caam_fixed_partition", "caam"],
}


class ValidationFailure(Exception):
    """Bad user input; maps to exit code 1."""


# -- helpers ---------------------------------------------------------------

def _read_json(path: str | Path, what: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationFailure(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationFailure(f"{what} {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationFailure(f"{what} {path} must contain a JSON object")
    return doc


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _prepare_out(out: str | Path, overwrite: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise ValidationFailure(f"output directory {out} is not empty (pass --overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, seeds: dict, dataset_checksum: str | None, artifacts: list[Path]) -> Path:
    """Record what produced the artifacts in ``out``; every listed file must exist."""
    files = {}
    for p in artifacts:
        if not p.exists():
            raise TrainingError(f"manifest references missing file {p}")
        files[str(p.relative_to(out))] = file_sha256(p)
    doc = {
        "format": "caam-experiment/1",
        "command": command,
        "config": config,
        "seeds": seeds,
        "dataset_checksum": dataset_checksum,
        "artifacts": files,
    }
    path = out / "manifest.json"
    _write_json(path, doc)
    return path


def _load_data(path: str | Path):
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise ValidationFailure(f"dataset not found: {exc}") from None
    except DatasetFormatError as exc:
        raise ValidationFailure(f"dataset {path}: {exc}") from None


def _load_config(path: str | None, seed: int | None) -> TrainConfig:
    doc = _read_json(path, "config") if path else {}
    cfg = TrainConfig.from_dict(doc)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def num_workers() -> int:
    raw = os.environ.get("CAAM_NUM_WORKERS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValidationFailure(f"CAAM_NUM_WORKERS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ValidationFailure("CAAM_NUM_WORKERS must be >= 1")
    return value


# -- gen-data --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec_path = args.spec or args.config
    doc = _read_json(spec_path, "dataset spec") if spec_path else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = DatasetSpec.from_dict(doc)
    out = _prepare_out(args.out, args.overwrite)
    dataset = generate_dataset(spec, workers=num_workers())
    manifest = save_dataset(dataset, out)
    print(f"wrote {sum(manifest['counts'].values())} samples to {out} (checksum {manifest['dataset_checksum'][:12]})")
    return EXIT_OK


# -- train -----------------------------------------------------------------

def _partition_extras(result) -> dict:
    extra = {}
    for i, entry in enumerate(result.partitions):
        extra[f"partition_{i}_splits"] = entry.splits
        extra[f"partition_{i}_theta"] = entry.theta
    if result.theta is not None:
        extra["theta_live"] = result.theta.detach().numpy()
    return extra


def run_training(cfg: TrainConfig, dataset, out: Path) -> dict:
    """Train, then write checkpoint, histories, reports and the manifest."""
    result = train(cfg, dataset)
    ckpt = out / "checkpoint.npz"
    save_checkpoint(ckpt, result.model, {"train_config": cfg.to_dict()}, _partition_extras(result))
    parts = out / "partitions.json"
    _write_json(parts, result.partitions.to_json())
    hist = out / "history.ndjson"
    result.history.to_ndjson(hist)
    reports, rows = {}, []
    for name in EVAL_SPLITS:
        if name in dataset.splits and len(dataset[name]):
            rep = evaluate_split(result.model, dataset[name], dataset.spec, name)
            reports[name] = rep.to_dict()
            rows.append(rep.summary_row(cfg.mode))
    report = out / "report.json"
    _write_json(report, reports)
    summary = out / "summary.csv"
    summary.write_text(summary_csv(rows))
    write_manifest(
        out, "train", cfg.to_dict(), {"train": cfg.seed, "dataset": dataset.spec.seed}, dataset.checksum(),
        [ckpt, parts, hist, report, summary],
    )
    return reports


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    dataset = _load_data(args.data)
    out = _prepare_out(args.out, args.overwrite)
    reports = run_training(cfg, dataset, out)
    for name, rep in reports.items():
        print(f"{name}: accuracy {rep['accuracy']:.4f}")
    return EXIT_OK


# -- eval ------------------------------------------------------------------

def cmd_eval(args) -> int:
    try:
        ckpt: Checkpoint = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise ValidationFailure(f"checkpoint not found: {args.checkpoint}") from None
    dataset = _load_data(args.data)
    spec = dataset.spec
    bb = ckpt.model.cfg
    if bb.image_size != spec.image_size or bb.num_classes != spec.num_object_classes:
        raise ValidationFailure(
            f"checkpoint expects {bb.image_size}px images and {bb.num_classes} classes, "
            f"dataset has {spec.image_size}px and {spec.num_object_classes}"
        )
    out = _prepare_out(args.out, args.overwrite)
    seed = 0 if args.seed is None else args.seed
    mode = ckpt.header.get("train_config", {}).get("mode", "")
    reports, rows = {}, []
    for name in EVAL_SPLITS:
        if name in dataset.splits and len(dataset[name]):
            rep = evaluate_split(ckpt.model, dataset[name], spec, name)
            reports[name] = rep.to_dict()
            rows.append(rep.summary_row(mode))
    artifacts = [out / "report.json", out / "summary.csv"]
    _write_json(artifacts[0], reports)
    artifacts[1].write_text(summary_csv(rows))

    split = dataset.splits.get("ood_test") or dataset.splits.get("iid_test")
    if split is not None and len(split):
        pick = np.sort(np.random.default_rng(seed).choice(len(split), size=min(NUM_HEATMAPS, len(split)), replace=False))
        outputs = collect_outputs(ckpt.model, split.images[pick])
        if outputs.attention is not None:
            heat_dir = out / "heatmaps"
            heat_dir.mkdir()
            for j, i in enumerate(pick):
                path = heat_dir / f"sample_{int(i):05d}.png"
                export_heatmap(outputs.attention[j], split.images[i], path)
                artifacts.append(path)
        else:
            print("model has no attention maps; no heatmaps written")
    write_manifest(
        out, "eval", {"checkpoint": str(args.checkpoint), "header": ckpt.header}, {"heatmaps": seed},
        dataset.checksum(), artifacts,
    )
    for name, rep in reports.items():
        print(f"{name}: accuracy {rep['accuracy']:.4f}")
    return EXIT_OK


# -- oracle ----------------------------------------------------------------

def _fmt(dist) -> str:
    return "     -" if dist is None else " ".join(f"{v:6.4f}" for v in dist)


def cmd_oracle(args) -> int:
    try:
        scm, family = load_scm(args.scm)
    except FileNotFoundError:
        raise ValidationFailure(f"SCM file not found: {args.scm}") from None
    report = check_scm(scm, family)
    cols = " ".join(f"{'y=' + str(k):>6}" for k in range(scm.sizes[3]))
    header = f"{'x':>3}  {'estimator':<14} {cols}"
    print(header)
    print("-" * len(header))
    for row in report.rows:
        lines = [
            ("observational", row.observational),
            ("backdoor", row.backdoor),
            ("true", row.true),
            ("false", row.false.distribution),
            ("truth", row.truth),
        ]
        for name, dist in lines:
            print(f"{row.x:>3}  {name:<14} {_fmt(dist)}")
        print(f"{'':>3}  {'false gap':<14} {row.false.gap:.6f}")
        for note in row.notes:
            print(f"{'':>3}  note: {note}")
    if not report.ok:
        for failure in report.failures:
            print(f"FAIL {failure}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


# -- sweep -----------------------------------------------------------------

def sweep_cells(study: str, base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    if study not in STUDIES:
        raise ValidationFailure(f"unknown study {study!r}; choose from {sorted(STUDIES)}")
    cells = []
    for value in STUDIES[study]:
        if study == "splits":
            cfg = replace(base, mode="irm_fixed_partition", fixed_partition=value)
        elif study == "layers":
            cfg = replace(base, backbone=replace(base.backbone, num_caam_layers=value))
        else:
            fixed = base.fixed_partition or "all" if value in ("irm_fixed_partition", "caam_fixed_partition") else None
            cfg = replace(base, mode=value, fixed_partition=fixed, ablation="none")
        cells.append((str(value), cfg))
    return cells


def _run_cell(args: tuple) -> dict:
    study, value, cfg_doc, data_dir, out_dir = args
    torch.set_num_threads(1)
    row = {"study": study, "value": value, "mode": cfg_doc["mode"], "seed": cfg_doc["seed"]}
    try:
        cfg = TrainConfig.from_dict(cfg_doc)
        cell_out = Path(out_dir) / f"{study}_{value}"
        cell_out.mkdir(parents=True, exist_ok=True)
        reports = run_training(cfg, load_dataset(data_dir), cell_out)
        for name in EVAL_SPLITS:
            row[f"{name}_acc"] = reports.get(name, {}).get("accuracy")
        row["status"] = "ok"
        row["error"] = ""
    except Exception as exc:  # a failed cell must not stop the sweep
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


SWEEP_FIELDS = ["study", "value", "mode", "seed", "iid_test_acc", "ood_test_acc", "status", "error"]


def plot_sweep(rows: list[dict], path: Path, study: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [r["value"] for r in rows]
    xs = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for offset, key in ((-0.2, "iid_test_acc"), (0.2, "ood_test_acc")):
        vals = [r.get(key) if r.get(key) is not None else np.nan for r in rows]
        ax.bar(xs + offset, vals, width=0.4, label=key.replace("_acc", ""))
    ax.set_xticks(xs, labels)
    ax.set_xlabel(study)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="png")
    plt.close(fig)


def cmd_sweep(args) -> int:
    base = _load_config(args.config, args.seed)
    cells = sweep_cells(args.study, base)
    _load_data(args.data)  # fail fast on a missing or corrupt dataset
    out = _prepare_out(args.out, args.overwrite)
    jobs = [(args.study, value, cfg.to_dict(), str(args.data), str(out)) for value, cfg in cells]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(job) for job in jobs]
    table = out / f"sweep_{args.study}.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row.get(k) is None else row.get(k) for k in SWEEP_FIELDS})
    plot = out / f"sweep_{args.study}.png"
    plot_sweep(rows, plot, args.study)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in rows:
        print(f"{args.study}={r['value']}: {r['status']} ood {r.get('ood_test_acc')}")
    return EXIT_RUNTIME if failed else EXIT_OK


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caam", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON training config")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--spec", help="JSON dataset spec (defaults when omitted)")
    common(p, data=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and export heatmaps")
    p.add_argument("--checkpoint", required=True)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="exact causal-effect calculations on a discrete SCM")
    osub = p.add_subparsers(dest="oracle_command", required=True)
    pc = osub.add_parser("check", help="print all estimators and check their invariants")
    pc.add_argument("scm", help="SCM JSON file")
    pc.set_defaults(func=cmd_oracle)

    p = sub.add_parser("sweep", help="run a fixed grid of trainings")
    p.add_argument("--study", required=True, choices=sorted(STUDIES))
    p.add_argument("--parallel", type=int, default=1, help="cells to run at once")
    common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


VALIDATION_ERRORS = (
    ValidationFailure,
    ConfigError,
    DatasetSpecError,
    DatasetFormatError,
    SCMValidationError,
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, PositivityError, UndefinedConditionalError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
