"""Batch command-line front-end.

Every command reads inputs, writes its artifacts plus one manifest.json
into the output directory, and exits 0 on success, 2 on user/input
errors, 1 on internal failures. All randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from .manifest import ManifestError, read_manifest, write_manifest

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USER = 2

ENV_CACHE_ROOT = "SPINESEGDIFF_CACHE_ROOT"
ENV_OUT_ROOT = "SPINESEGDIFF_OUT_ROOT"


class CliError(Exception):
    """User-facing input/config problem; exits with code 2."""


def _resolve(path: str, env: str) -> Path:
    root = os.environ.get(env)
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _resolve_out(path: str) -> Path:
    out = _resolve(path, ENV_OUT_ROOT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_cache(path: str) -> Path:
    return _resolve(path, ENV_CACHE_ROOT)


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix == ".json":
        raw = json.loads(text)
    else:
        import yaml

        raw = yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise CliError(f"{p}: config must be a mapping")
    return raw


def _load_cache_samples(cache: Path):
    from .data import list_samples

    if not cache.is_dir():
        raise CliError(f"cache directory not found: {cache}")
    samples = list_samples(cache)
    if not samples:
        raise CliError(f"no cached samples in {cache}")
    return samples


def _argv(args: argparse.Namespace) -> list[str]:
    return list(getattr(args, "_argv", []))


# ---------------------------------------------------------------------------
# preprocess


def cmd_preprocess(args: argparse.Namespace) -> int:
    from .data import build_dataset

    images = Path(args.images)
    labels = Path(args.labels)
    meta = Path(args.meta)
    for p in (images, labels):
        if not p.is_dir():
            raise CliError(f"directory not found: {p}")
    if not meta.is_file():
        raise CliError(f"metadata table not found: {meta}")
    out = _resolve_out(args.out)

    errors: list[tuple[str, str]] = []
    samples, _records = build_dataset(
        images,
        labels,
        meta,
        out_dir=out,
        size=args.size,
        scheme_path=args.scheme,
        error_log=errors,
        jobs=args.jobs,
    )
    outputs = sorted(p.name for p in out.glob("*.npz"))
    if errors:
        log = out / "errors.log"
        log.write_text("".join(f"{name}: {reason}\n" for name, reason in sorted(errors)))
        for name, reason in sorted(errors):
            print(f"error: {name}: {reason}", file=sys.stderr)
        outputs.append(log.name)
    write_manifest(
        out,
        command="preprocess",
        argv=_argv(args),
        config={"size": args.size, "scheme": args.scheme, "jobs": args.jobs},
        inputs=[images, labels, meta],
        seed=args.seed,
        outputs=outputs,
    )
    print(f"cached {len(samples)} samples to {out}")
    return EXIT_USER if errors else EXIT_OK


# ---------------------------------------------------------------------------
# train


def _fold_records(samples):
    from .data import PatientRecord

    oblique: dict[str, bool] = {}
    for s in samples:
        oblique[s.patient_id] = oblique.get(s.patient_id, False) or s.oblique
    return [PatientRecord(patient_id=pid, oblique=flag) for pid, flag in sorted(oblique.items())]


def cmd_train(args: argparse.Namespace) -> int:
    from .evaluation import make_folds
    from .training import (
        TRAINERS,
        TrainConfig,
        default_config,
        filter_modality,
        save_checkpoint,
        write_curves,
    )

    cache = _resolve_cache(args.cache)
    samples = _load_cache_samples(cache)

    raw = default_config(args.model).to_dict()
    if args.config:
        raw.update(_load_config_file(args.config))
    for key in (
        "modality", "fold", "seed", "epochs", "batch_size", "lr",
        "schedule", "timesteps", "size", "preset", "max_steps", "val_every",
    ):
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    raw["model"] = args.model
    config = TrainConfig.from_dict(raw)

    if not 0 <= config.fold < args.kfold:
        raise CliError(f"fold must lie in [0, {args.kfold})")
    subset = filter_modality(samples, config.modality)
    if not subset:
        raise CliError(f"no samples left after modality filter '{config.modality}'")
    sizes = {s.size for s in subset}
    if sizes != {config.size}:
        raise CliError(f"cached sample size(s) {sorted(sizes)} != configured size {config.size}")

    folds = make_folds(_fold_records(subset), k=args.kfold, seed=config.seed)
    val_ids = folds.validation(config.fold)
    train_split = [s for s in subset if s.patient_id not in val_ids]
    val_split = [s for s in subset if s.patient_id in val_ids]

    result = TRAINERS[config.model](train_split, val_split, config)

    out = _resolve_out(args.out)
    ckpt = save_checkpoint(out / "checkpoint.pt", result)
    write_curves(out / "curves.csv", result.history)
    (out / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    inputs = [cache] + ([Path(args.config)] if args.config else [])
    write_manifest(
        out,
        command="train",
        argv=_argv(args),
        config=config.to_dict(),
        inputs=inputs,
        seed=config.seed,
        outputs=[ckpt.name, ckpt.name + ".json", "curves.csv", "config.json"],
    )
    print(
        f"trained {config.model} ({len(train_split)} train / {len(val_split)} val): "
        f"best {result.metric_name} = {result.best_metric:.4f} at step {result.best_step}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


def _collect_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        found = sorted(path.glob("*.npz"))
        if not found:
            raise CliError(f"no .npz samples in {path}")
        return found
    if path.is_file():
        return [path]
    raise CliError(f"input not found: {path}")


def _preseg_for(key: str, preseg_path: Path):
    from .preseg import load_preseg_mask

    if preseg_path.is_dir():
        for name in (f"{key}_label.nii.gz", f"{key}.nii.gz", f"{key}_label.nii", f"{key}.nii"):
            candidate = preseg_path / name
            if candidate.is_file():
                return load_preseg_mask(candidate)
        raise CliError(f"no preseg mask for '{key}' in {preseg_path}")
    if not preseg_path.is_file():
        raise CliError(f"preseg mask not found: {preseg_path}")
    return load_preseg_mask(preseg_path)


def cmd_infer(args: argparse.Namespace) -> int:
    import torch

    from .data import IMAGE_MAX, load_sample
    from .diffusion import make_schedule
    from .inference import EnsembleConfig, run_iisdm_inference, run_spinesegdiff_inference
    from .nifti import write_label_slice, write_map_slice
    from .preseg import refine_from_preseg
    from .training import load_checkpoint

    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise CliError(f"checkpoint not found: {ckpt_path}")
    model, info = load_checkpoint(ckpt_path)
    kind = info["descriptor"]["kind"]
    train_cfg = info["config"]
    schedule = make_schedule(train_cfg["schedule"], train_cfg["timesteps"])

    if (args.preseg is None) != (args.noise_t is None):
        raise CliError("--preseg and --noise-t must appear together")
    if args.preseg is not None and kind != "spinesegdiff":
        raise CliError(f"pre-segmentation refinement needs a spinesegdiff checkpoint, got '{kind}'")

    fuse_last = args.fuse_last if args.fuse_last is not None else min(10, args.ddim_steps)
    config = EnsembleConfig(
        samples=args.samples, ddim_steps=args.ddim_steps, fuse_last=fuse_last, seed=args.seed
    )

    in_path = _resolve_cache(args.input)
    sample_paths = _collect_inputs(in_path)
    samples = [load_sample(p) for p in sample_paths]
    preseg_path = Path(args.preseg) if args.preseg is not None else None
    if preseg_path is not None and preseg_path.is_file() and len(samples) > 1:
        raise CliError("a single --preseg file needs a single input sample")

    out = _resolve_out(args.out)

    def run_one(sample):
        if preseg_path is not None:
            preseg = _preseg_for(sample.key(), preseg_path)
            pred = refine_from_preseg(
                model, sample.image, preseg, args.noise_t, schedule, config
            )
            if pred.per_step_uncertainty.shape[0]:
                uncertainty = pred.per_step_uncertainty[-1]
            else:
                uncertainty = np.zeros_like(pred.fused)
            return sample, pred.label_map, pred.fused, uncertainty, pred.meta, pred.reverse_steps
        if kind == "spinesegdiff":
            pred = run_spinesegdiff_inference(model, sample.image, schedule, config)
            return (
                sample, pred.label_map, pred.fused,
                pred.per_step_uncertainty[-1], pred.meta, pred.reverse_steps,
            )
        if kind == "iisdm":
            pred = run_iisdm_inference(
                model, sample.image, schedule,
                samples=args.samples, seed=args.seed, ddim_steps=args.ddim_steps,
            )
            return sample, pred.label_map, pred.mean_mask, pred.variance, pred.meta, pred.reverse_steps
        with torch.no_grad():
            logits = model(torch.from_numpy(sample.image[None].astype(np.float32)) / IMAGE_MAX)
            probs = torch.softmax(logits, dim=1)[0].numpy()
        label = np.argmax(probs, axis=0).astype(np.int16)
        return sample, label, probs, np.zeros_like(probs), {"model": "unet"}, 0

    results = _pmap(run_one, samples, args.jobs)
    outputs = []
    for sample, label, fused, uncertainty, meta, reverse_steps in results:
        key = sample.key()
        write_label_slice(out / f"{key}_label.nii.gz", label)
        write_map_slice(out / f"{key}_fused.nii.gz", fused)
        write_map_slice(out / f"{key}_uncertainty.nii.gz", uncertainty)
        meta_payload = {
            **meta,
            "reverse_steps": reverse_steps,
            "patient_id": sample.patient_id,
            "modality": sample.modality,
            "checkpoint": str(ckpt_path),
        }
        (out / f"{key}_meta.json").write_text(
            json.dumps(meta_payload, indent=2, sort_keys=True) + "\n"
        )
        outputs.extend(
            [f"{key}_label.nii.gz", f"{key}_fused.nii.gz", f"{key}_uncertainty.nii.gz", f"{key}_meta.json"]
        )

    manifest_config = {
        "samples": args.samples,
        "ddim_steps": args.ddim_steps,
        "fuse_last": fuse_last,
        "noise_t": args.noise_t,
        "preseg": args.preseg,
        "model_kind": kind,
    }
    inputs = [ckpt_path, in_path] + ([preseg_path] if preseg_path is not None else [])
    write_manifest(
        out, command="infer", argv=_argv(args), config=manifest_config,
        inputs=inputs, seed=args.seed, outputs=outputs,
    )
    print(f"wrote predictions for {len(results)} slice(s) to {out}")
    return EXIT_OK


def _pmap(fn, items, jobs: int):
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# evaluate / table


def cmd_evaluate(args: argparse.Namespace) -> int:
    from .data import STRUCTURES
    from .evaluation import (
        dice_score,
        modality_comparison,
        records_from_metrics,
        write_metrics_csv,
        write_table_csv,
    )
    from .nifti import read_label_slice

    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise CliError(f"prediction directory not found: {pred_dir}")
    truth = _resolve_cache(args.truth)
    samples = _load_cache_samples(truth)
    label_files = sorted(pred_dir.glob("*_label.nii.gz"))
    if not label_files:
        raise CliError(f"no *_label.nii.gz predictions in {pred_dir}")
    by_key = {p.name[: -len("_label.nii.gz")]: p for p in label_files}

    rows = []
    scored = 0
    for sample in samples:
        pred_path = by_key.get(sample.key())
        if pred_path is None:
            print(f"note: no prediction for {sample.key()}, skipping", file=sys.stderr)
            continue
        pred = read_label_slice(pred_path)
        true = np.argmax(sample.mask, axis=0)
        for class_id, structure in enumerate(STRUCTURES, start=1):
            rows.append(
                {
                    "model": args.model,
                    "arm": args.arm,
                    "patient_id": sample.patient_id,
                    "modality": sample.modality,
                    "structure": structure,
                    "dice": dice_score(pred, true, class_id=class_id),
                }
            )
        scored += 1
    if not rows:
        raise CliError("no prediction/truth pairs matched")

    out = _resolve_out(args.out)
    write_metrics_csv(out / "metrics.csv", rows)
    table = modality_comparison(records_from_metrics(rows))
    write_table_csv(out / "summary.csv", table)
    write_manifest(
        out, command="evaluate", argv=_argv(args),
        config={"model": args.model, "arm": args.arm},
        inputs=[pred_dir, truth], seed=args.seed,
        outputs=["metrics.csv", "summary.csv"],
    )
    print(f"scored {scored} slice(s); wrote {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_table(args: argparse.Namespace) -> int:
    from .evaluation import (
        modality_comparison,
        read_metrics_csv,
        records_from_metrics,
        write_table_csv,
    )

    rows = []
    for path in args.metrics:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"metrics file not found: {p}")
        rows.extend(read_metrics_csv(p))
    if not rows:
        raise CliError("metrics files contain no rows")
    table = modality_comparison(records_from_metrics(rows))
    out = _resolve_out(args.out)
    write_table_csv(out / "table.csv", table)
    write_manifest(
        out, command="table", argv=_argv(args), config={},
        inputs=[Path(p) for p in args.metrics], seed=args.seed,
        outputs=["table.csv"],
    )
    print(f"wrote {out / 'table.csv'} ({len(table)} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# stats


def cmd_stats(args: argparse.Namespace) -> int:
    from .data import load_patient_records
    from .evaluation import (
        pathology_analysis,
        plot_pathology_boxplots,
        pool_by_patient,
        read_metrics_csv,
        write_stats_csv,
    )

    metrics_path = Path(args.metrics)
    if not metrics_path.is_file():
        raise CliError(f"metrics file not found: {metrics_path}")
    meta_path = Path(args.meta)
    if not meta_path.is_file():
        raise CliError(f"metadata table not found: {meta_path}")
    rows = read_metrics_csv(metrics_path)
    if not rows:
        raise CliError(f"{metrics_path}: no rows")
    records = load_patient_records(meta_path)
    pooled = pool_by_patient(
        [(r["patient_id"], r["modality"], r["structure"], r["dice"]) for r in rows]
    )
    results, skipped = pathology_analysis(
        pooled, records, alpha=args.alpha, cutoff=args.cutoff
    )

    out = _resolve_out(args.out)
    write_stats_csv(out / "stats.csv", results)
    outputs = ["stats.csv"]
    if skipped:
        (out / "skipped.log").write_text("".join(line + "\n" for line in skipped))
        outputs.append("skipped.log")
        for line in skipped:
            print(f"note: skipped {line}", file=sys.stderr)
    figures = plot_pathology_boxplots(pooled, records, out / "figures", cutoff=args.cutoff)
    outputs.extend(f"figures/{p.name}" for p in figures)
    write_manifest(
        out, command="stats", argv=_argv(args),
        config={"alpha": args.alpha, "cutoff": args.cutoff},
        inputs=[metrics_path, meta_path], seed=args.seed, outputs=outputs,
    )
    n_sig = sum(r.significant for r in results)
    print(f"ran {len(results)} tests ({n_sig} significant after correction); wrote {out / 'stats.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args: argparse.Namespace) -> int:
    from .diffusion import make_schedule
    from .inference import EnsembleConfig
    from .preseg import (
        DEFAULT_GRID,
        preseg_from_label_map,
        run_ablation,
        write_ablation_csv,
        write_ablation_meta,
    )
    from .synthetic import corrupt_mask
    from .training import load_checkpoint

    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise CliError(f"checkpoint not found: {ckpt_path}")
    model, info = load_checkpoint(ckpt_path)
    if info["descriptor"]["kind"] != "spinesegdiff":
        raise CliError("ablation needs a spinesegdiff checkpoint")
    train_cfg = info["config"]
    schedule = make_schedule(train_cfg["schedule"], train_cfg["timesteps"])

    cache = _resolve_cache(args.cache)
    samples = _load_cache_samples(cache)
    grid = tuple(int(x) for x in args.grid.split(",")) if args.grid else DEFAULT_GRID

    cases = []
    if args.preseg_dir:
        preseg_dir = Path(args.preseg_dir)
        if not preseg_dir.is_dir():
            raise CliError(f"preseg directory not found: {preseg_dir}")
        missing = []
        for sample in samples:
            try:
                cases.append((sample, _preseg_for(sample.key(), preseg_dir)))
            except CliError:
                missing.append(sample.key())
        if missing:
            raise CliError(f"missing preseg masks for: {', '.join(missing)}")
    else:
        for i, sample in enumerate(samples):
            corrupted = corrupt_mask(sample.mask, fraction=args.corrupt, seed=args.seed + i)
            classes = np.argmax(corrupted, axis=0)
            cases.append(
                (sample, preseg_from_label_map(classes, source="corrupted-truth", image_key=sample.key()))
            )

    fuse_last = args.fuse_last if args.fuse_last is not None else min(10, args.ddim_steps)
    config = EnsembleConfig(
        samples=args.samples, ddim_steps=args.ddim_steps, fuse_last=fuse_last, seed=args.seed
    )
    result = run_ablation(model, cases, schedule, config, grid=grid, jobs=args.jobs)
    out = _resolve_out(args.out)
    write_ablation_csv(out / "ablation.csv", result)
    write_ablation_meta(out / "ablation_meta.json", result, config)
    write_manifest(
        out, command="ablate", argv=_argv(args),
        config={
            "grid": list(result.t_values), "samples": args.samples,
            "ddim_steps": args.ddim_steps, "fuse_last": fuse_last,
            "corrupt": args.corrupt, "preseg_dir": args.preseg_dir,
        },
        inputs=[ckpt_path, cache], seed=args.seed,
        outputs=["ablation.csv", "ablation_meta.json"],
    )
    print(f"wrote ablation over T' = {list(result.t_values)} to {out / 'ablation.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# rerun


def cmd_rerun(args: argparse.Namespace) -> int:
    payload = read_manifest(args.manifest)
    argv = payload["argv"]
    if not argv or argv[0] == "rerun":
        raise CliError("manifest does not describe a re-runnable command")
    print(f"re-running: {' '.join(argv)}")
    return main(argv)


# ---------------------------------------------------------------------------
# parser


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=42, help="global random seed")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinesegdiff",
        description="Diffusion-based lumbar spine MRI segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="build the slice cache from NIfTI volumes")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=320)
    p.add_argument("--scheme", default=None, help="label scheme JSON (default bundled)")
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a cached dataset")
    p.add_argument("--model", required=True, choices=("spinesegdiff", "iisdm", "unet"))
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modality", choices=("t1", "t2", "both"), default=None)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--kfold", type=int, default=5)
    p.add_argument("--config", default=None, help="YAML/JSON config overrides")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--schedule", choices=("linear", "cosine"), default=None)
    p.add_argument("--timesteps", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--preset", choices=("full", "small"), default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--val-every", dest="val_every", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict masks and uncertainty maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="cached .npz sample or cache directory")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--ddim-steps", dest="ddim_steps", type=int, default=10)
    p.add_argument("--fuse-last", dest="fuse_last", type=int, default=None)
    p.add_argument("--preseg", default=None, help="external mask file or directory")
    p.add_argument("--noise-t", dest="noise_t", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against the cache")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="spinesegdiff", help="model tag for the report")
    p.add_argument("--arm", default="both", help="training arm tag (t1/t2/both)")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("table", help="merge metrics files into one summary table")
    p.add_argument("metrics", nargs="+", help="metrics.csv files from evaluate runs")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("stats", help="pathology-stratified significance tests")
    p.add_argument("--metrics", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--cutoff", type=int, default=4, help="Pfirrmann cut for disc degeneration")
    _add_common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("ablate", help="pre-segmentation noising-depth sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default=None, help="comma-separated T' values")
    p.add_argument("--preseg-dir", dest="preseg_dir", default=None)
    p.add_argument("--corrupt", type=float, default=0.1,
                   help="corrupted-truth preseg fraction when no --preseg-dir")
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--ddim-steps", dest="ddim_steps", type=int, default=10)
    p.add_argument("--fuse-last", dest="fuse_last", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("rerun", help="re-run a command from its manifest")
    p.add_argument("--manifest", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(argv) if argv is not None else sys.argv[1:]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._argv = argv

    from .data import DataError
    from .evaluation import EvaluationError
    from .nifti import NiftiError
    from .preseg import PresegError
    from .training import TrainingError

    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (
        DataError, NiftiError, PresegError, TrainingError, EvaluationError,
        ManifestError, ValueError, OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
