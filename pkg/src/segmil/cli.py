"""Command-line surface: synth, train, eval, bench, gradcheck, convert.

Exit codes: 0 success, 1 usage error, 2 data error (bad files, bad
configs, mismatched shapes), 3 numeric failure (gradient check failed,
non-finite loss).  Every command is deterministic given its inputs and
seeds, and writes only inside its declared output locations.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import rng
from .bag_model import KIND_GROUP
from .data_io import (
    DataFormatError,
    DatasetManifest,
    SlideEntry,
    SynthSpec,
    generate_synthetic_dataset,
    make_folds,
    read_dataset_manifest,
    read_slide,
    read_slide_by_id,
    write_dataset_manifest,
)
from .metrics import EvalResult, best_threshold_metrics, write_scores_csv
from .mil_engine import check_loss_gradients, init_params, load_checkpoint
from .trainer import RunConfig, loss_components, predict_proba, predict_with_attention, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

BENCH_DEFAULT_CAP = 128


def _load_json(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DataFormatError(f"missing file: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"malformed JSON in {p}: {exc}") from exc


def _load_config(path: str | Path, seed_override: int | None) -> RunConfig:
    payload = _load_json(path)
    try:
        cfg = RunConfig.from_dict(payload)
    except (ValueError, TypeError) as exc:
        raise DataFormatError(f"bad run config {path}: {exc}") from exc
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def cmd_synth(args: argparse.Namespace) -> int:
    payload = _load_json(args.spec)
    try:
        spec = SynthSpec.from_dict(payload)
    except (TypeError, ValueError, KeyError) as exc:
        raise DataFormatError(f"bad synthetic spec {args.spec}: {exc}") from exc
    manifest = generate_synthetic_dataset(spec, args.out, force=args.force)
    n_pos = sum(1 for s in manifest.slides if s.label == 1)
    print(
        f"wrote dataset {manifest.name!r} to {args.out}: {len(manifest.slides)} slides "
        f"({n_pos} positive), feature dim {manifest.feature_dim}"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, args.seed)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=1))
        return EXIT_OK
    manifest = read_dataset_manifest(args.dataset)
    if manifest.feature_dim != cfg.d_in:
        raise DataFormatError(
            f"config expects d_in={cfg.d_in} but dataset {args.dataset} "
            f"has feature_dim={manifest.feature_dim}"
        )
    folds = make_folds(manifest, args.folds, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for val_fold in range(len(folds)):
        sink = None
        mask_file = None
        if args.dump_masks:
            mask_file = (out / f"masks_fold{val_fold}.jsonl").open("w", encoding="utf-8")

            def sink(epoch: int, report, _fh=mask_file) -> None:
                if report.plan is None:
                    return
                record = {"epoch": epoch, "slide_id": report.slide_id, "plan": report.plan.to_dict()}
                _fh.write(json.dumps(record) + "\n")

        try:
            report = train(manifest, args.dataset, folds, cfg, out, val_fold=val_fold, mask_sink=sink)
        finally:
            if mask_file is not None:
                mask_file.close()
        summary.append(
            {
                "fold": val_fold,
                "best_val_auc": report.best_val_auc,
                "best_epoch": report.best_epoch,
                "epochs_run": report.epochs_run,
                "checkpoint": report.checkpoint_path,
            }
        )
        print(
            f"fold {val_fold}: best val AUC {report.best_val_auc:.4f} "
            f"at epoch {report.best_epoch} ({report.epochs_run} epochs run)"
        )
    (out / "summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    return EXIT_OK


def _select_slides(manifest: DatasetManifest, split: str) -> list[SlideEntry]:
    if split == "all":
        return list(manifest.slides)
    chosen = [s for s in manifest.slides if s.fold == split]
    if not chosen:
        raise DataFormatError(
            f"split {split!r} matches no slide; available fold tags: "
            f"{sorted({s.fold for s in manifest.slides if s.fold is not None}) or 'none'}"
        )
    return chosen


def _eval_checkpoint(
    checkpoint: str | Path,
    manifest: DatasetManifest,
    dataset_dir: str | Path,
    slides: list[SlideEntry],
) -> tuple[EvalResult, list[tuple[str, int, float]], object, dict]:
    params, header = load_checkpoint(checkpoint)
    d_in = params.dims[0]
    if manifest.feature_dim != d_in:
        raise DataFormatError(
            f"checkpoint {checkpoint} expects d_in={d_in} but dataset features "
            f"are {manifest.feature_dim}-dimensional"
        )
    use_group_tokens = bool(header.get("use_group_tokens", True))
    rows = []
    for entry in sorted(slides, key=lambda s: s.slide_id):
        bag = read_slide_by_id(manifest, dataset_dir, entry.slide_id)
        prob = predict_proba(params, bag, use_group_tokens)
        rows.append((entry.slide_id, entry.label, float(prob[1])))
    result = best_threshold_metrics([r[2] for r in rows], [r[1] for r in rows])
    return result, rows, params, header


def cmd_eval(args: argparse.Namespace) -> int:
    manifest = read_dataset_manifest(args.dataset)
    slides = _select_slides(manifest, args.split)
    result, rows, params, header = _eval_checkpoint(args.checkpoint, manifest, args.dataset, slides)
    if args.scores_csv:
        write_scores_csv(args.scores_csv, rows)
    if args.attention_csv:
        use_group_tokens = bool(header.get("use_group_tokens", True))
        lines = ["slide_id,token_index,kind,segment_id,attention"]
        for entry in sorted(slides, key=lambda s: s.slide_id):
            bag = read_slide_by_id(manifest, args.dataset, entry.slide_id)
            _, view, trace = predict_with_attention(params, bag, use_group_tokens)
            for i in range(view.n_tokens):
                kind = "group" if view.kinds[i] == KIND_GROUP else "ordinary"
                lines.append(
                    f"{entry.slide_id},{i},{kind},{int(view.segment_ids[i])},{float(trace.attn[i])!r}"
                )
        Path(args.attention_csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(result.to_json())
    return EXIT_OK


def _random_instance(gen: np.random.Generator, d_in: int, c: int):
    """A small random bag for gradient checking: tokens, segments, kinds, label."""
    n = int(gen.integers(3, 17))
    tokens = gen.standard_normal((n, d_in))
    segment_ids = gen.integers(-1, 3, size=n).astype(np.int64)
    kinds = np.zeros(n, dtype=np.int8)
    label = int(gen.integers(0, c))
    return tokens, segment_ids, kinds, label


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.h <= 0:
        print("error: finite-difference step --h must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        d_in, d, h_dim, c = (int(x) for x in args.dims.split(","))
    except ValueError:
        print(f"error: --dims must be 'd_in,d,h,c', got {args.dims!r}", file=sys.stderr)
        return EXIT_USAGE
    cfg = RunConfig(d_in=d_in, d=d, h=h_dim, c=c, seed=args.seed, epochs=1)
    worst = 0.0
    for i in range(args.instances):
        gen = rng.stream(args.seed, "gradcheck", i)
        tokens, segment_ids, kinds, label = _random_instance(gen, d_in, c)
        params = init_params(d_in, d, h_dim, c, rng.child_seed(args.seed, "gc-params", i))

        def loss_fn(p, toks):
            _, _, _, total, grads = loss_components(
                p, toks, segment_ids, kinds, f"gc_{i}", label, cfg, seed=int(args.seed) + i
            )
            if args.corrupt:
                grads.W_proj[0, 0] *= 2.0
            return total, grads

        report = check_loss_gradients(loss_fn, params, tokens, h=args.h, tolerance=args.tolerance)
        worst = max(worst, report.max_rel_error)
        status = "ok" if report.passed else "FAIL"
        print(
            f"instance {i}: max rel err {report.max_rel_error:.3e} "
            f"(worst block {report.worst_block}) {status}"
        )
        if not report.passed:
            for line in report.lines():
                print(line)
            print(f"gradient check FAILED at tolerance {args.tolerance:.1e}", file=sys.stderr)
            return EXIT_NUMERIC
    print(f"gradient check passed: {args.instances} instances, max rel err {worst:.3e}")
    return EXIT_OK


def _percent_agg(values: list[float]) -> str:
    arr = np.asarray(values, dtype=np.float64) * 100.0
    return f"{arr.mean():.2f}±{arr.std():.2f}"


def run_bench(grid: dict, out_csv: Path, work_dir: Path, force: bool = False) -> tuple[list, list]:
    """Execute a benchmark grid and write raw + aggregate CSV rows.

    The grid is variants x seeds x folds; each cell trains with one fold
    held out and reports that fold's AUC/F1/accuracy at the best
    checkpoint.  Rows are sorted canonically so the CSV is independent of
    execution order; aggregates are population mean+/-std in percent.
    """
    for key in ("seeds", "variants"):
        if key not in grid or not grid[key]:
            raise DataFormatError(f"bench grid needs a non-empty {key!r} list")
    folds_k = int(grid.get("folds", 3))
    seeds = [int(s) for s in grid["seeds"]]
    variants = grid["variants"]
    cap = int(grid.get("cap", BENCH_DEFAULT_CAP))
    n_cells = len(variants) * len(seeds) * folds_k
    if n_cells > cap:
        raise DataFormatError(f"grid size {n_cells} exceeds cap {cap}")

    work_dir.mkdir(parents=True, exist_ok=True)
    if "dataset_dir" in grid:
        dataset_dir = Path(grid["dataset_dir"])
        manifest = read_dataset_manifest(dataset_dir)
    elif "dataset" in grid:
        spec = SynthSpec.from_dict(grid["dataset"])
        dataset_dir = work_dir / "dataset"
        manifest = generate_synthetic_dataset(spec, dataset_dir, force=True)
    else:
        raise DataFormatError("bench grid needs 'dataset' (synth spec) or 'dataset_dir'")

    base = dict(grid.get("base", {}))
    raw_rows = []
    for variant in variants:
        overrides = dict(variant)
        name = overrides.pop("name", None)
        if not name:
            raise DataFormatError("every bench variant needs a 'name'")
        for seed in seeds:
            cfg = RunConfig.from_dict({**base, **overrides, "seed": seed})
            if folds_k == 1:
                all_ids = set(manifest.slide_ids())
                folds = [all_ids, all_ids]
                eval_folds = [0]
            else:
                folds = make_folds(manifest, folds_k, seed)
                eval_folds = list(range(folds_k))
            for f in eval_folds:
                cell_dir = work_dir / f"{name}_s{seed}_f{f}"
                report = train(manifest, dataset_dir, folds, cfg, cell_dir, val_fold=f)
                entries = [manifest.entry(sid) for sid in sorted(folds[f])]
                result, _, _, _ = _eval_checkpoint(
                    report.checkpoint_path, manifest, dataset_dir, entries
                )
                raw_rows.append(
                    (name, seed, f, result.auc, result.f1_at_best, result.accuracy_at_best)
                )

    raw_rows.sort(key=lambda r: (r[0], r[1], r[2]))
    agg_rows = []
    for name in sorted({r[0] for r in raw_rows}):
        rows = [r for r in raw_rows if r[0] == name]
        agg_rows.append(
            (
                name,
                "all",
                "all",
                _percent_agg([r[3] for r in rows]),
                _percent_agg([r[4] for r in rows]),
                _percent_agg([r[5] for r in rows]),
            )
        )

    lines = ["config,seed,fold,auc,f1,acc"]
    for name, seed, f, a, f1, acc in raw_rows:
        lines.append(f"{name},{seed},{f},{a!r},{f1!r},{acc!r}")
    for row in agg_rows:
        lines.append(",".join(str(x) for x in row))
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    out_csv.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return raw_rows, agg_rows


def cmd_bench(args: argparse.Namespace) -> int:
    grid = _load_json(args.grid)
    out_csv = Path(args.out_csv)
    work_dir = Path(args.work_dir) if args.work_dir else out_csv.parent / (out_csv.stem + "_work")
    raw, agg = run_bench(grid, out_csv, work_dir, force=args.force)
    print(f"bench complete: {len(raw)} cells -> {out_csv}")
    for row in agg:
        print(f"  {row[0]}: AUC {row[3]}  F1 {row[4]}  acc {row[5]}")
    return EXIT_OK


def cmd_convert(args: argparse.Namespace) -> int:
    root = Path(args.dataset_dir)
    if not root.is_dir():
        raise DataFormatError(f"missing dataset dir: {root}")
    if (root / "dataset.json").exists() and not args.force:
        raise DataFormatError(f"{root} already holds dataset.json; pass --force to rebuild")
    slide_dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").is_file())
    if not slide_dirs:
        raise DataFormatError(f"no slide directories (with manifest.json) found under {root}")
    entries = []
    feature_dim = None
    max_label = 0
    for sdir in slide_dirs:
        bag = read_slide(sdir)
        if feature_dim is None:
            feature_dim = bag.feature_dim
        elif bag.feature_dim != feature_dim:
            raise DataFormatError(
                f"slide {bag.slide_id!r} has feature dim {bag.feature_dim}, others have {feature_dim}"
            )
        max_label = max(max_label, bag.label)
        entries.append(SlideEntry(slide_id=bag.slide_id, path=sdir.name, label=bag.label))
    manifest = DatasetManifest(
        name=args.name or root.name,
        class_count=max(2, max_label + 1),
        feature_dim=int(feature_dim),
        slides=tuple(entries),
    )
    write_dataset_manifest(manifest, root)
    print(f"registered {len(entries)} slides into {root / 'dataset.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segmil",
        description="Segment-aware multiple instance learning: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset from a spec file")
    p.add_argument("--spec", required=True, help="JSON file with the synthetic dataset spec")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train across cross-validation folds")
    p.add_argument("--dataset", required=True, help="dataset directory (holds dataset.json)")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", required=True, help="output directory for reports and checkpoints")
    p.add_argument("--folds", type=int, default=3, help="number of folds (default 3)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.add_argument("--dump-masks", action="store_true", help="write per-step mask plans (JSONL)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="all", help="'all' or a fold tag from the manifest")
    p.add_argument("--scores-csv", default=None, help="optional per-slide score CSV")
    p.add_argument("--attention-csv", default=None, help="optional per-token attention CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run an ablation grid and write a results CSV")
    p.add_argument("--grid", required=True, help="JSON bench grid")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--work-dir", default=None, help="working directory (default: next to the CSV)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of the composite loss gradient")
    p.add_argument("--dims", default="16,8,4,2", help="d_in,d,h,c (default 16,8,4,2)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument(
        "--corrupt", action="store_true", help="fault-injection hook: corrupt one gradient entry"
    )
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("convert", help="register externally produced slide dirs as a dataset")
    p.add_argument("--dataset-dir", required=True, help="directory of slide subdirectories")
    p.add_argument("--name", default=None, help="dataset name (default: directory name)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_convert)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except (DataFormatError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
