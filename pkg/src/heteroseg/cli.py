"""Command-line entry points.

Verbs: train, eval, removal-suite, inspect, data synth|validate, report.
Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import load_manifest, save_center_files, split
from .errors import ConfigError, DataError, TrainingDiverged
from .harness import (
    apply_thread_cap,
    config_from_toml,
    evaluate_checkpoint,
    run_experiment,
    run_removal_suite,
)
from .latents import (
    EmbedMethod,
    collect_latents,
    embed_2d,
    rescaled_latents,
    scatter_svg,
    write_embedding_csv,
    write_latents_csv,
)
from .metrics import MetricReport
from .models import load_checkpoint
from .synth import default_synthetic_specs, generate_synthetic_centers, specs_from_json


def _add_data_args(parser, require: bool = True):
    group = parser.add_mutually_exclusive_group(required=require)
    group.add_argument("--manifest", help="dataset manifest JSON")
    group.add_argument(
        "--synthetic",
        help="synthetic spec JSON, or 'default' for the built-in three-center scenario",
    )
    parser.add_argument("--n-samples", type=int, default=240, help="samples per default synthetic center")
    parser.add_argument("--image-size", type=int, default=64, help="synthetic image side")


def _load_data(args):
    if getattr(args, "manifest", None):
        manifest = load_manifest(args.manifest)
        return list(manifest.centers), manifest.topology
    if args.synthetic == "default":
        specs = default_synthetic_specs(args.n_samples)
        image_size = args.image_size
    else:
        specs, image_size = specs_from_json(args.synthetic)
    return generate_synthetic_centers(specs, image_size=image_size)


def _cmd_train(args) -> int:
    config = config_from_toml(args.config)
    artifact = run_experiment(config)
    print(f"run complete: {artifact.out_dir}")
    print(artifact.report.to_csv(include_removed=config.removal is not None), end="")
    return 0


def _cmd_eval(args) -> int:
    datasets, topology = _load_data(args)
    report, _, _, _ = evaluate_checkpoint(args.checkpoint, datasets, topology, out_dir=args.out)
    print(report.to_csv(include_removed=any(r.removed for r in report.rows)), end="")
    return 0


def _cmd_removal_suite(args) -> int:
    config = config_from_toml(args.config)
    artifacts, combined = run_removal_suite(config)
    print(f"removal suite complete: {len(artifacts)} runs, combined report {combined}")
    return 0


def _cmd_inspect(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    datasets, topology = _load_data(args)
    tests = [
        split(d, meta.get("split_fraction", 0.8), seed=[meta.get("split_seed", 0), i])[1]
        for i, d in enumerate(datasets)
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    method = EmbedMethod[args.method.upper()]

    def emit(records, suffix=""):
        result = embed_2d(records, method, external_path=args.embedding)
        write_latents_csv(records, out / f"latents{suffix}.csv")
        write_embedding_csv(records, result, out / f"embedding{suffix}.csv")
        (out / f"score{suffix}.txt").write_text(repr(result.separability) + "\n")
        scatter_svg(result, out / f"scatter{suffix}.svg")
        return result

    result = emit(collect_latents(model, tests))
    print(f"separability: {result.separability:.4f}")
    if args.rescale_area is not None:
        rescaled = emit(rescaled_latents(model, tests, args.rescale_area), suffix="_rescaled")
        print(f"separability after rescaling: {rescaled.separability:.4f}")
    return 0


def _cmd_data_synth(args) -> int:
    if args.spec == "default":
        specs = default_synthetic_specs(args.n_samples)
        image_size = args.image_size
    else:
        specs, image_size = specs_from_json(args.spec)
    datasets, topology = generate_synthetic_centers(specs, image_size=image_size)
    manifest_path = save_center_files(datasets, topology, args.out)
    total = sum(len(d) for d in datasets)
    print(f"wrote {total} samples across {len(datasets)} centers; manifest {manifest_path}")
    return 0


def _cmd_data_validate(args) -> int:
    manifest = load_manifest(args.manifest)
    for center in manifest.centers:
        print(f"{center.center_id}: {len(center)} records, availability {center.availability.names()}")
    print(f"OK: {len(manifest.centers)} centers")
    return 0


def _cmd_report(args) -> int:
    text = Path(args.input).read_text()
    report = MetricReport.from_csv(text)
    if args.format == "markdown":
        rendered = report.to_markdown()
    else:
        rendered = report.to_csv(include_removed=any(r.removed for r in report.rows))
    if args.out:
        Path(args.out).write_text(rendered)
    else:
        print(rendered, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heteroseg",
        description="Landmark vs pixel segmentation under heterogeneous multi-center labels",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment from a TOML config")
    p_train.add_argument("--config", required=True)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    p_eval.add_argument("--checkpoint", required=True)
    _add_data_args(p_eval)
    p_eval.add_argument("--out", default=None, help="write report.csv here")
    p_eval.set_defaults(func=_cmd_eval)

    p_suite = sub.add_parser("removal-suite", help="run the four label-removal experiments")
    p_suite.add_argument("--config", required=True)
    p_suite.set_defaults(func=_cmd_removal_suite)

    p_inspect = sub.add_parser("inspect", help="collect latents, embed, score separability")
    p_inspect.add_argument("--checkpoint", required=True)
    _add_data_args(p_inspect)
    p_inspect.add_argument("--out", required=True)
    p_inspect.add_argument("--method", choices=["pca", "external"], default="pca")
    p_inspect.add_argument("--embedding", default=None, help="external reducer output CSV")
    p_inspect.add_argument("--rescale-area", type=float, default=None,
                           help="also inspect after lung-bbox rescaling to this area (px^2)")
    p_inspect.set_defaults(func=_cmd_inspect)

    p_data = sub.add_parser("data", help="dataset tools")
    data_sub = p_data.add_subparsers(dest="data_command", required=True)
    p_synth = data_sub.add_parser("synth", help="generate a synthetic multi-center dataset")
    p_synth.add_argument("--spec", required=True, help="spec JSON path or 'default'")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--n-samples", type=int, default=240)
    p_synth.add_argument("--image-size", type=int, default=64)
    p_synth.set_defaults(func=_cmd_data_synth)
    p_validate = data_sub.add_parser("validate", help="check a manifest and its files")
    p_validate.add_argument("--manifest", required=True)
    p_validate.set_defaults(func=_cmd_data_validate)

    p_report = sub.add_parser("report", help="render a metric report")
    p_report.add_argument("--input", required=True, help="report CSV path")
    p_report.add_argument("--format", choices=["csv", "markdown"], default="csv")
    p_report.add_argument("--out", default=None)
    p_report.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        apply_thread_cap()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
