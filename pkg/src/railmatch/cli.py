"""``railmatch`` command line: gen, render, train, eval, match, ensemble, plot.

Results go to stdout as JSON; progress logs go to stderr. ``RAILMATCH_SEED``
overrides every seed taken from config files or defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

log = logging.getLogger("railmatch")

SEED_ENV = "RAILMATCH_SEED"


class CliError(Exception):
    """Diagnostic shown to the user with a nonzero exit."""


def _emit(payload: Any) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    sys.stdout.flush()


def _json_default(obj: Any):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"malformed JSON in {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError(f"{p}: expected a JSON object")
    return data


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _seed(args: argparse.Namespace, fallback: int) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise CliError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    if getattr(args, "seed", None) is not None:
        return args.seed
    return fallback


def _build(cls, data: dict, name: str):
    try:
        return cls.from_dict(data) if hasattr(cls, "from_dict") else cls(**data)
    except (TypeError, ValueError, KeyError) as exc:
        raise CliError(f"invalid {name} config: {exc}") from exc


def cmd_gen(args: argparse.Namespace) -> dict:
    from .synthetic import GenConfig, generate_dataset

    data = _read_json(args.config)
    if args.n_samples is not None:
        data["n_samples"] = args.n_samples
    config = _build(GenConfig, data, "generation")
    config = replace(config, master_seed=_seed(args, config.master_seed))
    try:
        config.validate()
    except ValueError as exc:
        raise CliError(f"invalid generation config: {exc}") from exc
    manifest = generate_dataset(config, args.out)
    return {"manifest": str(Path(args.out) / "manifest.jsonl"), "counts": manifest.counts(), "config": config.to_dict()}


def _image_spec(path: str | None):
    from .raster import ImageSpec

    return _build(ImageSpec, _read_json(path), "image") if path else ImageSpec()


def cmd_render(args: argparse.Namespace) -> dict:
    from .geometry import read_profile
    from .raster import image_digest, render_sample, save_png
    from .synthetic import load_manifest

    manifest = load_manifest(_existing(args.manifest, "manifest"))
    spec = _image_spec(args.image_config)
    records = manifest.split(args.split) if args.split else manifest.records
    if args.limit is not None:
        records = records[: args.limit]
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    digests: dict[str, list[str]] = {}
    for rec in records:
        rs = render_sample(
            read_profile(manifest.path(rec.designed_path)),
            read_profile(manifest.path(rec.measured_path)),
            rec.label,
            spec,
            args.mode,
            manifest.l_norm_mm,
            rec.id,
        )
        digests[rec.id] = [image_digest(im) for im in rs.images]
        if out:
            for i, im in enumerate(rs.images):
                suffix = "" if len(rs.images) == 1 else ("_designed", "_measured")[i]
                save_png(im, out / f"{rec.id}{suffix}.png")
    result: dict[str, Any] = {"count": len(digests), "mode": args.mode, "image_spec": spec.to_dict()}
    if out:
        digest_path = out / "digests.json"
        digest_path.write_text(json.dumps(digests, indent=2, sort_keys=True) + "\n")
        result["digests"] = str(digest_path)
    if args.check:
        expected = json.loads(_existing(args.check, "digest file").read_text())
        mismatched = sorted(k for k in expected if digests.get(k) != expected[k])
        result["check"] = {"compared": len(expected), "mismatched": mismatched, "ok": not mismatched}
        if mismatched:
            raise CliError(f"{len(mismatched)} digest mismatch(es), first: {mismatched[0]}")
    return result


def cmd_train(args: argparse.Namespace) -> dict:
    from .model import ModelConfig, build_model
    from .raster import ImageSpec
    from .synthetic import load_manifest
    from .training import TrainConfig, render_manifest_split, train, write_history_csv

    cfg = _read_json(args.config)
    unknown = set(cfg) - {"model", "train", "image"}
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    model_cfg = _build(ModelConfig, cfg.get("model", {}), "model")
    train_cfg = _build(TrainConfig, cfg.get("train", {}), "training")
    spec = _build(ImageSpec, cfg.get("image", {}), "image")
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    seed = _seed(args, train_cfg.seed)
    model_cfg = replace(model_cfg, seed=seed)
    train_cfg = replace(train_cfg, seed=seed)
    if spec.output_px != model_cfg.input_px:
        raise CliError(f"image size {spec.output_px} does not match model input_px {model_cfg.input_px}")

    manifest = load_manifest(_existing(args.manifest, "manifest"))
    log.info("rendering train/val splits")
    train_data = render_manifest_split(manifest, "train", spec, model_cfg.render_mode)
    val_data = render_manifest_split(manifest, "val", spec, model_cfg.render_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(model_cfg)
    result = train(model, model_cfg, train_data, val_data, train_cfg, spec, manifest.l_norm_mm, out_dir=out)
    write_history_csv(result.history, out / "history.csv")
    return {
        "checkpoint": str(out / "best.pt"),
        "history": str(out / "history.csv"),
        "best_epoch": result.checkpoint.metadata["epoch"],
        "epochs": len(result.history),
    }


def _matcher_for(args: argparse.Namespace):
    from .classical import IcpConfig, RansacConfig
    from .evaluation import ClassicalMatcher, EnsembleMatcher, EnsembleSpec
    from .training import NeuralMatcher

    chosen = [x for x in (args.checkpoint, args.ensemble, args.method) if x]
    if len(chosen) != 1:
        raise CliError("choose exactly one of --checkpoint, --ensemble, --method")
    if args.checkpoint:
        return NeuralMatcher(_existing(args.checkpoint, "checkpoint"))
    if args.ensemble:
        return EnsembleMatcher(_load_ensemble_spec(args.ensemble))
    if args.method == "icp":
        return ClassicalMatcher("icp", IcpConfig())
    return ClassicalMatcher("ransac", RansacConfig(seed=_seed(args, 0)))


def _load_ensemble_spec(path: str):
    from .evaluation import EnsembleSpec

    try:
        return EnsembleSpec.load(_existing(path, "ensemble spec"))
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid ensemble spec {path}: {exc}") from exc


def _criterion(args: argparse.Namespace):
    from .evaluation import SuccessCriterion

    try:
        return SuccessCriterion(args.tolerance)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def cmd_eval(args: argparse.Namespace) -> dict:
    from .evaluation import evaluate
    from .synthetic import load_manifest

    criterion = _criterion(args)
    matcher = _matcher_for(args)
    manifest = load_manifest(_existing(args.manifest, "manifest"))
    report = evaluate(matcher, manifest, args.split, criterion)
    if args.out:
        report.save(args.out)
    return report.to_dict()


def cmd_ensemble(args: argparse.Namespace) -> dict:
    from .evaluation import EnsembleMatcher, EnsembleSpec, evaluate, jensen_by_batch
    from .synthetic import load_manifest

    criterion = _criterion(args)
    if args.spec:
        spec = _load_ensemble_spec(args.spec)
    elif args.preset and args.members:
        try:
            spec = EnsembleSpec.preset(args.preset, args.members)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
    else:
        raise CliError("give --spec, or --preset with --members")
    matcher = EnsembleMatcher(spec)
    manifest = load_manifest(_existing(args.manifest, "manifest"))
    report = evaluate(matcher, manifest, args.split, criterion, batch_size=10**9)
    payload = report.to_dict()
    labels = np.array([(r.dx_mm, r.dy_mm) for r in manifest.split(args.split)])
    # one batch holds the whole split, so member predictions follow record order
    if matcher.last_member_preds is not None and matcher.last_member_preds.shape[1] == len(labels):
        rows = jensen_by_batch(matcher.last_member_preds, spec.weights, labels)
        payload["jensen"] = [{"ensemble_mse": a, "weighted_member_mse": b, "holds": a <= b + 1e-12} for a, b in rows]
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def cmd_match(args: argparse.Namespace) -> dict:
    from .classical import IcpConfig, RansacConfig, icp_translate, ransac_translate
    from .geometry import compute_wear, read_profile, translate

    try:
        designed = read_profile(_existing(args.designed, "designed profile"))
        measured = read_profile(_existing(args.measured, "measured profile"))
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if args.method == "icp":
        result = icp_translate(measured, designed, IcpConfig())
    elif args.method == "ransac":
        result = ransac_translate(measured, designed, RansacConfig(seed=_seed(args, 0)))
    else:
        from .training import predict_mm

        if not args.checkpoint:
            raise CliError("--method neural needs --checkpoint")
        result = predict_mm(_existing(args.checkpoint, "checkpoint"), designed, measured)
    payload = result.to_dict()
    if args.wear:
        payload["wear"] = compute_wear(designed, translate(measured, result.displacement)).to_dict()
    return payload


def cmd_plot(args: argparse.Namespace) -> dict:
    from .evaluation import EvalReport, error_scatter_export

    try:
        report = EvalReport.load(_existing(args.report, "report"))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(f"malformed report {args.report}: {exc}") from exc
    csv_path, svg_path = error_scatter_export(report, args.out)
    return {"csv": str(csv_path), "svg": str(svg_path)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="railmatch", description="Rail profile matching toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    parser.add_argument("--seed", type=int, default=None, help="global seed (RAILMATCH_SEED takes precedence)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="GenConfig JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-samples", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("render", help="render dataset samples to images")
    p.add_argument("--manifest", required=True, help="manifest file or dataset directory")
    p.add_argument("--mode", choices=("single", "separate"), default="single")
    p.add_argument("--image-config", help="ImageSpec JSON")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--limit", type=int)
    p.add_argument("--out", help="directory for PNGs and digests.json")
    p.add_argument("--check", help="digests.json to compare against")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="train a regressor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help='JSON with optional "model", "train", "image" sections')
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    def add_eval_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        p.add_argument("--tolerance", type=float, default=0.4, help="success tolerance in mm")
        p.add_argument("--out", help="write the report JSON here too")

    p = sub.add_parser("eval", help="evaluate a matcher on a split")
    add_eval_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--ensemble", help="ensemble spec JSON")
    p.add_argument("--method", choices=("icp", "ransac"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("match", help="match two profile CSVs")
    p.add_argument("--designed", required=True)
    p.add_argument("--measured", required=True)
    p.add_argument("--method", choices=("icp", "ransac", "neural"), default="icp")
    p.add_argument("--checkpoint", help="checkpoint for --method neural")
    p.add_argument("--wear", action="store_true", help="append a wear report")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("ensemble", help="evaluate a weighted checkpoint ensemble")
    add_eval_args(p)
    p.add_argument("--spec", help='JSON {"members": [...], "weights": [...]}')
    p.add_argument("--preset", choices=("mean4", "weighted3"))
    p.add_argument("--members", nargs="+")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("plot", help="error scatter SVG/CSV from an eval report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        _emit(args.func(args))
    except CliError as exc:
        print(f"railmatch {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"railmatch {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
