"""Command-line entry point.

Exit codes: 0 success, 1 bad input (arguments, files, configuration),
2 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

from protofaith import fixtures
from protofaith.errors import InvariantError, ProtofaithError
from protofaith.io.bundle import load_bundle, save_bundle
from protofaith.io.dataset import load_image, load_manifest
from protofaith.io.export import write_dataset
from protofaith.io.netpbm import saliency_to_bytes, write_pgm
from protofaith.io.reports import write_reports
from protofaith.metrics import FILL_POLICIES, FillPolicy
from protofaith.model import PROTOPNET_TOP10, PROTOTREE_THRESHOLD, TargetPolicy, project_prototypes, select_targets
from protofaith.pipeline import (
    DEFAULT_METHODS,
    enumerate_cases,
    evaluate_deletion,
    evaluate_relevance,
    load_entries,
    protocol_defaults,
    resolve_fill,
    thread_count,
)
from protofaith.saliency import (
    METHODS,
    PATCH_FRACTION,
    UPSAMPLE_PROTOPNET,
    UPSAMPLE_PROTOTREE,
    compute_saliency,
    crop_patch,
    percentile_mask,
    top_fraction_mask,
)

DEFAULTS = protocol_defaults()


class UsageError(ProtofaithError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _methods(text: str) -> list[str]:
    names = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in METHODS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad or text!r}; choose from {', '.join(METHODS)}")
    return names


def _fraction(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"{text} is not in (0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protofaith", description="Faithfulness and relevance evaluation of prototype part visualisations.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("project", help="project prototypes onto the manifest's training images")
    p.add_argument("bundle")
    p.add_argument("manifest")
    p.add_argument("--out", help="where to write the updated bundle (default: overwrite BUNDLE)")

    p = sub.add_parser("explain", help="saliency maps and part patches for one image")
    p.add_argument("bundle")
    p.add_argument("image")
    p.add_argument("--method", type=_methods, default=["upsample"])
    p.add_argument("--policy", choices=(PROTOPNET_TOP10, PROTOTREE_THRESHOLD))
    p.add_argument("--theta", type=float)
    p.add_argument("--manifest", help="manifest supplying normalization and fill values")
    p.add_argument("--fraction", type=_fraction, default=PATCH_FRACTION)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="explain_out")

    def add_eval(p, method_default):
        p.add_argument("bundle")
        p.add_argument("manifest")
        p.add_argument("--method", type=_methods, default=list(method_default))
        p.add_argument("--fill", choices=FILL_POLICIES, default=DEFAULTS["fill"])
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--roles", choices=("both", "prototype", "test-patch"), default="both")
        p.add_argument("--out", default="reports")
        p.add_argument("--timings", action="store_true", help="also write timings.csv (not reproducible)")

    p = sub.add_parser("eval-deletion", help="deletion curves and AUDC")
    add_eval(p, DEFAULT_METHODS)
    p.add_argument("--amax", type=_fraction, default=DEFAULTS["deletion_amax"])
    p.add_argument("--step", type=_fraction, default=DEFAULTS["deletion_step"])

    p = sub.add_parser("eval-relevance", help="intersection of top saliency with the object mask")
    add_eval(p, DEFAULT_METHODS)
    p.add_argument("--a", type=_fraction, default=DEFAULTS["patch_fraction"])
    p.add_argument("--threshold", type=float, default=DEFAULTS["relevance_threshold"])

    p = sub.add_parser("erf", help="effective receptive field from extended deletion curves")
    add_eval(p, ("prp",))
    p.add_argument("--amax", type=_fraction, default=DEFAULTS["erf_amax"])
    p.add_argument("--step", type=_fraction, default=DEFAULTS["erf_step"])
    p.add_argument("--tau", type=float, default=DEFAULTS["erf_tau"])

    p = sub.add_parser("gen-fixture", help="write a synthetic bundle, manifest and images")
    p.add_argument("--kind", choices=("planted", "random", "flat", "false-bias"), default="planted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--simfn", choices=("neg_exp", "log_ratio"), default="neg_exp")
    p.add_argument("--out", default="fixture")
    return parser


def _roles(value: str) -> tuple:
    return ("prototype", "test-patch") if value == "both" else (value,)


def _model_name(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _parameters(args, fill) -> dict:
    params = dict(DEFAULTS)
    params.update(
        {
            "command": args.command,
            "methods": list(args.method),
            "fill": fill.kind,
            "fill_values": list(fill.values),
            "seed": args.seed,
            "roles": list(_roles(args.roles)),
            "threads": thread_count(),
        }
    )
    for key in ("amax", "step", "a", "threshold", "tau"):
        if hasattr(args, key):
            params[key] = getattr(args, key)
    return params


def cmd_project(args) -> int:
    model = load_bundle(args.bundle)
    manifest = load_manifest(args.manifest)
    entries = load_entries(model, manifest)
    chosen = [e for e in entries if e.split == "train"] or entries
    updated = project_prototypes(model, [e.image for e in chosen], [e.id for e in chosen])
    out = args.out or args.bundle
    save_bundle(updated, out)
    for i, prov in enumerate(updated.prototypes.provenance):
        print(f"prototype {i}: image {prov.image_id} cell ({prov.h}, {prov.w})")
    print(f"wrote {out}")
    return 0


def cmd_explain(args) -> int:
    model = load_bundle(args.bundle)
    if args.policy or args.theta is not None:
        kind = args.policy or model.policy.kind
        theta = model.policy.theta if args.theta is None else args.theta
        model = replace(model, policy=TargetPolicy(kind, theta, model.policy.top_k))
    mean, std, fill_values = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), None
    if args.manifest:
        manifest = load_manifest(args.manifest)
        mean, std, fill_values = manifest.mean, manifest.std, manifest.fill
    image = load_image(args.image, mean, std, model.input_shape[1:])
    x = image.tensor
    image_id = os.path.splitext(os.path.basename(args.image))[0]
    fill = FillPolicy.resolve("mean", fill_values) if fill_values else FillPolicy.resolve("gray")
    os.makedirs(args.out, exist_ok=True)
    results = []
    for target in select_targets(model, x, image_id):
        for method in args.method:
            sal = compute_saliency(model, x, target, method, seed=args.seed, image_id=image_id, fill=fill)
            if sal.method in (UPSAMPLE_PROTOPNET, UPSAMPLE_PROTOTREE):
                mask = percentile_mask(sal)
            else:
                mask = top_fraction_mask(sal, args.fraction)
            patch = crop_patch(x, mask, image_id)
            pgm = f"{image_id}_p{target.prototype}_{sal.method}.pgm"
            write_pgm(os.path.join(args.out, pgm), saliency_to_bytes(sal.values))
            results.append(
                {
                    "prototype": target.prototype,
                    "cell": [target.h, target.w],
                    "score": target.score,
                    "method": sal.method,
                    "label": sal.flags.get("label", sal.method),
                    "box": list(patch.box),
                    "mask_pixels": mask.count,
                    "degenerate": patch.degenerate,
                    "saliency": pgm,
                }
            )
    doc = {"image": image_id, "resized": image.resized, "policy": model.policy.kind, "seed": args.seed, "patches": results}
    with open(os.path.join(args.out, "explain.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def _eval_setup(args):
    model = load_bundle(args.bundle)
    manifest = load_manifest(args.manifest)
    fill = resolve_fill(args.fill, manifest)
    entries = load_entries(model, manifest)
    cases = enumerate_cases(model, entries, args.method, _roles(args.roles))
    return model, fill, cases


def _print_summary(written: dict, value_key: str) -> None:
    with open(written["summary"], encoding="utf-8") as fh:
        summary = json.load(fh)
    for g in summary["groups"]:
        value = g[value_key]
        shown = "n/a" if value is None else f"{value:.1f}"
        print(f"{g['method']:<20} {g['role']:<11} cases={g['cases']:<4} {value_key}={shown}")
    print(f"reports written to {os.path.dirname(written['summary'])}")


def cmd_eval_deletion(args) -> int:
    model, fill, cases = _eval_setup(args)
    rows, curves = evaluate_deletion(model, _model_name(args.bundle), cases, args.amax, args.step, fill, args.seed)
    if not rows:
        raise UsageError("no cases to evaluate (no prototype provenance in the manifest and no selected targets)")
    written = write_reports(rows, args.out, parameters=_parameters(args, fill), curves=curves, timings=args.timings)
    _print_summary(written, "mean_audc")
    return 0


def cmd_eval_relevance(args) -> int:
    model, fill, cases = _eval_setup(args)
    rows = evaluate_relevance(model, _model_name(args.bundle), cases, args.a, args.threshold, fill, args.seed)
    if not rows:
        raise UsageError("no cases with a segmentation mask to evaluate")
    written = write_reports(rows, args.out, parameters=_parameters(args, fill), timings=args.timings)
    _print_summary(written, "percent_irrelevant")
    return 0


def cmd_erf(args) -> int:
    model, fill, cases = _eval_setup(args)
    rows, curves = evaluate_deletion(model, _model_name(args.bundle), cases, args.amax, args.step, fill, args.seed, tau=args.tau)
    if not rows:
        raise UsageError("no cases to evaluate")
    written = write_reports(rows, args.out, parameters=_parameters(args, fill), curves=curves, timings=args.timings)
    for row in rows:
        area = "not reached" if row.erf_area is None else f"{100 * row.erf_area:.2f}%"
        print(f"{row.image_id} p{row.prototype} {row.role} {row.method}: effective receptive field {area}")
    print(f"reports written to {os.path.dirname(written['summary'])}")
    return 0


def cmd_gen_fixture(args) -> int:
    size = tuple(args.size) if args.size else None
    extra = {}
    if args.kind in ("planted", "false-bias"):
        gen = fixtures.gen_planted if args.kind == "planted" else fixtures.gen_false_bias
        fx = gen(args.seed, image_size=size or (32, 32), simfn=args.simfn)
        dataset = fx.as_dataset()
        extra = {
            "region": [fx.region.top, fx.region.left, fx.region.bottom, fx.region.right],
            "cell": list(fx.cell),
            "similarity": fx.similarity,
            "masked_similarity": fx.masked_similarity,
        }
    elif args.kind == "random":
        dataset = fixtures.gen_random(args.seed, size or (16, 16), simfn=args.simfn)
    else:
        dataset = fixtures.gen_flat(args.seed, size or (16, 16))
    paths = write_dataset(dataset, args.out, extra)
    for name in ("bundle", "manifest", "fixture"):
        print(f"{name}: {paths[name]}")
    return 0


COMMANDS = {
    "project": cmd_project,
    "explain": cmd_explain,
    "eval-deletion": cmd_eval_deletion,
    "eval-relevance": cmd_eval_relevance,
    "erf": cmd_erf,
    "gen-fixture": cmd_gen_fixture,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except (ProtofaithError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
