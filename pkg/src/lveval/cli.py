"""Command-line surface.

Subcommands: evaluate, sweep, game, subset, calibrate, apply, score-dist,
toy. Exit codes: 0 success, 2 input error, 3 internal regression in the
embedded toy check. All numeric output is deterministic for fixed inputs
and flags; --no-timestamp suppresses the only run-varying report field.
"""

from __future__ import annotations

import argparse
import sys
from datetime import datetime, timezone

from . import fixtures
from .calibration import (
    METHOD_NAMES,
    apply_calibration,
    fit_per_class,
    load_calibration_model,
    save_calibration_model,
)
from .core import EvalConfig, Interpolation, LvevalError
from .io import load_dataset, load_detections, render_report, save_detections, write_report
from .matching import federated_filter, match_dataset
from .metrics import (
    evaluate,
    game_comparison,
    score_distribution,
    subset_evaluate,
    sweep,
)
from .ranking import PRESETS, RankingPolicy, apply_policy

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_REGRESSION = 3

# Distinguishes "flag not given" from an explicit "--dets-per-image none".
_UNSET = object()


def _parse_limit(text: str) -> int | None:
    if text.lower() in ("none", "inf", "infinite"):
        return None
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("limit must be >= 1 or 'none'")
    return value


def _parse_iou_list(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad IoU list: {text!r}") from None
    return values


def _parse_interp(text: str) -> Interpolation:
    if text == "exact":
        return Interpolation.exact()
    if text == "sampled":
        return Interpolation.sampled(101)
    if text.startswith("sampled:"):
        try:
            return Interpolation.sampled(int(text.split(":", 1)[1]))
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    raise argparse.ArgumentTypeError(f"bad interpolation: {text!r}")


def _parse_groups(text: str) -> tuple[str, ...]:
    names = {"r": "rare", "c": "common", "f": "frequent"}
    out = []
    for part in text.split(","):
        part = part.strip().lower()
        if part in names:
            out.append(names[part])
        elif part in names.values():
            out.append(part)
        else:
            raise argparse.ArgumentTypeError(f"bad group: {part!r} (use r,c,f)")
    return tuple(out)


def _add_common_eval_flags(p: argparse.ArgumentParser, with_policy: bool = True) -> None:
    p.add_argument("--gt", required=True, help="groundtruth annotation JSON")
    p.add_argument("--dets", required=True, help="detection results JSON array")
    if with_policy:
        p.add_argument("--preset", choices=sorted(PRESETS), help="policy preset")
        p.add_argument("--dets-per-image", type=_parse_limit, default=_UNSET, metavar="N|none")
        p.add_argument("--dets-per-class", type=_parse_limit, default=_UNSET, metavar="K|none")
    p.add_argument("--iou", type=_parse_iou_list, default=None, help="comma list of IoU thresholds")
    p.add_argument("--interp", type=_parse_interp, default=None, help="exact or sampled:N")
    p.add_argument("--pooled", action="store_true", help="include the pooled AP block")
    p.add_argument("--format", choices=("json", "csv", "table"), default="table")
    p.add_argument("--out", default=None, help="write the report here")
    p.add_argument("--plot", action="store_true", help="render figures next to --out")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-timestamp", action="store_true")


def _resolve_policy(args) -> RankingPolicy:
    explicit_image = args.dets_per_image is not _UNSET
    explicit_class = args.dets_per_class is not _UNSET
    if args.preset is not None and (explicit_image or explicit_class):
        raise _InputError("--preset conflicts with explicit --dets-per-image/--dets-per-class")
    if args.preset is not None:
        return PRESETS[args.preset]
    if explicit_image or explicit_class:
        return RankingPolicy(
            max_dets_per_image=args.dets_per_image if explicit_image else None,
            max_dets_per_class=args.dets_per_class if explicit_class else None,
        )
    return PRESETS["ap-fixed"]


def _build_config(args, policy: RankingPolicy) -> EvalConfig:
    include_pooled = bool(args.pooled) or getattr(args, "preset", None) == "ap-pool"
    kwargs = {"ranking_policy": policy, "include_pooled": include_pooled}
    if args.iou is not None:
        kwargs["iou_thresholds"] = args.iou
    if args.interp is not None:
        kwargs["interpolation"] = args.interp
    return EvalConfig(**kwargs)


class _InputError(Exception):
    pass


def _timestamp(args) -> str | None:
    if args.no_timestamp:
        return None
    return datetime.now(timezone.utc).isoformat()


def _emit(result, args) -> None:
    """Print the table view and write the chosen format to --out."""
    sys.stdout.write(render_report(result, "table"))
    if args.out:
        write_report(result, args.out, args.format)


def _report_load_summary(name: str, summary) -> None:
    if summary.unknown_fields:
        total = sum(summary.unknown_fields.values())
        fields = ", ".join(sorted(summary.unknown_fields))
        sys.stderr.write(f"{name}: ignored {total} unknown field values ({fields})\n")
    if summary.clamped_boxes:
        sys.stderr.write(f"{name}: clamped {summary.clamped_boxes} negative box sizes\n")


def _plot_target(args, suffix: str) -> str:
    base = args.out
    if base.endswith(".json") or base.endswith(".csv") or base.endswith(".txt"):
        base = base.rsplit(".", 1)[0]
    return f"{base}.{suffix}"


def _load_inputs(args):
    dataset = load_dataset(args.gt)
    _report_load_summary("groundtruth", dataset.load_summary)
    dets = load_detections(args.dets, dataset)
    _report_load_summary("detections", dets.load_summary)
    return dataset, dets


def _cmd_evaluate(args) -> int:
    policy = _resolve_policy(args)
    config = _build_config(args, policy)
    if args.plot and not args.out:
        raise _InputError("--plot requires --out")
    dataset, dets = _load_inputs(args)
    report = evaluate(dataset, dets, config, n_threads=args.threads)
    report.generated_at = _timestamp(args)
    _emit(report, args)
    if args.plot:
        from . import plots

        surviving = apply_policy(federated_filter(dataset, dets), policy)
        mset = match_dataset(dataset, surviving, config.iou_thresholds, n_threads=args.threads)
        series = plots.curve_points(mset, dataset, config.iou_thresholds[0])
        plots.render_pr_curves(series, _plot_target(args, "pr.svg"))
        plots.write_pr_points_csv(series, _plot_target(args, "pr_points.csv"))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    policy = _resolve_policy(args)
    config = _build_config(args, policy)
    if args.plot and not args.out:
        raise _InputError("--plot requires --out")
    try:
        values = [_parse_limit(v) for v in args.values.split(",")]
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise _InputError(f"bad --values: {exc}") from None
    dataset, dets = _load_inputs(args)
    axis = args.axis.replace("-", "_")
    result = sweep(dataset, dets, axis, values, config, n_threads=args.threads)
    result.generated_at = _timestamp(args)
    for rep in result.reports:
        rep.generated_at = result.generated_at
    _emit(result, args)
    if args.plot:
        from . import plots

        plots.render_sweep(result, _plot_target(args, "sweep.svg"))
    return EXIT_OK


def _cmd_game(args) -> int:
    config = _build_config(args, RankingPolicy())
    dataset, dets = _load_inputs(args)
    result = game_comparison(
        dataset,
        dets,
        dets_per_image=args.dets_per_image,
        dets_per_class=args.dets_per_class,
        config=config,
        n_threads=args.threads,
    )
    result.generated_at = _timestamp(args)
    result.baseline.generated_at = result.generated_at
    result.gamed.generated_at = result.generated_at
    _emit(result, args)
    return EXIT_OK


def _cmd_subset(args) -> int:
    policy = _resolve_policy(args)
    config = _build_config(args, policy)
    dataset, dets = _load_inputs(args)
    report = subset_evaluate(dataset, dets, args.groups, config, n_threads=args.threads)
    report.generated_at = _timestamp(args)
    _emit(report, args)
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    dataset, dets = _load_inputs(args)
    model = fit_per_class(
        dataset, dets, args.method, min_samples=args.min_samples, n_threads=args.threads
    )
    save_calibration_model(model, args.out)
    n_fallback = sum(1 for e in model.per_category.values() if e.fallback)
    sys.stdout.write(
        f"calibrated {len(model.per_category)} categories with {args.method} "
        f"({n_fallback} fallbacks) -> {args.out}\n"
    )
    return EXIT_OK


def _cmd_apply(args) -> int:
    model = load_calibration_model(args.model)
    dets = load_detections(args.dets, dataset=None)
    calibrated = apply_calibration(dets, model)
    save_detections(calibrated, args.out)
    sys.stdout.write(f"rescored {len(calibrated)} detections -> {args.out}\n")
    return EXIT_OK


def _cmd_score_dist(args) -> int:
    if args.plot and not args.out:
        raise _InputError("--plot requires --out")
    dataset, dets = _load_inputs(args)
    dist = score_distribution(dataset, dets, bins=args.bins)
    dist.generated_at = _timestamp(args)
    rows = []
    for name, stats in dist.groups.items():
        mean = "-" if stats.mean_score is None else f"{stats.mean_score:.4f}"
        norm = "-" if stats.normalized_mean is None else f"{stats.normalized_mean:.4f}"
        rows.append([name, str(stats.count), mean, norm])
    from .io import format_table

    sys.stdout.write(
        format_table(["group", "count", "mean", "normalized"], rows)
    )
    if args.out:
        import json as _json

        from .core import IoFailure

        try:
            with open(args.out, "w", encoding="utf-8") as fp:
                _json.dump(dist.to_dict(), fp, indent=2)
                fp.write("\n")
        except OSError as exc:
            raise IoFailure(f"cannot write {args.out}: {exc}") from exc
    if args.plot:
        from . import plots

        plots.render_score_histogram(dist, _plot_target(args, "scores.svg"))
    return EXIT_OK


def _cmd_toy(args) -> int:
    result = fixtures.run_toy(n_threads=args.threads)
    from .io import format_table

    rows = [
        [
            str(o.scenario),
            str(o.ranking),
            f"{o.ap_a:.4f}",
            f"{o.ap_b:.4f}",
            f"{o.mean_ap:.4f}",
        ]
        for o in result.outcomes
    ]
    sys.stdout.write(format_table(["scenario", "ranking", "AP_A", "AP_B", "mAP"], rows))
    sys.stdout.write(
        "expected over scenarios: "
        f"ranking 1 mAP {result.weighted_mean_ap[1]:.4f}, "
        f"ranking 2 mAP {result.weighted_mean_ap[2]:.4f} "
        f"(class B under ranking 2: {result.weighted_ap_b[2]:.4f})\n"
    )
    if not result.ok:
        sys.stderr.write(
            f"toy regression: max deviation {result.max_deviation:.3e} exceeds 1e-9\n"
        )
        return EXIT_REGRESSION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lveval",
        description="Large-vocabulary detection evaluation: capped and pooled AP, "
        "ranking-policy demos, per-class score calibration.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="evaluate detections under a ranking policy")
    _add_common_eval_flags(p)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("sweep", help="evaluate across a list of cap values")
    _add_common_eval_flags(p)
    p.add_argument("--axis", choices=("dets-per-image", "dets-per-class"), required=True)
    p.add_argument("--values", required=True, help="comma list, e.g. 100,300,1000")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("game", help="compare per-image cap vs class-then-image caps")
    _add_common_eval_flags(p, with_policy=False)
    p.add_argument("--dets-per-image", type=_parse_limit, default=300)
    p.add_argument("--dets-per-class", type=int, default=10_000)
    p.set_defaults(fn=_cmd_game)

    p = sub.add_parser("subset", help="evaluate on a frequency-group subset of classes")
    _add_common_eval_flags(p)
    p.add_argument("--groups", type=_parse_groups, required=True, help="e.g. r,c,f")
    p.set_defaults(fn=_cmd_subset)

    p = sub.add_parser("calibrate", help="fit a per-class calibration model")
    p.add_argument("--method", choices=METHOD_NAMES, required=True)
    p.add_argument("--gt", required=True, help="calibration annotations")
    p.add_argument("--dets", required=True, help="calibration detections")
    p.add_argument("--out", required=True, help="model JSON output")
    p.add_argument("--min-samples", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-timestamp", action="store_true")
    p.set_defaults(fn=_cmd_calibrate)

    p = sub.add_parser("apply", help="rescore detections with a calibration model")
    p.add_argument("--model", required=True)
    p.add_argument("--dets", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-timestamp", action="store_true")
    p.set_defaults(fn=_cmd_apply)

    p = sub.add_parser("score-dist", help="score distribution per frequency group")
    p.add_argument("--gt", required=True)
    p.add_argument("--dets", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", default=None)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-timestamp", action="store_true")
    p.set_defaults(fn=_cmd_score_dist)

    p = sub.add_parser("toy", help="run the embedded two-class budget demo")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=_cmd_toy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _InputError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    except LvevalError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
