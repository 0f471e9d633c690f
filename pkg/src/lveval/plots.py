"""Static figure rendering for reports: PR curves, score histograms, sweeps.

Figures are written next to the delimited report output; SVG metadata is
pinned so repeated runs of the same evaluation produce stable files.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "lveval"

import matplotlib.pyplot as plt  # noqa: E402

from .core import Dataset, IoFailure  # noqa: E402
from .matching import OUTCOME_IGNORED, OUTCOME_TP, MatchSet  # noqa: E402
from .metrics import ScoreDistribution, SweepResult, pr_curve_from_flags  # noqa: E402

_MAX_CURVES = 30


def _save(fig, path) -> None:
    try:
        fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)


def curve_points(mset: MatchSet, dataset: Dataset, threshold: float):
    """(label, recall, precision) series for plotting and CSV dumps.

    Per-category curves at one threshold, largest categories first, capped
    at a readable number, plus the all-category pooled curve.
    """
    t = mset.threshold_index(threshold)
    by_size = sorted(
        (cid for cid in dataset.categories if mset.n_gt(cid) > 0),
        key=lambda c: (-mset.n_gt(c), c),
    )
    series = []
    for cid in by_size[:_MAX_CURVES]:
        sl = mset.category_slice(cid)
        outcome = mset.outcome[t, sl]
        kept = outcome != OUTCOME_IGNORED
        curve = pr_curve_from_flags(outcome[kept] == OUTCOME_TP, mset.n_gt(cid))
        name = dataset.categories[cid].name or str(cid)
        series.append((f"cat:{name}", curve.recall, curve.precision))
    total_gt = sum(mset.n_gt_by_category.values())
    if total_gt > 0:
        order = mset.pooled_order()
        outcome = mset.outcome[t, order]
        kept = outcome != OUTCOME_IGNORED
        curve = pr_curve_from_flags(outcome[kept] == OUTCOME_TP, total_gt)
        series.append(("pooled", curve.recall, curve.precision))
    return series


def render_pr_curves(series, path, title: str = "precision-recall") -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    for label, recall, precision in series:
        if label == "pooled":
            ax.plot(recall, precision, color="black", lw=2.0, label=label)
        else:
            ax.plot(recall, precision, lw=0.8, alpha=0.6)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    if any(label == "pooled" for label, _, _ in series):
        ax.legend(loc="lower left")
    fig.tight_layout()
    _save(fig, path)


def write_pr_points_csv(series, path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fp:
            writer = csv.writer(fp, lineterminator="\n")
            writer.writerow(["series", "recall", "precision"])
            for label, recall, precision in series:
                for r, p in zip(recall.tolist(), precision.tolist()):
                    writer.writerow([label, repr(r), repr(p)])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def render_score_histogram(dist: ScoreDistribution, path) -> None:
    groups = [g for g in ("rare", "common", "frequent", "unknown") if g in dist.groups]
    fig, axes = plt.subplots(1, max(len(groups), 1), figsize=(3.2 * max(len(groups), 1), 3.2))
    if len(groups) <= 1:
        axes = [axes]
    for ax, name in zip(axes, groups):
        stats = dist.groups[name]
        edges = stats.bin_edges
        centers = [(a + b) / 2 for a, b in zip(edges[:-1], edges[1:])]
        width = edges[1] - edges[0]
        ax.bar(centers, stats.histogram_counts, width=width * 0.9)
        mean = "-" if stats.mean_score is None else f"{stats.mean_score:.3f}"
        ax.set_title(f"{name} (n={stats.count}, mean={mean})", fontsize=9)
        ax.set_xlabel("score")
    axes[0].set_ylabel("detections")
    fig.tight_layout()
    _save(fig, path)


def render_sweep(result: SweepResult, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = list(range(len(result.values)))
    for attr, label in (
        ("mean_ap", "AP"),
        ("ap_rare", "AP_r"),
        ("ap_common", "AP_c"),
        ("ap_frequent", "AP_f"),
    ):
        ys = [getattr(r, attr) for r in result.reports]
        if all(v is None for v in ys):
            continue
        ax.plot(xs, [float("nan") if v is None else 100.0 * v for v in ys], marker="o", label=label)
    ax.set_xticks(xs)
    ax.set_xticklabels([str(v) if v is not None else "none" for v in result.values])
    axis_label = {"dets_per_image": "dets/im", "dets_per_class": "dets/class"}[result.axis]
    ax.set_xlabel(axis_label)
    ax.set_ylabel("AP (points)")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
