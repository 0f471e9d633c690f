"""Ranking policies: which detections survive into evaluation.

Two cap types compose into a policy: a per-class cap applied over the whole
evaluation set, then a per-image cap across all classes. The composition
order is fixed because that is the combination whose behavior the engine is
designed to expose; composing the other way has untested semantics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DetectionSet


@dataclass(frozen=True)
class RankingPolicy:
    max_dets_per_image: int | None = None
    max_dets_per_class: int | None = None

    def __post_init__(self):
        for v in (self.max_dets_per_image, self.max_dets_per_class):
            if v is not None and v < 1:
                raise ValueError("detection caps must be >= 1")

    def describe(self) -> str:
        k = self.max_dets_per_class
        n = self.max_dets_per_image
        return f"class<={k if k is not None else 'none'},image<={n if n is not None else 'none'}"


def _keep_top_per_group(dets: DetectionSet, group_ids: np.ndarray, limit: int) -> np.ndarray:
    """Boolean mask keeping each group's `limit` best rows.

    Best means (score desc, detection id asc); rows of DetectionSet are in
    ascending id order, so the mask preserves relative input order.
    """
    n = len(dets)
    if n == 0:
        return np.zeros(0, dtype=bool)
    order = np.lexsort((dets.det_ids, -dets.scores, group_ids))
    sorted_groups = group_ids[order]
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = sorted_groups[1:] != sorted_groups[:-1]
    start_positions = np.flatnonzero(new_group)
    starts = start_positions[np.cumsum(new_group) - 1]
    rank_in_group = np.arange(n) - starts
    keep = np.zeros(n, dtype=bool)
    keep[order[rank_in_group < limit]] = True
    return keep


def limit_per_image(dets: DetectionSet, n: int) -> DetectionSet:
    """Keep each image's n highest-scoring detections across all classes."""
    if n < 1:
        raise ValueError("per-image limit must be >= 1")
    return dets.filtered(_keep_top_per_group(dets, dets.image_ids, n))


def limit_per_class(dets: DetectionSet, k: int) -> DetectionSet:
    """Keep each class's k highest-scoring detections over the whole set."""
    if k < 1:
        raise ValueError("per-class limit must be >= 1")
    return dets.filtered(_keep_top_per_group(dets, dets.category_ids, k))


def apply_policy(dets: DetectionSet, policy: RankingPolicy) -> DetectionSet:
    """Apply the per-class cap (when set), then the per-image cap."""
    out = dets
    if policy.max_dets_per_class is not None:
        out = limit_per_class(out, policy.max_dets_per_class)
    if policy.max_dets_per_image is not None:
        out = limit_per_image(out, policy.max_dets_per_image)
    return out


# Presets for the two standard evaluation protocols and the pooled variant,
# which shares the fixed per-class budget.
POLICY_PER_IMAGE_300 = RankingPolicy(max_dets_per_image=300)
POLICY_PER_CLASS_10K = RankingPolicy(max_dets_per_class=10_000)

PRESETS: dict[str, RankingPolicy] = {
    "ap-old": POLICY_PER_IMAGE_300,
    "ap-fixed": POLICY_PER_CLASS_10K,
    "ap-pool": POLICY_PER_CLASS_10K,
}
