"""Greedy IoU matching of detections to groundtruth.

Matching runs per (image, category, IoU threshold): detections are visited
in (score desc, detection id asc) order and each takes the unmatched
non-ignore groundtruth of maximal IoU at or above the threshold. Failing
that, a detection may land on an ignore region (outcome Ignored), and on
(image, category) pairs flagged not-exhaustive an unmatched detection is
Ignored rather than counted as a false positive.

`match_group` is the readable single-group reference; `match_dataset`
batches the identical rule over the whole corpus through a compiled kernel
and is bit-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import BoundingBox, Dataset, Detection, DetectionSet, GroundTruthInstance

try:  # pragma: no cover - exercised implicitly on import
    from numba import njit
except ImportError:  # pragma: no cover - the plain-Python kernel is slow but identical
    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


OUTCOME_FP = 0
OUTCOME_TP = 1
OUTCOME_IGNORED = 2

_OUTCOME_NAMES = {OUTCOME_FP: "fp", OUTCOME_TP: "tp", OUTCOME_IGNORED: "ignored"}


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class MatchRecord:
    detection_id: int
    category_id: int
    image_id: int
    score: float
    iou_threshold: float
    outcome: str  # "tp", "fp" or "ignored"
    matched_gt_id: int | None = None


def match_group(
    dets: list[Detection],
    gts: list[GroundTruthInstance],
    threshold: float,
    not_exhaustive: bool = False,
) -> list[MatchRecord]:
    """Match one (image, category) group of detections at one threshold.

    Ties: equal scores resolve by ascending detection id; equal IoU against
    two groundtruths resolves to the lower groundtruth id. Ignore regions
    are only considered once no qualifying regular groundtruth remains, and
    may absorb any number of detections.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].id))
    gts = sorted(gts, key=lambda g: g.id)
    taken = [False] * len(gts)
    records = []
    for i in order:
        det = dets[i]
        best_j = -1
        best_iou = 0.0
        for j, gt in enumerate(gts):
            if gt.ignore or taken[j]:
                continue
            v = iou(det.bbox, gt.bbox)
            if v >= threshold and v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            taken[best_j] = True
            records.append(
                MatchRecord(
                    detection_id=det.id,
                    category_id=det.category_id,
                    image_id=det.image_id,
                    score=det.score,
                    iou_threshold=threshold,
                    outcome="tp",
                    matched_gt_id=gts[best_j].id,
                )
            )
            continue
        hit_ignore = False
        best_iou = 0.0
        for gt in gts:
            if not gt.ignore:
                continue
            v = iou(det.bbox, gt.bbox)
            if v >= threshold and v > best_iou:
                hit_ignore, best_iou = True, v
        outcome = "ignored" if (hit_ignore or not_exhaustive) else "fp"
        records.append(
            MatchRecord(
                detection_id=det.id,
                category_id=det.category_id,
                image_id=det.image_id,
                score=det.score,
                iou_threshold=threshold,
                outcome=outcome,
            )
        )
    return records


@njit(cache=True, nogil=True)
def _match_kernel(
    g_start,
    g_end,
    thresholds,
    det_boxes,
    det_ptr,
    gt_boxes,
    gt_ignore,
    gt_lo,
    gt_hi,
    group_nex,
    out_outcome,
    out_match,
):
    """Greedy matcher over group slices [g_start, g_end).

    det_ptr delimits each group's detection rows; gt_lo/gt_hi give the
    group's groundtruth range in the (group key, id)-sorted gt arrays. Rows
    are pre-sorted by (score desc, id asc) for detections and by id for
    groundtruth, so the scan order encodes every tie-break. Writes only
    into this range's columns, which keeps concurrent chunk calls disjoint.
    """
    n_thr = thresholds.shape[0]
    for g in range(g_start, g_end):
        d0, d1 = det_ptr[g], det_ptr[g + 1]
        if d1 == d0:
            continue
        k0, k1 = gt_lo[g], gt_hi[g]
        nd = d1 - d0
        ng = k1 - k0
        nex = group_nex[g]
        if ng == 0:
            code = OUTCOME_IGNORED if nex else OUTCOME_FP
            for t in range(n_thr):
                for i in range(nd):
                    out_outcome[t, d0 + i] = code
                    out_match[t, d0 + i] = -1
            continue
        ious = np.empty((nd, ng), dtype=np.float64)
        for i in range(nd):
            dx = det_boxes[d0 + i, 0]
            dy = det_boxes[d0 + i, 1]
            dw = det_boxes[d0 + i, 2]
            dh = det_boxes[d0 + i, 3]
            for j in range(ng):
                gx = gt_boxes[k0 + j, 0]
                gy = gt_boxes[k0 + j, 1]
                gw = gt_boxes[k0 + j, 2]
                gh = gt_boxes[k0 + j, 3]
                ix = min(dx + dw, gx + gw) - max(dx, gx)
                iy = min(dy + dh, gy + gh) - max(dy, gy)
                inter = max(ix, 0.0) * max(iy, 0.0)
                union = dw * dh + gw * gh - inter
                ious[i, j] = inter / union if union > 0.0 else 0.0
        taken = np.empty(ng, dtype=np.uint8)
        for t in range(n_thr):
            thr = thresholds[t]
            taken[:] = 0
            for i in range(nd):
                best_j = -1
                best_iou = 0.0
                for j in range(ng):
                    if gt_ignore[k0 + j] or taken[j]:
                        continue
                    v = ious[i, j]
                    if v >= thr and v > best_iou:
                        best_j = j
                        best_iou = v
                if best_j >= 0:
                    taken[best_j] = 1
                    out_outcome[t, d0 + i] = OUTCOME_TP
                    out_match[t, d0 + i] = k0 + best_j
                    continue
                hit_ignore = False
                for j in range(ng):
                    if gt_ignore[k0 + j] and ious[i, j] >= thr:
                        hit_ignore = True
                        break
                if hit_ignore or nex:
                    out_outcome[t, d0 + i] = OUTCOME_IGNORED
                else:
                    out_outcome[t, d0 + i] = OUTCOME_FP
                out_match[t, d0 + i] = -1


class MatchSet:
    """Match outcomes for a whole corpus, grouped by (category, threshold).

    Detection rows are stored once in per-category PR order, i.e. sorted by
    (category id asc, score desc, detection id asc); per-threshold outcome
    codes index into the same rows. `n_gt` is the non-ignore groundtruth
    count per category over the evaluated images.
    """

    def __init__(
        self,
        thresholds: tuple[float, ...],
        det_ids: np.ndarray,
        image_ids: np.ndarray,
        category_ids: np.ndarray,
        scores: np.ndarray,
        outcome: np.ndarray,  # (T, n) int8
        matched_gt_id: np.ndarray,  # (T, n) int64, -1 when not a TP
        n_gt: dict[int, int],
    ):
        self.thresholds = tuple(float(t) for t in thresholds)
        self.det_ids = det_ids
        self.image_ids = image_ids
        self.category_ids = category_ids
        self.scores = scores
        self.outcome = outcome
        self.matched_gt_id = matched_gt_id
        self._n_gt = dict(n_gt)
        self._cat_bounds: dict[int, tuple[int, int]] | None = None
        self._pooled_order: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.det_ids)

    def threshold_index(self, threshold: float) -> int:
        for i, t in enumerate(self.thresholds):
            if abs(t - threshold) < 1e-12:
                return i
        raise KeyError(f"threshold {threshold} not evaluated")

    def n_gt(self, category_id: int) -> int:
        return self._n_gt.get(category_id, 0)

    @property
    def n_gt_by_category(self) -> dict[int, int]:
        return dict(self._n_gt)

    def category_slice(self, category_id: int) -> slice:
        if self._cat_bounds is None:
            bounds = {}
            cats = self.category_ids
            if len(cats):
                change = np.flatnonzero(np.diff(cats)) + 1
                starts = np.concatenate(([0], change))
                ends = np.concatenate((change, [len(cats)]))
                for s, e in zip(starts, ends):
                    bounds[int(cats[s])] = (int(s), int(e))
            self._cat_bounds = bounds
        s, e = self._cat_bounds.get(category_id, (0, 0))
        return slice(s, e)

    def pooled_order(self) -> np.ndarray:
        """Row order for the all-category pooled curve: (score desc, id asc)."""
        if self._pooled_order is None:
            self._pooled_order = np.lexsort((self.det_ids, -self.scores))
        return self._pooled_order

    def records(self, category_id: int, threshold: float) -> list[MatchRecord]:
        """Materialize MatchRecords for one (category, threshold) group."""
        t = self.threshold_index(threshold)
        sl = self.category_slice(category_id)
        out = []
        for i in range(sl.start, sl.stop):
            code = int(self.outcome[t, i])
            gt = int(self.matched_gt_id[t, i])
            out.append(
                MatchRecord(
                    detection_id=int(self.det_ids[i]),
                    category_id=int(self.category_ids[i]),
                    image_id=int(self.image_ids[i]),
                    score=float(self.scores[i]),
                    iou_threshold=self.thresholds[t],
                    outcome=_OUTCOME_NAMES[code],
                    matched_gt_id=gt if code == OUTCOME_TP else None,
                )
            )
        return out


def _index_of(sorted_ids: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Dense indices of ids within a sorted unique id array."""
    return np.searchsorted(sorted_ids, ids)


def federated_filter(dataset: Dataset, dets: DetectionSet) -> DetectionSet:
    """Drop detections whose category is not evaluated on their image.

    A category is evaluated on an image when it belongs to the image's
    verified-present or verified-absent set; images declaring neither set
    evaluate every category. Applied before any ranking policy.
    """
    if len(dets) == 0:
        return dets
    img_ids = dataset.image_ids_sorted()
    cat_index = dataset.category_index()
    n_cats = len(cat_index)

    restricted = np.zeros(len(img_ids), dtype=bool)
    allowed_keys = []
    for im in dataset.images.values():
        uni = im.evaluation_universe
        if uni:
            ii = int(np.searchsorted(img_ids, im.id))
            restricted[ii] = True
            for c in uni:
                allowed_keys.append(ii * n_cats + cat_index[c])
    if not restricted.any():
        return dets
    allowed_keys = np.unique(np.array(allowed_keys, dtype=np.int64))

    det_img_idx = _index_of(img_ids, dets.image_ids)
    det_cat_idx = _index_of(dataset.category_ids_sorted(), dets.category_ids)
    keys = det_img_idx * n_cats + det_cat_idx
    pos = np.searchsorted(allowed_keys, keys)
    pos[pos == len(allowed_keys)] = 0
    in_universe = allowed_keys[pos] == keys
    keep = ~restricted[det_img_idx] | in_universe
    if keep.all():
        return dets
    return dets.filtered(keep)


def match_dataset(
    dataset: Dataset,
    dets: DetectionSet,
    thresholds,
    n_threads: int = 1,
) -> MatchSet:
    """Match all detections against the corpus at every threshold.

    Expects detections already passed through the federated filter and the
    active ranking policy. Output is deterministic for any n_threads.
    """
    thresholds = np.asarray(sorted(float(t) for t in thresholds), dtype=np.float64)
    n_thr = len(thresholds)
    img_ids_sorted = dataset.image_ids_sorted()
    cat_ids_sorted = dataset.category_ids_sorted()
    n_imgs = len(img_ids_sorted)
    n = len(dets)

    det_img_idx = _index_of(img_ids_sorted, dets.image_ids)
    det_cat_idx = _index_of(cat_ids_sorted, dets.category_ids)
    det_keys = det_cat_idx * n_imgs + det_img_idx
    # Group order: (category, image, score desc, id asc).
    order = np.lexsort((dets.det_ids, -dets.scores, det_keys))
    keys_sorted = det_keys[order]
    det_boxes = dets.boxes[order]

    if n:
        change = np.flatnonzero(np.diff(keys_sorted)) + 1
        group_starts = np.concatenate(([0], change))
        group_keys = keys_sorted[group_starts]
        det_ptr = np.concatenate((group_starts, [n])).astype(np.int64)
    else:
        group_keys = np.zeros(0, dtype=np.int64)
        det_ptr = np.zeros(1, dtype=np.int64)
    n_groups = len(group_keys)

    # Groundtruth rows sorted by (group key, id): the id order encodes the
    # equal-IoU tie-break.
    cols = dataset.gt_columns()
    gt_keys_all = (
        _index_of(cat_ids_sorted, cols["category_ids"]) * n_imgs
        + _index_of(img_ids_sorted, cols["image_ids"])
    )
    gt_order = np.lexsort((cols["ids"], gt_keys_all))
    gt_keys = gt_keys_all[gt_order]
    gt_ids = cols["ids"][gt_order]
    gt_boxes = cols["boxes"][gt_order]
    gt_ignore = cols["ignore"][gt_order]

    gt_lo = np.searchsorted(gt_keys, group_keys, side="left").astype(np.int64)
    gt_hi = np.searchsorted(gt_keys, group_keys, side="right").astype(np.int64)

    nex_pairs = dataset.not_exhaustive_pairs
    if nex_pairs and n_groups:
        cat_index = dataset.category_index()
        img_index = dataset.image_index()
        nex_keys = np.unique(
            np.array(
                [cat_index[c] * n_imgs + img_index[i] for i, c in nex_pairs],
                dtype=np.int64,
            )
        )
        pos = np.searchsorted(nex_keys, group_keys)
        pos[pos == len(nex_keys)] = 0
        group_nex = (nex_keys[pos] == group_keys).astype(np.uint8)
    else:
        group_nex = np.zeros(n_groups, dtype=np.uint8)

    out_outcome = np.zeros((n_thr, n), dtype=np.int8)
    out_match = np.full((n_thr, n), -1, dtype=np.int64)

    if n_groups:
        n_threads = max(1, min(int(n_threads), n_groups))
        if n_threads == 1:
            _match_kernel(
                0,
                n_groups,
                thresholds,
                det_boxes,
                det_ptr,
                gt_boxes,
                gt_ignore,
                gt_lo,
                gt_hi,
                group_nex,
                out_outcome,
                out_match,
            )
        else:
            bounds = np.linspace(0, n_groups, n_threads + 1).astype(np.int64)
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                futures = [
                    pool.submit(
                        _match_kernel,
                        int(bounds[i]),
                        int(bounds[i + 1]),
                        thresholds,
                        det_boxes,
                        det_ptr,
                        gt_boxes,
                        gt_ignore,
                        gt_lo,
                        gt_hi,
                        group_nex,
                        out_outcome,
                        out_match,
                    )
                    for i in range(n_threads)
                ]
                for fut in futures:
                    fut.result()

    # Translate matched gt rows into instance ids, then rewrite rows into
    # per-category PR order (category, score desc, id asc).
    tp_mask = out_match >= 0
    gt_id_out = np.full((n_thr, n), -1, dtype=np.int64)
    if len(gt_ids):
        gt_id_out[tp_mask] = gt_ids[out_match[tp_mask]]

    det_ids_g = dets.det_ids[order]
    image_ids_g = dets.image_ids[order]
    cat_ids_g = dets.category_ids[order]
    scores_g = dets.scores[order]
    pr_order = np.lexsort((det_ids_g, -scores_g, cat_ids_g))

    n_gt = dataset.n_gt_by_category()

    return MatchSet(
        thresholds=tuple(thresholds.tolist()),
        det_ids=det_ids_g[pr_order],
        image_ids=image_ids_g[pr_order],
        category_ids=cat_ids_g[pr_order],
        scores=scores_g[pr_order],
        outcome=out_outcome[:, pr_order],
        matched_gt_id=gt_id_out[:, pr_order],
        n_gt=n_gt,
    )
