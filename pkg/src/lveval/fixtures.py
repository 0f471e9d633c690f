"""Shipped synthetic corpora.

Three generators used by the CLI demos and the test suite:

* the two-class toy corpus whose two groundtruth scenarios expose how a
  per-image cap rewards discarding high-confidence detections;
* a frequency-skewed corpus on which composing a per-class cap with the
  per-image cap strictly raises the macro mean;
* a two-class corpus with systematically shifted score scales for
  demonstrating per-class calibration, split into a calibration half and a
  disjoint target half.

All generators are deterministic for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    BoundingBox,
    Category,
    Dataset,
    DetectionSet,
    EvalConfig,
    GroundTruthInstance,
    ImageRecord,
    Interpolation,
)
from .metrics import evaluate
from .ranking import RankingPolicy

TOY_CLASS_A = 1
TOY_CLASS_B = 2

# Scenario weights: the lone class-B detection carries confidence 0.8, and
# the corpus realizes it as correct with that probability.
TOY_SCENARIO_WEIGHTS = {1: 0.8, 2: 0.2}

_BOX_A1 = BoundingBox(0, 0, 10, 10)
_BOX_A2 = BoundingBox(20, 0, 10, 10)
_BOX_B = BoundingBox(40, 0, 10, 10)
_BOX_B_FAR = BoundingBox(60, 0, 10, 10)


def toy_detections() -> DetectionSet:
    """Three detections in one image: A1 (1.0), A2 (1.0), B1 (0.8)."""
    return DetectionSet(
        det_ids=np.arange(3, dtype=np.int64),
        image_ids=np.array([1, 1, 1], dtype=np.int64),
        category_ids=np.array([TOY_CLASS_A, TOY_CLASS_A, TOY_CLASS_B], dtype=np.int64),
        boxes=np.array(
            [
                [_BOX_A1.x, _BOX_A1.y, _BOX_A1.w, _BOX_A1.h],
                [_BOX_A2.x, _BOX_A2.y, _BOX_A2.w, _BOX_A2.h],
                [_BOX_B.x, _BOX_B.y, _BOX_B.w, _BOX_B.h],
            ],
            dtype=np.float64,
        ),
        scores=np.array([1.0, 1.0, 0.8], dtype=np.float64),
    )


def toy_dataset(scenario: int) -> Dataset:
    """Groundtruth for one scenario: B1 correct in 1, incorrect in 2.

    Both scenarios carry two class-A instances and one class-B instance,
    so class B always contributes to the macro mean.
    """
    if scenario not in (1, 2):
        raise ValueError("scenario must be 1 or 2")
    b_box = _BOX_B if scenario == 1 else _BOX_B_FAR
    images = [ImageRecord(id=1)]
    categories = [Category(id=TOY_CLASS_A, name="a"), Category(id=TOY_CLASS_B, name="b")]
    instances = [
        GroundTruthInstance(id=1, image_id=1, category_id=TOY_CLASS_A, bbox=_BOX_A1),
        GroundTruthInstance(id=2, image_id=1, category_id=TOY_CLASS_A, bbox=_BOX_A2),
        GroundTruthInstance(id=3, image_id=1, category_id=TOY_CLASS_B, bbox=b_box),
    ]
    return Dataset(images, categories, instances)


TOY_RANKING_1 = RankingPolicy(max_dets_per_image=2)
TOY_RANKING_2 = RankingPolicy(max_dets_per_image=2, max_dets_per_class=1)

# Hand-traced values for the toy corpus at IoU 0.5, exact-area AP.
TOY_EXPECTED = {
    # (scenario, ranking): (ap_a, ap_b, mean_ap)
    (1, 1): (1.0, 0.0, 0.5),
    (1, 2): (0.5, 1.0, 0.75),
    (2, 1): (1.0, 0.0, 0.5),
    (2, 2): (0.5, 0.0, 0.25),
}
TOY_EXPECTED_WEIGHTED = {1: 0.5, 2: 0.65}  # ranking -> weighted mean AP
TOY_EXPECTED_WEIGHTED_B = {1: 0.0, 2: 0.8}  # ranking -> weighted class-B AP


@dataclass
class ToyOutcome:
    scenario: int
    ranking: int
    ap_a: float
    ap_b: float
    mean_ap: float


@dataclass
class ToyResult:
    outcomes: list[ToyOutcome]
    weighted_mean_ap: dict[int, float]
    weighted_ap_b: dict[int, float]
    max_deviation: float

    @property
    def ok(self) -> bool:
        return self.max_deviation <= 1e-9


def run_toy(n_threads: int = 1) -> ToyResult:
    """Evaluate both scenarios under both rankings and check the arithmetic."""
    config_base = dict(
        iou_thresholds=(0.5,),
        interpolation=Interpolation.exact(),
    )
    dets = toy_detections()
    outcomes = []
    weighted_mean = {1: 0.0, 2: 0.0}
    weighted_b = {1: 0.0, 2: 0.0}
    deviation = 0.0
    for scenario in (1, 2):
        dataset = toy_dataset(scenario)
        weight = TOY_SCENARIO_WEIGHTS[scenario]
        for ranking, policy in ((1, TOY_RANKING_1), (2, TOY_RANKING_2)):
            config = EvalConfig(ranking_policy=policy, **config_base)
            report = evaluate(dataset, dets, config, n_threads=n_threads)
            ap_a = report.ap_of(TOY_CLASS_A)
            ap_b = report.ap_of(TOY_CLASS_B)
            outcome = ToyOutcome(
                scenario=scenario,
                ranking=ranking,
                ap_a=ap_a if ap_a is not None else float("nan"),
                ap_b=ap_b if ap_b is not None else float("nan"),
                mean_ap=report.mean_ap if report.mean_ap is not None else float("nan"),
            )
            outcomes.append(outcome)
            weighted_mean[ranking] += weight * outcome.mean_ap
            weighted_b[ranking] += weight * outcome.ap_b
            exp_a, exp_b, exp_mean = TOY_EXPECTED[(scenario, ranking)]
            deviation = max(
                deviation,
                abs(outcome.ap_a - exp_a),
                abs(outcome.ap_b - exp_b),
                abs(outcome.mean_ap - exp_mean),
            )
    for ranking in (1, 2):
        deviation = max(
            deviation,
            abs(weighted_mean[ranking] - TOY_EXPECTED_WEIGHTED[ranking]),
            abs(weighted_b[ranking] - TOY_EXPECTED_WEIGHTED_B[ranking]),
        )
    return ToyResult(
        outcomes=outcomes,
        weighted_mean_ap=weighted_mean,
        weighted_ap_b=weighted_b,
        max_deviation=deviation,
    )


def _grid_box(col: int, row: int = 0, size: float = 10.0) -> tuple[float, float, float, float]:
    return (30.0 * col, 30.0 * row, size, size)


def gameable_corpus(seed: int = 7) -> tuple[Dataset, DetectionSet]:
    """Frequency-skewed corpus where a per-class cap games the macro mean.

    50 images, 30 classes. Five head classes flood every image with
    confident detections (one correct, many false) whose scores all exceed
    the tail classes' lone correct detection, so a small per-image cap
    drops every tail true positive. Capping per class first discards the
    head classes' surplus and the tail detections fit.
    """
    rng = np.random.default_rng(seed)
    n_images = 50
    head_ids = list(range(1, 6))
    mid_ids = list(range(6, 11))
    tail_ids = list(range(11, 31))

    categories = (
        [Category(id=c, name=f"head_{c}", image_count=500) for c in head_ids]
        + [Category(id=c, name=f"mid_{c}", image_count=50) for c in mid_ids]
        + [Category(id=c, name=f"tail_{c}", image_count=5) for c in tail_ids]
    )
    low_ids = mid_ids + tail_ids

    images = [ImageRecord(id=i) for i in range(1, n_images + 1)]
    instances = []
    det_rows = []  # (image, category, box, score)
    gt_id = 1
    for img_i, img in enumerate(range(1, n_images + 1)):
        # Three head classes per image, one groundtruth box each.
        heads = [head_ids[(img_i + k) % len(head_ids)] for k in range(3)]
        for slot, cid in enumerate(heads):
            box = _grid_box(slot, row=0)
            instances.append(
                GroundTruthInstance(
                    id=gt_id, image_id=img, category_id=cid, bbox=BoundingBox(*box)
                )
            )
            gt_id += 1
            det_rows.append((img, cid, box, float(rng.uniform(0.90, 1.0))))
            # False positives live in an empty band of the image.
            for j in range(12):
                fp_box = _grid_box(j, row=5)
                det_rows.append((img, cid, fp_box, float(rng.uniform(0.55, 0.89))))
        # One low-frequency class per image, a single correct detection.
        cid = low_ids[img_i % len(low_ids)]
        box = _grid_box(4, row=0)
        instances.append(
            GroundTruthInstance(
                id=gt_id, image_id=img, category_id=cid, bbox=BoundingBox(*box)
            )
        )
        gt_id += 1
        det_rows.append((img, cid, box, float(rng.uniform(0.30, 0.50))))

    dets = DetectionSet(
        det_ids=np.arange(len(det_rows), dtype=np.int64),
        image_ids=np.array([r[0] for r in det_rows], dtype=np.int64),
        category_ids=np.array([r[1] for r in det_rows], dtype=np.int64),
        boxes=np.array([r[2] for r in det_rows], dtype=np.float64),
        scores=np.array([r[3] for r in det_rows], dtype=np.float64),
    )
    return Dataset(images, categories, instances), dets


GAMEABLE_DETS_PER_IMAGE = 8
GAMEABLE_DETS_PER_CLASS = 60


def shifted_scale_corpus(
    split: str, seed: int = 11, n_images: int = 40, dets_per_image: int = 6
) -> tuple[Dataset, DetectionSet]:
    """Two classes, same task difficulty, systematically shifted scores.

    Class 1 scores in [0.55, 0.95] but is right only ~25% of the time;
    class 2 scores in [0.05, 0.45] and is right ~85% of the time. Pooled
    ranking of the raw scores puts the weak class first; per-class
    calibration rescales both onto their true rates and flips the order.
    The "calib" and "target" splits use disjoint seeds.
    """
    if split not in ("calib", "target"):
        raise ValueError("split must be 'calib' or 'target'")
    rng = np.random.default_rng(seed + (0 if split == "calib" else 1))
    categories = [
        Category(id=1, name="overconfident", image_count=300),
        Category(id=2, name="underconfident", image_count=300),
    ]
    images = [ImageRecord(id=i) for i in range(1, n_images + 1)]
    instances = []
    det_rows = []
    gt_id = 1
    for img in range(1, n_images + 1):
        for cid, lo, hi, rate in ((1, 0.55, 0.95, 0.25), (2, 0.05, 0.45, 0.85)):
            for j in range(dets_per_image):
                score = float(rng.uniform(lo, hi))
                correct = bool(rng.random() < rate)
                if correct:
                    box = _grid_box(j, row=cid)
                    instances.append(
                        GroundTruthInstance(
                            id=gt_id, image_id=img, category_id=cid, bbox=BoundingBox(*box)
                        )
                    )
                    gt_id += 1
                else:
                    box = _grid_box(j, row=cid + 4)
                det_rows.append((img, cid, box, score))

    dets = DetectionSet(
        det_ids=np.arange(len(det_rows), dtype=np.int64),
        image_ids=np.array([r[0] for r in det_rows], dtype=np.int64),
        category_ids=np.array([r[1] for r in det_rows], dtype=np.int64),
        boxes=np.array([r[2] for r in det_rows], dtype=np.float64),
        scores=np.array([r[3] for r in det_rows], dtype=np.float64),
    )
    return Dataset(images, categories, instances), dets
