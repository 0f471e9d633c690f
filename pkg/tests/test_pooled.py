from __future__ import annotations

import numpy as np
import pytest

import oracles
from conftest import random_corpus
from lveval.core import (
    BoundingBox,
    Category,
    Dataset,
    DetectionSet,
    EvalConfig,
    GroundTruthInstance,
    ImageRecord,
    Interpolation,
)
from lveval.matching import OUTCOME_IGNORED, OUTCOME_TP, federated_filter, match_dataset
from lveval.metrics import evaluate, evaluate_pooled
from lveval.ranking import RankingPolicy

EXACT_05 = EvalConfig(
    iou_thresholds=(0.5,),
    interpolation=Interpolation.exact(),
    ranking_policy=RankingPolicy(),
    include_pooled=True,
)


def single_category_corpus(seed):
    ds, dets = random_corpus(seed, n_categories=1, p_federated=0.0, p_ignore=0.0)
    return ds, dets


def perfect_detector(ds: Dataset, seed: int) -> DetectionSet:
    """One detection per groundtruth instance, exact box, random score."""
    rng = np.random.default_rng(seed)
    rows = [g for g in ds.instances if not g.ignore]
    return DetectionSet(
        det_ids=np.arange(len(rows), dtype=np.int64),
        image_ids=np.array([g.image_id for g in rows], dtype=np.int64),
        category_ids=np.array([g.category_id for g in rows], dtype=np.int64),
        boxes=np.array([[g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h] for g in rows]).reshape(
            len(rows), 4
        ),
        scores=rng.uniform(0.01, 1.0, size=len(rows)),
    )


class TestPoolingIdentities:
    def test_single_category_pool_equals_class_ap(self):
        for seed in range(20):
            ds, dets = single_category_corpus(seed)
            if ds.n_gt_by_category()[1] == 0:
                continue
            report = evaluate(ds, dets, EXACT_05)
            ap = report.ap_of(1)
            assert report.pooled.ap_pool == pytest.approx(ap, abs=1e-12)

    def test_perfect_detector_pool_is_one(self):
        for seed in range(20):
            ds, _ = random_corpus(seed, p_ignore=0.0)
            dets = perfect_detector(ds, seed)
            if len(dets) == 0:
                continue
            block = evaluate_pooled(ds, dets, EXACT_05)
            assert block.ap_pool == 1.0


class TestMergeCategoryOracle:
    def test_pool_equals_merged_class_curve(self):
        # Pooling the per-class match labels must equal computing one
        # curve on the merged records, per the stepwise-integration oracle.
        for seed in range(30):
            ds, dets = random_corpus(seed)
            filtered = federated_filter(ds, dets)
            mset = match_dataset(ds, filtered, [0.5])
            n_gt_total = sum(mset.n_gt_by_category.values())
            if n_gt_total == 0:
                continue
            rows = [
                (-float(mset.scores[i]), int(mset.det_ids[i]), int(mset.outcome[0, i]))
                for i in range(len(mset))
                if int(mset.outcome[0, i]) != OUTCOME_IGNORED
            ]
            rows.sort()
            flags = [outcome == OUTCOME_TP for _, _, outcome in rows]
            want = oracles.exact_ap_oracle(flags, n_gt_total)
            block = evaluate_pooled(ds, dets, EXACT_05)
            assert block.ap_pool == pytest.approx(want, abs=1e-12)


class TestPooledGroups:
    def _grouped_corpus(self):
        cats = [
            Category(id=1, name="r", image_count=5),
            Category(id=2, name="c", image_count=50),
            Category(id=3, name="f", image_count=500),
        ]
        images = [ImageRecord(id=1)]
        instances = [
            GroundTruthInstance(id=i + 1, image_id=1, category_id=c, bbox=BoundingBox(30 * i, 0, 10, 10))
            for i, c in enumerate((1, 2, 3))
        ]
        ds = Dataset(images, cats, instances)
        rows = [
            (1, (0, 0, 10, 10), 0.9),     # rare TP
            (1, (100, 100, 5, 5), 0.8),   # rare FP
            (2, (30, 0, 10, 10), 0.7),    # common TP
            (3, (60, 0, 10, 10), 0.6),    # frequent TP
            (3, (200, 200, 5, 5), 0.5),   # frequent FP
        ]
        dets = DetectionSet(
            det_ids=np.arange(len(rows), dtype=np.int64),
            image_ids=np.ones(len(rows), dtype=np.int64),
            category_ids=np.array([r[0] for r in rows], dtype=np.int64),
            boxes=np.array([r[1] for r in rows], dtype=np.float64),
            scores=np.array([r[2] for r in rows]),
        )
        return ds, dets

    def test_group_variant_restricts_records_and_denominator(self):
        ds, dets = self._grouped_corpus()
        block = evaluate_pooled(ds, dets, EXACT_05)
        # Rare: TP at rank 1, FP at rank 2, one instance -> exact AP 1.0.
        assert block.ap_pool_rare == pytest.approx(1.0, abs=1e-12)
        # Common: single TP, single instance.
        assert block.ap_pool_common == pytest.approx(1.0, abs=1e-12)
        # Frequent: TP then FP over one instance.
        assert block.ap_pool_frequent == pytest.approx(1.0, abs=1e-12)
        # All classes pooled: TP,FP,TP,TP,FP over 3 instances.
        want = oracles.exact_ap_oracle([True, False, True, True, False], 3)
        assert block.ap_pool == pytest.approx(want, abs=1e-12)

    def test_missing_group_is_none(self):
        ds, dets = self._grouped_corpus()
        sub = ds.restrict_categories({2, 3})
        mask = np.isin(dets.category_ids, [2, 3])
        block = evaluate_pooled(sub, dets.filtered(mask), EXACT_05)
        assert block.ap_pool_rare is None
        assert block.ap_pool_common is not None


class TestGlobalTransformInvariance:
    def test_pool_invariant_under_global_monotone_transform(self):
        for seed in range(30):
            ds, dets = random_corpus(seed)
            if len(dets) == 0:
                continue
            rng = np.random.default_rng(3000 + seed)
            uniq = np.unique(dets.scores)
            steps = rng.uniform(0.05, 1.0, size=len(uniq))
            levels = np.cumsum(steps)
            levels = levels / (levels[-1] + 0.5)
            transformed = dets.with_scores(levels[np.searchsorted(uniq, dets.scores)])
            a = evaluate_pooled(ds, dets, EXACT_05)
            b = evaluate_pooled(ds, transformed, EXACT_05)
            if a.ap_pool is None:
                assert b.ap_pool is None
            else:
                assert abs(a.ap_pool - b.ap_pool) <= 1e-12
