from __future__ import annotations

import numpy as np
import pytest

import oracles
from conftest import random_corpus
from lveval import fixtures
from lveval.core import EvalConfig, FrequencyGroup, Interpolation, UndefinedCurve
from lveval.matching import MatchRecord
from lveval.metrics import (
    average_precision,
    evaluate,
    pr_curve,
    pr_curve_from_flags,
    score_distribution,
    subset_evaluate,
    sweep,
)
from lveval.ranking import RankingPolicy


def rec(det_id, score, outcome, cat=1, img=1, thr=0.5):
    return MatchRecord(
        detection_id=det_id,
        category_id=cat,
        image_id=img,
        score=score,
        iou_threshold=thr,
        outcome=outcome,
    )


class TestPRCurve:
    def test_single_tp(self):
        curve = pr_curve([rec(0, 0.9, "tp")], n_gt=1)
        assert curve.points == [(1.0, 1.0)]

    def test_tp_then_fp(self):
        curve = pr_curve([rec(0, 0.9, "tp"), rec(1, 0.5, "fp")], n_gt=2)
        assert curve.points == [(0.5, 1.0), (0.5, 0.5)]

    def test_toy_other_ranking_class_a(self):
        # Class A under the class-capped ranking: one TP of two instances.
        curve = pr_curve([rec(0, 1.0, "tp")], n_gt=2)
        assert curve.points == [(0.5, 1.0)]
        assert average_precision(curve, Interpolation.exact()) == 0.5

    def test_sorts_by_score_then_id(self):
        records = [rec(1, 0.5, "fp"), rec(0, 0.9, "tp")]
        curve = pr_curve(records, n_gt=1)
        assert curve.precision[0] == 1.0

    def test_rejects_ignored(self):
        with pytest.raises(ValueError):
            pr_curve([rec(0, 0.9, "ignored")], n_gt=1)

    def test_undefined_without_gt(self):
        with pytest.raises(UndefinedCurve):
            pr_curve([rec(0, 0.9, "fp")], n_gt=0)

    def test_recall_monotone_envelope_monotone(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 30))
            flags = rng.random(n) < 0.4
            n_gt = max(int(flags.sum()), 1) + int(rng.integers(0, 4))
            curve = pr_curve_from_flags(flags, n_gt)
            assert np.all(np.diff(curve.recall) >= 0)
            assert np.all(np.diff(curve.envelope) <= 1e-15)
            assert np.all((curve.recall >= 0) & (curve.recall <= 1))
            assert np.all((curve.precision >= 0) & (curve.precision <= 1))


class TestAveragePrecision:
    def test_perfect_curve_both_modes(self):
        curve = pr_curve_from_flags(np.ones(4, dtype=bool), n_gt=4)
        assert average_precision(curve, Interpolation.exact()) == 1.0
        assert average_precision(curve, Interpolation.sampled(101)) == 1.0

    def test_empty_records_zero(self):
        curve = pr_curve_from_flags(np.zeros(0, dtype=bool), n_gt=3)
        assert average_precision(curve, Interpolation.exact()) == 0.0
        assert average_precision(curve, Interpolation.sampled(101)) == 0.0

    def test_exact_matches_stepwise_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            n = int(rng.integers(0, 40))
            flags = rng.random(n) < rng.uniform(0.1, 0.9)
            n_gt = max(int(flags.sum()), 1) + int(rng.integers(0, 5))
            curve = pr_curve_from_flags(flags, n_gt)
            got = average_precision(curve, Interpolation.exact())
            want = oracles.exact_ap_oracle(flags.tolist(), n_gt)
            assert got == pytest.approx(want, abs=1e-12)

    def test_sampled_matches_grid_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            n = int(rng.integers(0, 30))
            flags = rng.random(n) < 0.5
            n_gt = max(int(flags.sum()), 1) + int(rng.integers(0, 5))
            curve = pr_curve_from_flags(flags, n_gt)
            for pts in (11, 101):
                got = average_precision(curve, Interpolation.sampled(pts))
                want = oracles.sampled_ap_oracle(flags.tolist(), n_gt, pts)
                assert got == pytest.approx(want, abs=1e-12)

    def test_sampled_close_to_exact(self):
        # Discretization gap of the 101-point grid is bounded by 1/100.
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(0, 60))
            flags = rng.random(n) < rng.uniform(0.05, 0.95)
            n_gt = max(int(flags.sum()), 1) + int(rng.integers(0, 6))
            curve = pr_curve_from_flags(flags, n_gt)
            gap = abs(
                average_precision(curve, Interpolation.sampled(101))
                - average_precision(curve, Interpolation.exact())
            )
            worst = max(worst, gap)
        assert worst <= 0.01 + 1e-9

    def test_values_in_unit_interval(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            n = int(rng.integers(0, 30))
            flags = rng.random(n) < 0.5
            n_gt = max(int(flags.sum()), 1)
            curve = pr_curve_from_flags(flags, n_gt)
            for interp in (Interpolation.exact(), Interpolation.sampled(21)):
                ap = average_precision(curve, interp)
                assert 0.0 <= ap <= 1.0


TOY_EXACT = EvalConfig(
    iou_thresholds=(0.5,),
    interpolation=Interpolation.exact(),
    ranking_policy=RankingPolicy(max_dets_per_image=2),
)


class TestEvaluateToy:
    def test_scenario_one_image_cap(self):
        report = evaluate(fixtures.toy_dataset(1), fixtures.toy_detections(), TOY_EXACT)
        assert report.mean_ap == pytest.approx(0.5, abs=1e-12)
        assert report.ap_of(1) == pytest.approx(1.0, abs=1e-12)
        assert report.ap_of(2) == pytest.approx(0.0, abs=1e-12)

    def test_scenario_one_composed_policy(self):
        cfg = EvalConfig(
            iou_thresholds=(0.5,),
            interpolation=Interpolation.exact(),
            ranking_policy=RankingPolicy(max_dets_per_image=2, max_dets_per_class=1),
        )
        report = evaluate(fixtures.toy_dataset(1), fixtures.toy_detections(), cfg)
        assert report.mean_ap == pytest.approx(0.75, abs=1e-12)

    def test_scenario_two_composed_policy(self):
        cfg = EvalConfig(
            iou_thresholds=(0.5,),
            interpolation=Interpolation.exact(),
            ranking_policy=RankingPolicy(max_dets_per_image=2, max_dets_per_class=1),
        )
        report = evaluate(fixtures.toy_dataset(2), fixtures.toy_detections(), cfg)
        assert report.mean_ap == pytest.approx(0.25, abs=1e-12)

    def test_scenario_weighted_expectation(self):
        result = fixtures.run_toy()
        assert result.weighted_mean_ap[1] == pytest.approx(0.5, abs=1e-12)
        assert result.weighted_mean_ap[2] == pytest.approx(0.65, abs=1e-12)
        assert result.weighted_ap_b[2] == pytest.approx(0.8, abs=1e-12)


class TestEvaluateProperties:
    def test_zero_gt_categories_excluded(self):
        ds, dets = random_corpus(11)
        report = evaluate(ds, dets, EvalConfig(iou_thresholds=(0.5,)))
        n_gt = ds.n_gt_by_category()
        for c in report.per_category:
            if n_gt[c.category_id] == 0:
                assert c.ap is None
            else:
                assert c.ap is not None
        assert report.n_categories_included == sum(1 for v in n_gt.values() if v > 0)

    def test_mean_is_uniform_over_included(self):
        ds, dets = random_corpus(12)
        report = evaluate(ds, dets, EvalConfig(iou_thresholds=(0.5,)))
        included = [c.ap for c in report.per_category if c.ap is not None]
        if included:
            assert report.mean_ap == pytest.approx(float(np.mean(included)), abs=1e-12)

    def test_removing_fp_never_hurts(self):
        no_policy = EvalConfig(
            iou_thresholds=(0.5,),
            interpolation=Interpolation.exact(),
            ranking_policy=RankingPolicy(),
            include_pooled=True,
        )
        checked = 0
        for seed in range(30):
            ds, dets = random_corpus(seed)
            from lveval.matching import OUTCOME_FP, federated_filter, match_dataset

            filtered = federated_filter(ds, dets)
            mset = match_dataset(ds, filtered, [0.5])
            fp_rows = np.flatnonzero(mset.outcome[0] == OUTCOME_FP)
            if not len(fp_rows):
                continue
            drop_id = int(mset.det_ids[fp_rows[0]])
            before = evaluate(ds, dets, no_policy)
            after = evaluate(ds, dets.filtered(dets.det_ids != drop_id), no_policy)
            for c_after in after.per_category:
                c_before = before.category_result(c_after.category_id)
                if c_after.ap is not None and c_before.ap is not None:
                    assert c_after.ap >= c_before.ap - 1e-12
            if before.pooled.ap_pool is not None:
                assert after.pooled.ap_pool >= before.pooled.ap_pool - 1e-12
            checked += 1
        assert checked >= 5


class TestMonotoneTransformInvariance:
    @staticmethod
    def rank_transform(values: np.ndarray, rng) -> np.ndarray:
        """Strictly increasing map built on the ranks of the unique values."""
        uniq = np.unique(values)
        steps = rng.uniform(0.05, 1.0, size=len(uniq))
        levels = np.cumsum(steps)
        levels = levels / (levels[-1] + rng.uniform(0.1, 1.0))
        out = levels[np.searchsorted(uniq, values)]
        return out

    def test_per_class_transform_leaves_class_capped_ap(self):
        cfg = EvalConfig(
            iou_thresholds=(0.5, 0.75),
            ranking_policy=RankingPolicy(max_dets_per_class=3),
        )
        for seed in range(100):
            ds, dets = random_corpus(seed)
            if len(dets) == 0:
                continue
            rng = np.random.default_rng(1000 + seed)
            new_scores = dets.scores.copy()
            for cid in ds.categories:
                mask = dets.category_ids == cid
                if mask.any():
                    new_scores[mask] = self.rank_transform(dets.scores[mask], rng)
            transformed = dets.with_scores(new_scores)
            a = evaluate(ds, dets, cfg)
            b = evaluate(ds, transformed, cfg)
            for ca, cb in zip(a.per_category, b.per_category):
                assert ca.category_id == cb.category_id
                if ca.ap is None:
                    assert cb.ap is None
                else:
                    assert abs(ca.ap - cb.ap) <= 1e-12
            if a.mean_ap is None:
                assert b.mean_ap is None
            else:
                assert abs(a.mean_ap - b.mean_ap) <= 1e-12

    def test_per_class_curves_identical(self):
        from lveval.matching import OUTCOME_IGNORED, OUTCOME_TP, federated_filter, match_dataset
        from lveval.ranking import apply_policy

        policy = RankingPolicy(max_dets_per_class=3)
        for seed in range(20):
            ds, dets = random_corpus(seed)
            if len(dets) == 0:
                continue
            rng = np.random.default_rng(2000 + seed)
            new_scores = dets.scores.copy()
            for cid in ds.categories:
                mask = dets.category_ids == cid
                if mask.any():
                    new_scores[mask] = self.rank_transform(dets.scores[mask], rng)
            transformed = dets.with_scores(new_scores)

            def curves(d):
                surviving = apply_policy(federated_filter(ds, d), policy)
                mset = match_dataset(ds, surviving, [0.5])
                out = {}
                for cid in ds.categories:
                    if mset.n_gt(cid) == 0:
                        continue
                    sl = mset.category_slice(cid)
                    outcome = mset.outcome[0, sl]
                    kept = outcome != OUTCOME_IGNORED
                    c = pr_curve_from_flags(outcome[kept] == OUTCOME_TP, mset.n_gt(cid))
                    out[cid] = (c.recall, c.precision)
                return out

            ca, cb = curves(dets), curves(transformed)
            assert ca.keys() == cb.keys()
            for cid in ca:
                assert np.array_equal(ca[cid][0], cb[cid][0])
                assert np.array_equal(ca[cid][1], cb[cid][1])


class TestScoreDistribution:
    def test_all_equal_scores_normalize_to_one(self):
        ds, dets = random_corpus(20, n_categories=8)
        dets = dets.with_scores(np.full(len(dets), 0.5))
        dist = score_distribution(ds, dets)
        for stats in dist.groups.values():
            if stats.count:
                assert stats.normalized_mean == pytest.approx(1.0)

    def test_normalization_is_ratio(self):
        # Frequent mean 0.5 and rare mean 0.25 give normalized rare 0.5.
        from lveval.core import Category, Dataset, DetectionSet, ImageRecord

        ds = Dataset(
            [ImageRecord(id=1)],
            [Category(id=1, image_count=5), Category(id=2, image_count=500)],
            [],
        )
        dets = DetectionSet(
            det_ids=np.arange(2, dtype=np.int64),
            image_ids=np.array([1, 1], dtype=np.int64),
            category_ids=np.array([1, 2], dtype=np.int64),
            boxes=np.tile(np.array([0.0, 0.0, 5.0, 5.0]), (2, 1)),
            scores=np.array([0.25, 0.5]),
        )
        dist = score_distribution(ds, dets)
        assert dist.groups["rare"].normalized_mean == pytest.approx(0.5)
        assert dist.groups["frequent"].normalized_mean == pytest.approx(1.0)

    def test_empty_group_warns(self):
        from lveval.core import Category, Dataset, DetectionSet, ImageRecord

        ds = Dataset(
            [ImageRecord(id=1)],
            [Category(id=1, image_count=5), Category(id=2, image_count=500)],
            [],
        )
        dets = DetectionSet(
            det_ids=np.arange(1, dtype=np.int64),
            image_ids=np.array([1], dtype=np.int64),
            category_ids=np.array([2], dtype=np.int64),
            boxes=np.tile(np.array([0.0, 0.0, 5.0, 5.0]), (1, 1)),
            scores=np.array([0.5]),
        )
        with pytest.warns(UserWarning, match="empty_group:rare"):
            dist = score_distribution(ds, dets)
        assert dist.groups["rare"].count == 0
        assert "empty_group:rare" in dist.warnings

    def test_histogram_counts_sum(self):
        ds, dets = random_corpus(21)
        dist = score_distribution(ds, dets, bins=10)
        total = sum(sum(s.histogram_counts) for s in dist.groups.values())
        assert total == len(dets)


class TestSweep:
    def test_single_value_equals_evaluate(self):
        ds, dets = random_corpus(30)
        cfg = EvalConfig(iou_thresholds=(0.5,), ranking_policy=RankingPolicy())
        result = sweep(ds, dets, "dets_per_image", [3], cfg)
        single = evaluate(
            ds,
            dets,
            EvalConfig(iou_thresholds=(0.5,), ranking_policy=RankingPolicy(max_dets_per_image=3)),
        )
        assert result.reports[0] == single

    def test_matches_independent_per_value_eval(self):
        cfg = EvalConfig(iou_thresholds=(0.5,), ranking_policy=RankingPolicy())
        for seed in range(100):
            ds, dets = random_corpus(seed, n_images=3, n_categories=4)
            values = [1, 2, 4]
            result = sweep(ds, dets, "dets_per_class", values, cfg)
            for v, rep in zip(values, result.reports):
                independent = evaluate(
                    ds,
                    dets,
                    EvalConfig(
                        iou_thresholds=(0.5,),
                        ranking_policy=RankingPolicy(max_dets_per_class=v),
                    ),
                )
                assert rep == independent, f"seed={seed} value={v}"

    def test_class_cap_sweep_monotone_without_image_cap(self):
        cfg = EvalConfig(
            iou_thresholds=(0.5,),
            interpolation=Interpolation.exact(),
            ranking_policy=RankingPolicy(),
        )
        for seed in range(100):
            ds, dets = random_corpus(seed, n_images=3, n_categories=4)
            values = [1, 2, 3, 6, 12]
            result = sweep(ds, dets, "dets_per_class", values, cfg)
            for cid in ds.categories:
                aps = [r.ap_of(cid) for r in result.reports]
                aps = [a for a in aps if a is not None]
                assert all(b >= a - 1e-12 for a, b in zip(aps, aps[1:])), f"seed={seed} cid={cid}"

    def test_toy_image_cap_sweep(self):
        # Hand-traced: cap 2 gives weighted 0.5, cap 3 gives weighted 0.9.
        cfg = EvalConfig(
            iou_thresholds=(0.5,),
            interpolation=Interpolation.exact(),
            ranking_policy=RankingPolicy(),
        )
        weighted = {2: 0.0, 3: 0.0}
        for scenario, weight in fixtures.TOY_SCENARIO_WEIGHTS.items():
            ds = fixtures.toy_dataset(scenario)
            result = sweep(ds, fixtures.toy_detections(), "dets_per_image", [2, 3], cfg)
            for v, rep in zip(result.values, result.reports):
                weighted[v] += weight * rep.mean_ap
        assert weighted[2] == pytest.approx(0.5, abs=1e-12)
        assert weighted[3] == pytest.approx(0.9, abs=1e-12)

    def test_rejects_bad_axis_and_empty_values(self):
        ds, dets = random_corpus(31)
        with pytest.raises(ValueError):
            sweep(ds, dets, "bogus", [1])
        with pytest.raises(ValueError):
            sweep(ds, dets, "dets_per_image", [])


class TestSubsetEvaluate:
    def test_all_groups_is_full_evaluate(self):
        # Needs a corpus whose categories all carry a frequency group.
        ds, dets = fixtures.gameable_corpus()
        cfg = EvalConfig(iou_thresholds=(0.5,))
        full = evaluate(ds, dets, cfg)
        sub = subset_evaluate(
            ds,
            dets,
            {FrequencyGroup.RARE, FrequencyGroup.COMMON, FrequencyGroup.FREQUENT},
            cfg,
        )
        assert sub.mean_ap == pytest.approx(full.mean_ap, abs=1e-12)
        assert sub.n_categories_included == full.n_categories_included

    def test_no_rare_categories_flagged(self):
        from lveval.core import Category, Dataset, DetectionSet, ImageRecord

        ds = Dataset([ImageRecord(id=1)], [Category(id=1, image_count=500)], [])
        dets = DetectionSet.empty()
        report = subset_evaluate(ds, dets, {FrequencyGroup.RARE}, EvalConfig(iou_thresholds=(0.5,)))
        assert report.n_categories_included == 0
        assert "no_categories_evaluated" in report.flags

    def test_matches_manual_prefilter_oracle(self):
        cfg = EvalConfig(iou_thresholds=(0.5,), ranking_policy=RankingPolicy(max_dets_per_image=3))
        for seed in range(20):
            ds, dets = random_corpus(seed)
            groups = ds.frequency_groups(cfg.frequency_thresholds)
            keep = {c for c, g in groups.items() if g is FrequencyGroup.FREQUENT}
            got = subset_evaluate(ds, dets, {FrequencyGroup.FREQUENT}, cfg)
            manual_ds = ds.restrict_categories(keep)
            mask = np.isin(dets.category_ids, sorted(keep))
            manual = evaluate(manual_ds, dets.filtered(mask), cfg)
            assert got.mean_ap == manual.mean_ap
            assert got.n_categories_included == manual.n_categories_included
