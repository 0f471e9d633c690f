"""Per-category score calibration fit from matched TP/FP labels.

Labels come from greedy matching at IoU 0.5 with no ranking caps, so
tail-class detections are never crowded out of the fitting data. Five
fitter families are available; every family degrades to a safe fallback
(identity, or a constant rate) when a category lacks data, so applying a
fitted model is always total over the vocabulary.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import Dataset, DetectionSet, IoFailure, MalformedFile, SchemaViolation
from .matching import OUTCOME_FP, OUTCOME_TP, federated_filter, match_dataset

MIN_SAMPLES_DEFAULT = 5
_SCORE_EPS = 1e-6  # clamp for the beta family's logarithms
_RIDGE = 1e-6


@dataclass(frozen=True)
class LabeledScore:
    score: float
    label: int  # 1 = true positive at IoU 0.5, 0 = false positive
    category_id: int


def label_for_calibration(
    dataset: Dataset, dets: DetectionSet, n_threads: int = 1
) -> list[LabeledScore]:
    """Match at IoU 0.5 with no ranking caps; TP -> 1, FP -> 0.

    Ignored outcomes (ignore regions, not-exhaustively-annotated pairs)
    produce no label.
    """
    filtered = federated_filter(dataset, dets)
    mset = match_dataset(dataset, filtered, [0.5], n_threads=n_threads)
    outcome = mset.outcome[0]
    out = []
    for i in range(len(mset)):
        code = int(outcome[i])
        if code == OUTCOME_TP:
            label = 1
        elif code == OUTCOME_FP:
            label = 0
        else:
            continue
        out.append(
            LabeledScore(
                score=float(mset.scores[i]),
                label=label,
                category_id=int(mset.category_ids[i]),
            )
        )
    return out


# --- calibrator families -----------------------------------------------------


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


@dataclass(frozen=True)
class IdentityCalibrator:
    method = "identity"

    def transform(self, scores: np.ndarray) -> np.ndarray:
        return np.asarray(scores, dtype=np.float64).copy()

    @property
    def is_monotone(self) -> bool:
        return True

    def params(self) -> dict:
        return {}


@dataclass(frozen=True)
class PlattCalibrator:
    """sigmoid(a * s + b); a >= 0 keeps the map monotone."""

    a: float
    b: float
    method = "platt"

    def transform(self, scores: np.ndarray) -> np.ndarray:
        return _sigmoid(self.a * np.asarray(scores, dtype=np.float64) + self.b)

    @property
    def is_monotone(self) -> bool:
        return self.a >= 0

    def params(self) -> dict:
        return {"a": self.a, "b": self.b}


@dataclass(frozen=True)
class IsotonicCalibrator:
    """Monotone step fit; applied with linear interpolation between the
    pooled blocks' score centers, clamped to the end values outside."""

    breakpoints: tuple[tuple[float, float], ...]  # (score center, value), sorted
    method = "isotonic"

    def transform(self, scores: np.ndarray) -> np.ndarray:
        scores = np.asarray(scores, dtype=np.float64)
        xs = np.array([p[0] for p in self.breakpoints])
        ys = np.array([p[1] for p in self.breakpoints])
        if len(xs) == 0:
            return scores.copy()
        return np.interp(scores, xs, ys)

    @property
    def is_monotone(self) -> bool:
        return True

    def params(self) -> dict:
        return {"breakpoints": [list(p) for p in self.breakpoints]}


@dataclass(frozen=True)
class HistogramCalibrator:
    """Equal-frequency bins with Laplace-smoothed positive rates."""

    bin_edges: tuple[float, ...]  # len = n_bins + 1, spans [0, 1]
    bin_rates: tuple[float, ...]
    method = "histbin"

    def transform(self, scores: np.ndarray) -> np.ndarray:
        scores = np.asarray(scores, dtype=np.float64)
        inner = np.array(self.bin_edges[1:-1])
        idx = np.searchsorted(inner, scores, side="right")
        return np.array(self.bin_rates, dtype=np.float64)[idx]

    @property
    def is_monotone(self) -> bool:
        rates = self.bin_rates
        return all(b >= a for a, b in zip(rates, rates[1:]))

    def params(self) -> dict:
        return {"bin_edges": list(self.bin_edges), "bin_rates": list(self.bin_rates)}


@dataclass(frozen=True)
class BetaCalibrator:
    """sigmoid(a * ln(s) - b * ln(1 - s) + c) with a, b >= 0 after clamping."""

    a: float
    b: float
    c: float
    method = "beta"

    def transform(self, scores: np.ndarray) -> np.ndarray:
        s = np.clip(np.asarray(scores, dtype=np.float64), _SCORE_EPS, 1.0 - _SCORE_EPS)
        return _sigmoid(self.a * np.log(s) - self.b * np.log(1.0 - s) + self.c)

    @property
    def is_monotone(self) -> bool:
        return self.a >= 0 and self.b >= 0

    def params(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c}


@dataclass(frozen=True)
class BBQCalibrator:
    """AIC-weighted mixture of equal-frequency binning models."""

    components: tuple[HistogramCalibrator, ...]
    weights: tuple[float, ...]
    method = "bbq"

    def transform(self, scores: np.ndarray) -> np.ndarray:
        scores = np.asarray(scores, dtype=np.float64)
        out = np.zeros_like(scores)
        for comp, w in zip(self.components, self.weights):
            out += w * comp.transform(scores)
        return out

    @property
    def is_monotone(self) -> bool:
        # The mixture of monotone components is monotone; a mixture with a
        # non-monotone component is checked empirically on a grid.
        if all(c.is_monotone for c in self.components):
            return True
        grid = self.transform(np.linspace(0.0, 1.0, 513))
        return bool(np.all(np.diff(grid) >= -1e-12))

    def params(self) -> dict:
        return {
            "components": [c.params() for c in self.components],
            "weights": list(self.weights),
        }


Calibrator = (
    IdentityCalibrator
    | PlattCalibrator
    | IsotonicCalibrator
    | HistogramCalibrator
    | BetaCalibrator
    | BBQCalibrator
)


def _split(samples: list[LabeledScore]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples], dtype=np.float64)
    return scores, labels


def _smoothed_rate(labels: np.ndarray) -> float:
    return (float(labels.sum()) + 1.0) / (len(labels) + 2.0)


def _logit(p: float) -> float:
    p = min(max(p, _SCORE_EPS), 1.0 - _SCORE_EPS)
    return math.log(p / (1.0 - p))


def _newton_logistic(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Ridge-regularized logistic fit by damped Newton iterations.

    features carries the intercept column; returns the weight vector.
    Deterministic: fixed start, fixed damping schedule.
    """
    n, d = features.shape
    w = np.zeros(d)

    def nll(wv):
        z = features @ wv
        # log(1 + exp(z)) - y*z, computed stably
        return float(
            np.sum(np.logaddexp(0.0, z) - labels * z) + 0.5 * _RIDGE * wv @ wv
        )

    current = nll(w)
    for _ in range(100):
        p = _sigmoid(features @ w)
        grad = features.T @ (p - labels) + _RIDGE * w
        weight = np.clip(p * (1.0 - p), 1e-12, None)
        hess = (features * weight[:, None]).T @ features + _RIDGE * np.eye(d)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        # Damping: halve until the objective stops increasing.
        scale = 1.0
        for _ in range(30):
            candidate = w - scale * step
            value = nll(candidate)
            if value <= current + 1e-12:
                break
            scale *= 0.5
        else:
            return w
        w = candidate
        converged = (
            float(np.max(np.abs(scale * step))) < 1e-10
            or abs(current - value) < 1e-10 * max(1.0, abs(current))
        )
        current = value
        if converged:
            break
    return w


def fit_platt(
    samples: list[LabeledScore], min_samples: int = MIN_SAMPLES_DEFAULT
) -> Calibrator:
    """Maximum-likelihood sigmoid on raw scores.

    Falls back to identity below min_samples and to a constant
    Laplace-smoothed rate when only one label value is present. A negative
    slope is clamped to zero (constant at the smoothed rate) to keep the
    map monotone.
    """
    if len(samples) < min_samples:
        return IdentityCalibrator()
    scores, labels = _split(samples)
    if labels.min() == labels.max():
        return PlattCalibrator(a=0.0, b=_logit(_smoothed_rate(labels)))
    feats = np.column_stack([scores, np.ones_like(scores)])
    a, b = _newton_logistic(feats, labels)
    if a < 0:
        return PlattCalibrator(a=0.0, b=_logit(_smoothed_rate(labels)))
    return PlattCalibrator(a=float(a), b=float(b))


def _pav(xs: np.ndarray, ys: np.ndarray, ws: np.ndarray) -> list[tuple[float, float, float]]:
    """Pool-adjacent-violators on weighted points sorted by x.

    Returns (block score center, block value, block weight) triples;
    centers are the weighted means of the pooled scores.
    """
    blocks: list[list[float]] = []  # [sum_wy, sum_w, sum_wx]
    for x, y, w in zip(xs, ys, ws):
        blocks.append([w * y, w, w * x])
        while len(blocks) >= 2 and (
            blocks[-2][0] / blocks[-2][1] >= blocks[-1][0] / blocks[-1][1]
        ):
            b = blocks.pop()
            blocks[-1][0] += b[0]
            blocks[-1][1] += b[1]
            blocks[-1][2] += b[2]
    return [(b[2] / b[1], b[0] / b[1], b[1]) for b in blocks]


def fit_isotonic(
    samples: list[LabeledScore], min_samples: int = MIN_SAMPLES_DEFAULT
) -> Calibrator:
    """Least-squares monotone step fit (pool-adjacent-violators).

    Samples sharing a score are pre-pooled so the fit stays a function of
    the score.
    """
    if len(samples) < min_samples:
        return IdentityCalibrator()
    scores, labels = _split(samples)
    order = np.argsort(scores, kind="stable")
    scores, labels = scores[order], labels[order]
    uniq, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=labels)
    pooled_y = sums / counts
    blocks = _pav(uniq, pooled_y, counts.astype(np.float64))
    return IsotonicCalibrator(breakpoints=tuple((float(x), float(y)) for x, y, _ in blocks))


def _equal_frequency_edges(scores_sorted: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin edges spanning [0, 1] that split the samples near-evenly.

    An interior edge sits halfway between two distinct neighboring sample
    values; a split point landing inside a run of tied scores slides to
    the run's end. Edges that cannot separate anything are dropped, so no
    bin can be empty.
    """
    n = len(scores_sorted)
    edges = [0.0]
    for b in range(1, n_bins):
        idx = round(b * n / n_bins)
        idx = min(max(idx, 1), n - 1)
        while idx < n and scores_sorted[idx] == scores_sorted[idx - 1]:
            idx += 1
        if idx >= n:
            continue
        edge = 0.5 * (scores_sorted[idx - 1] + scores_sorted[idx])
        # Bins are lower-inclusive: a sample equal to an edge goes above it.
        # The midpoint of very close floats can round down onto the lower
        # value, which would push that sample into the wrong bin; the upper
        # value itself is always a valid separator.
        if edge <= scores_sorted[idx - 1]:
            edge = scores_sorted[idx]
        if edge > edges[-1] and edge < 1.0:
            edges.append(float(edge))
    edges.append(1.0)
    return np.array(edges, dtype=np.float64)


def _fit_histogram_arrays(scores: np.ndarray, labels: np.ndarray, n_bins: int) -> HistogramCalibrator:
    order = np.argsort(scores, kind="stable")
    scores_sorted = scores[order]
    labels_sorted = labels[order]
    edges = _equal_frequency_edges(scores_sorted, n_bins)
    inner = edges[1:-1]
    idx = np.searchsorted(inner, scores_sorted, side="right")
    n_actual = len(edges) - 1
    rates = []
    for b in range(n_actual):
        mask = idx == b
        count = int(mask.sum())
        pos = float(labels_sorted[mask].sum())
        rates.append((pos + 1.0) / (count + 2.0))
    return HistogramCalibrator(
        bin_edges=tuple(float(e) for e in edges), bin_rates=tuple(rates)
    )


def fit_histogram(
    samples: list[LabeledScore], min_samples: int = MIN_SAMPLES_DEFAULT
) -> Calibrator:
    """Equal-frequency histogram binning with Laplace-smoothed rates.

    Bin count is max(1, min(15, n // 10)).
    """
    if len(samples) < min_samples:
        return IdentityCalibrator()
    scores, labels = _split(samples)
    n_bins = max(1, min(15, len(samples) // 10))
    return _fit_histogram_arrays(scores, labels, n_bins)


def fit_beta(
    samples: list[LabeledScore], min_samples: int = MIN_SAMPLES_DEFAULT
) -> Calibrator:
    """Logistic fit on (ln s, -ln(1-s)) features.

    A negative coefficient is clamped to zero and the remainder refit, the
    standard constraint scheme for this family; both clamped gives a
    constant sigmoid(c).
    """
    if len(samples) < min_samples:
        return IdentityCalibrator()
    scores, labels = _split(samples)
    if labels.min() == labels.max():
        return BetaCalibrator(a=0.0, b=0.0, c=_logit(_smoothed_rate(labels)))
    s = np.clip(scores, _SCORE_EPS, 1.0 - _SCORE_EPS)
    f1 = np.log(s)
    f2 = -np.log(1.0 - s)
    ones = np.ones_like(s)

    a, b, c = _newton_logistic(np.column_stack([f1, f2, ones]), labels)
    if a < 0 and b < 0:
        c = _logit(_smoothed_rate(labels))
        return BetaCalibrator(a=0.0, b=0.0, c=float(c))
    if a < 0:
        b, c = _newton_logistic(np.column_stack([f2, ones]), labels)
        if b < 0:
            return BetaCalibrator(a=0.0, b=0.0, c=_logit(_smoothed_rate(labels)))
        return BetaCalibrator(a=0.0, b=float(b), c=float(c))
    if b < 0:
        a, c = _newton_logistic(np.column_stack([f1, ones]), labels)
        if a < 0:
            return BetaCalibrator(a=0.0, b=0.0, c=_logit(_smoothed_rate(labels)))
        return BetaCalibrator(a=float(a), b=0.0, c=float(c))
    return BetaCalibrator(a=float(a), b=float(b), c=float(c))


def bbq_candidate_bins(n: int) -> list[int]:
    """Candidate bin counts: integers in [max(1, floor(n^(1/3)/2)), ceil(2 n^(1/3))]."""
    cbrt = n ** (1.0 / 3.0)
    # Perfect cubes must not lose a candidate to float error in the root.
    if abs(cbrt - round(cbrt)) < 1e-9:
        cbrt = float(round(cbrt))
    lo = max(1, math.floor(cbrt / 2.0))
    hi = max(lo, math.ceil(2.0 * cbrt))
    return list(range(lo, hi + 1))


def fit_bbq(
    samples: list[LabeledScore], min_samples: int = MIN_SAMPLES_DEFAULT
) -> Calibrator:
    """Mixture over candidate equal-frequency binnings weighted by AIC.

    Each candidate is scored with AIC = 2b - 2 lnL where lnL is the
    Bernoulli log-likelihood of the samples under the candidate's smoothed
    bin rates; weights are exp(-(AIC - AIC_min) / 2), normalized.
    """
    if len(samples) < min_samples:
        return IdentityCalibrator()
    scores, labels = _split(samples)
    components = []
    aics = []
    seen_bins = set()
    for b in bbq_candidate_bins(len(samples)):
        comp = _fit_histogram_arrays(scores, labels, b)
        n_actual = len(comp.bin_rates)
        if n_actual in seen_bins:
            continue  # tied scores collapsed this candidate into an earlier one
        seen_bins.add(n_actual)
        rates = comp.transform(scores)
        ll = float(np.sum(labels * np.log(rates) + (1.0 - labels) * np.log(1.0 - rates)))
        aics.append(2.0 * n_actual - 2.0 * ll)
        components.append(comp)
    aics = np.array(aics)
    w = np.exp(-(aics - aics.min()) / 2.0)
    w = w / w.sum()
    return BBQCalibrator(components=tuple(components), weights=tuple(float(v) for v in w))


_FITTERS = {
    "platt": fit_platt,
    "isotonic": fit_isotonic,
    "histbin": fit_histogram,
    "beta": fit_beta,
    "bbq": fit_bbq,
}

METHOD_NAMES = tuple(sorted(_FITTERS))


@dataclass(frozen=True)
class CategoryCalibration:
    calibrator: Calibrator
    n_samples: int
    n_positive: int
    fallback: str | None  # why a fallback was used, when it was
    monotone: bool


@dataclass
class CalibrationModel:
    """Per-category score map; identity entries make application total."""

    method: str
    min_samples: int
    per_category: dict[int, CategoryCalibration]

    def calibrator_for(self, category_id: int) -> Calibrator:
        got = self.per_category.get(category_id)
        return got.calibrator if got is not None else IdentityCalibrator()

    def to_dict(self) -> dict:
        cats = {}
        for cid, entry in self.per_category.items():
            cats[str(cid)] = {
                "method": entry.calibrator.method,
                "params": entry.calibrator.params(),
                "fit": {
                    "n_samples": entry.n_samples,
                    "n_positive": entry.n_positive,
                    "fallback": entry.fallback,
                    "monotone": entry.monotone,
                },
            }
        return {
            "schema": "lveval.calibration/1",
            "method": self.method,
            "min_samples": self.min_samples,
            "categories": cats,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationModel":
        per_category = {}
        for cid, entry in d["categories"].items():
            per_category[int(cid)] = CategoryCalibration(
                calibrator=_calibrator_from_dict(entry["method"], entry["params"]),
                n_samples=entry["fit"]["n_samples"],
                n_positive=entry["fit"]["n_positive"],
                fallback=entry["fit"]["fallback"],
                monotone=entry["fit"]["monotone"],
            )
        return cls(
            method=d["method"],
            min_samples=d["min_samples"],
            per_category=per_category,
        )


def _calibrator_from_dict(method: str, params: dict) -> Calibrator:
    if method == "identity":
        return IdentityCalibrator()
    if method == "platt":
        return PlattCalibrator(a=params["a"], b=params["b"])
    if method == "isotonic":
        return IsotonicCalibrator(
            breakpoints=tuple((float(x), float(y)) for x, y in params["breakpoints"])
        )
    if method == "histbin":
        return HistogramCalibrator(
            bin_edges=tuple(params["bin_edges"]), bin_rates=tuple(params["bin_rates"])
        )
    if method == "beta":
        return BetaCalibrator(a=params["a"], b=params["b"], c=params["c"])
    if method == "bbq":
        return BBQCalibrator(
            components=tuple(
                HistogramCalibrator(
                    bin_edges=tuple(c["bin_edges"]), bin_rates=tuple(c["bin_rates"])
                )
                for c in params["components"]
            ),
            weights=tuple(params["weights"]),
        )
    raise SchemaViolation(f"unknown calibrator method: {method}")


def fit_per_class(
    dataset: Dataset,
    dets: DetectionSet,
    method: str,
    min_samples: int = MIN_SAMPLES_DEFAULT,
    n_threads: int = 1,
) -> CalibrationModel:
    """Label the detections against the corpus and fit one map per category.

    Categories with fewer than min_samples labels keep identity with a
    recorded reason; single-label categories get a constant-rate fallback
    for the parametric families.
    """
    if method not in _FITTERS:
        raise ValueError(f"unknown calibration method: {method}")
    fitter = _FITTERS[method]
    labels = label_for_calibration(dataset, dets, n_threads=n_threads)
    by_cat: dict[int, list[LabeledScore]] = {}
    for s in labels:
        by_cat.setdefault(s.category_id, []).append(s)

    per_category: dict[int, CategoryCalibration] = {}
    for cid in dataset.categories:
        samples = by_cat.get(cid, [])
        n = len(samples)
        n_pos = sum(s.label for s in samples)
        fallback = None
        if n < min_samples:
            calibrator: Calibrator = IdentityCalibrator()
            fallback = f"insufficient_data:{n}<{min_samples}"
        else:
            calibrator = fitter(samples, min_samples=min_samples)
            if method in ("platt", "beta") and (n_pos == 0 or n_pos == n):
                fallback = "single_label:constant_rate"
        per_category[cid] = CategoryCalibration(
            calibrator=calibrator,
            n_samples=n,
            n_positive=int(n_pos),
            fallback=fallback,
            monotone=calibrator.is_monotone,
        )
    return CalibrationModel(
        method=method, min_samples=min_samples, per_category=per_category
    )


def apply_calibration(dets: DetectionSet, model: CalibrationModel) -> DetectionSet:
    """Replace scores with calibrator output clamped to [0, 1].

    Boxes, ids and row order are untouched. Categories absent from the
    model pass through unchanged with a warning.
    """
    if len(dets) == 0:
        return dets
    new_scores = dets.scores.copy()
    unknown = []
    order = np.argsort(dets.category_ids, kind="stable")
    sorted_cats = dets.category_ids[order]
    starts = np.flatnonzero(np.concatenate(([True], sorted_cats[1:] != sorted_cats[:-1])))
    ends = np.concatenate((starts[1:], [len(order)]))
    for s, e in zip(starts, ends):
        rows = order[s:e]
        cid = int(sorted_cats[s])
        entry = model.per_category.get(cid)
        if entry is None:
            unknown.append(cid)
            continue
        new_scores[rows] = entry.calibrator.transform(dets.scores[rows])
    if unknown:
        warnings.warn(
            f"apply_calibration: no calibrator for categories {unknown}; identity used",
            stacklevel=2,
        )
    return dets.with_scores(np.clip(new_scores, 0.0, 1.0))


def expected_calibration_error(samples: list[LabeledScore], n_bins: int = 10) -> float:
    """Equal-width-bin ECE: sum over bins of |bin| / n * |accuracy - confidence|."""
    if not samples:
        raise ValueError("ECE needs at least one sample")
    scores, labels = _split(samples)
    idx = np.minimum((scores * n_bins).astype(np.int64), n_bins - 1)
    ece = 0.0
    n = len(samples)
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            continue
        acc = float(labels[mask].mean())
        conf = float(scores[mask].mean())
        ece += (count / n) * abs(acc - conf)
    return ece


def save_calibration_model(model: CalibrationModel, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fp:
            json.dump(model.to_dict(), fp, indent=2)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_calibration_model(path) -> CalibrationModel:
    try:
        with open(path, "r", encoding="utf-8") as fp:
            raw = json.load(fp)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    for key in ("method", "min_samples", "categories"):
        if key not in raw:
            raise SchemaViolation(f"{path}: missing '{key}'")
    return CalibrationModel.from_dict(raw)
