"""Core domain types: geometry, corpus, detections, evaluation configuration.

Everything here is immutable after construction and safe to share across
concurrent workers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # circular at runtime: ranking builds on these types
    from .ranking import RankingPolicy


class LvevalError(Exception):
    """Base class for all errors raised by this package."""


class MalformedFile(LvevalError):
    """Input file is not syntactically valid JSON."""


class SchemaViolation(LvevalError):
    """Input file parses but is missing or mistypes a required field."""


class DanglingReference(LvevalError):
    """An annotation or detection cites an unknown image or category."""


class IoFailure(LvevalError):
    """Report or model output could not be written."""


class UndefinedCurve(LvevalError):
    """PR curve requested for a category with no groundtruth instances."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in (left, top, width, height) pixel form."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for v in (self.x, self.y, self.w, self.h):
            if not np.isfinite(v):
                raise ValueError(f"non-finite box coordinate: {self!r}")
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size: w={self.w}, h={self.h}")

    def area(self) -> float:
        return self.w * self.h


class FrequencyGroup(enum.Enum):
    RARE = "rare"
    COMMON = "common"
    FREQUENT = "frequent"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Category:
    id: int
    name: str = ""
    # Number of training images containing the category; None when the
    # annotation file does not carry frequency metadata.
    image_count: int | None = None

    def __post_init__(self):
        if self.image_count is not None and self.image_count < 0:
            raise ValueError(f"negative image_count for category {self.id}")


def frequency_group(
    category: Category, thresholds: tuple[int, int] = (10, 100)
) -> FrequencyGroup:
    """Bin a category into rare/common/frequent by training-image count.

    Boundaries are inclusive on the low side: count <= rare_max is rare,
    rare_max < count <= common_max is common, above is frequent. Categories
    without a (positive) count are Unknown.
    """
    rare_max, common_max = thresholds
    if rare_max >= common_max:
        raise ValueError("rare threshold must be below common threshold")
    n = category.image_count
    if n is None or n <= 0:
        return FrequencyGroup.UNKNOWN
    if n <= rare_max:
        return FrequencyGroup.RARE
    if n <= common_max:
        return FrequencyGroup.COMMON
    return FrequencyGroup.FREQUENT


@dataclass(frozen=True)
class ImageRecord:
    """One corpus image plus its verified-category bookkeeping.

    positive_category_ids are the categories annotated on the image,
    negative_category_ids the ones verified absent. Their union is the
    set of categories evaluated on this image; when both are empty the
    image places no restriction and every category is evaluated
    (plain-COCO files).
    """

    id: int
    positive_category_ids: frozenset[int] = frozenset()
    negative_category_ids: frozenset[int] = frozenset()
    not_exhaustive_category_ids: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.positive_category_ids & self.negative_category_ids:
            raise ValueError(
                f"image {self.id}: categories marked both present and absent"
            )

    @property
    def evaluation_universe(self) -> frozenset[int]:
        """Categories evaluated on this image; empty means all."""
        return self.positive_category_ids | self.negative_category_ids

    def evaluates(self, category_id: int) -> bool:
        uni = self.evaluation_universe
        return not uni or category_id in uni


@dataclass(frozen=True)
class GroundTruthInstance:
    id: int
    image_id: int
    category_id: int
    bbox: BoundingBox
    ignore: bool = False


@dataclass(frozen=True)
class Detection:
    """A single scored box prediction.

    id is the zero-based position in the input file and serves as the
    deterministic tie-break for equal scores everywhere in the engine.
    """

    id: int
    image_id: int
    category_id: int
    bbox: BoundingBox
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection {self.id}: score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class Interpolation:
    """AP integration mode: exact area or fixed-grid sampling."""

    kind: str  # "exact" or "sampled"
    n_points: int = 101

    def __post_init__(self):
        if self.kind not in ("exact", "sampled"):
            raise ValueError(f"unknown interpolation kind: {self.kind}")
        if self.kind == "sampled" and self.n_points < 2:
            raise ValueError("sampled interpolation needs at least 2 points")

    @classmethod
    def exact(cls) -> "Interpolation":
        return cls(kind="exact")

    @classmethod
    def sampled(cls, n_points: int = 101) -> "Interpolation":
        return cls(kind="sampled", n_points=n_points)


# Default IoU thresholds: 0.50:0.05:0.95, the common detection convention.
DEFAULT_IOU_THRESHOLDS: tuple[float, ...] = tuple(
    round(0.5 + 0.05 * i, 2) for i in range(10)
)
DEFAULT_FREQUENCY_THRESHOLDS: tuple[int, int] = (10, 100)


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    # None means "use the recommended per-class 10k budget".
    ranking_policy: RankingPolicy | None = None
    interpolation: Interpolation = Interpolation.sampled(101)
    frequency_thresholds: tuple[int, int] = DEFAULT_FREQUENCY_THRESHOLDS
    include_pooled: bool = False

    def __post_init__(self):
        thrs = tuple(float(t) for t in self.iou_thresholds)
        if not thrs:
            raise ValueError("at least one IoU threshold required")
        if any(not (0.0 < t <= 1.0) for t in thrs):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        if any(b <= a for a, b in zip(thrs, thrs[1:])):
            raise ValueError("IoU thresholds must be strictly increasing")
        object.__setattr__(self, "iou_thresholds", thrs)
        rare_max, common_max = self.frequency_thresholds
        if rare_max >= common_max:
            raise ValueError("frequency thresholds must satisfy rare_max < common_max")

    def resolved_policy(self):
        from .ranking import RankingPolicy

        if self.ranking_policy is None:
            return RankingPolicy(max_dets_per_class=10_000)
        return self.ranking_policy


@dataclass
class LoadSummary:
    """Bookkeeping from a file load: clamps and unknown fields."""

    unknown_fields: dict[str, int] = field(default_factory=dict)
    clamped_scores: int = 0
    clamped_boxes: int = 0

    def note_unknown(self, name: str) -> None:
        self.unknown_fields[name] = self.unknown_fields.get(name, 0) + 1


class Dataset:
    """Groundtruth corpus: images, categories, annotated instances.

    Immutable after construction. Index arrays used by the matcher are
    built lazily and cached.
    """

    def __init__(
        self,
        images: list[ImageRecord],
        categories: list[Category],
        instances: list[GroundTruthInstance],
        load_summary: LoadSummary | None = None,
    ):
        self.images: dict[int, ImageRecord] = {}
        for im in images:
            if im.id in self.images:
                raise SchemaViolation(f"duplicate image id {im.id}")
            self.images[im.id] = im
        self.categories: dict[int, Category] = {}
        for cat in categories:
            if cat.id in self.categories:
                raise SchemaViolation(f"duplicate category id {cat.id}")
            self.categories[cat.id] = cat
        for gt in instances:
            if gt.image_id not in self.images:
                raise DanglingReference(
                    f"annotation {gt.id} cites unknown image {gt.image_id}"
                )
            if gt.category_id not in self.categories:
                raise DanglingReference(
                    f"annotation {gt.id} cites unknown category {gt.category_id}"
                )
        self.instances: tuple[GroundTruthInstance, ...] = tuple(instances)
        self.load_summary = load_summary or LoadSummary()
        self._cache: dict[str, object] = {}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.images == other.images
            and self.categories == other.categories
            and self.instances == other.instances
        )

    @property
    def not_exhaustive_pairs(self) -> frozenset[tuple[int, int]]:
        got = self._cache.get("nex_pairs")
        if got is None:
            got = frozenset(
                (im.id, c)
                for im in self.images.values()
                for c in im.not_exhaustive_category_ids
            )
            self._cache["nex_pairs"] = got
        return got

    def category_index(self) -> dict[int, int]:
        got = self._cache.get("cat_index")
        if got is None:
            got = {cid: i for i, cid in enumerate(sorted(self.categories))}
            self._cache["cat_index"] = got
        return got

    def image_index(self) -> dict[int, int]:
        got = self._cache.get("img_index")
        if got is None:
            got = {iid: i for i, iid in enumerate(sorted(self.images))}
            self._cache["img_index"] = got
        return got

    def n_gt_by_category(self) -> dict[int, int]:
        """Non-ignore instance count per category (the recall denominator)."""
        got = self._cache.get("n_gt")
        if got is None:
            got = {cid: 0 for cid in self.categories}
            for gt in self.instances:
                if not gt.ignore:
                    got[gt.category_id] += 1
            self._cache["n_gt"] = got
        return got

    def image_ids_sorted(self) -> np.ndarray:
        got = self._cache.get("img_ids_sorted")
        if got is None:
            got = np.array(sorted(self.images), dtype=np.int64)
            self._cache["img_ids_sorted"] = got
        return got

    def category_ids_sorted(self) -> np.ndarray:
        got = self._cache.get("cat_ids_sorted")
        if got is None:
            got = np.array(sorted(self.categories), dtype=np.int64)
            self._cache["cat_ids_sorted"] = got
        return got

    def gt_columns(self) -> dict[str, np.ndarray]:
        """Instances as columnar arrays (cached), in file order."""
        got = self._cache.get("gt_columns")
        if got is None:
            n = len(self.instances)
            got = {
                "ids": np.fromiter((g.id for g in self.instances), np.int64, n),
                "image_ids": np.fromiter(
                    (g.image_id for g in self.instances), np.int64, n
                ),
                "category_ids": np.fromiter(
                    (g.category_id for g in self.instances), np.int64, n
                ),
                "boxes": np.array(
                    [[g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h] for g in self.instances],
                    dtype=np.float64,
                ).reshape(n, 4),
                "ignore": np.fromiter(
                    (g.ignore for g in self.instances), np.uint8, n
                ),
            }
            self._cache["gt_columns"] = got
        return got

    def frequency_groups(
        self, thresholds: tuple[int, int] = DEFAULT_FREQUENCY_THRESHOLDS
    ) -> dict[int, FrequencyGroup]:
        return {
            cid: frequency_group(cat, thresholds)
            for cid, cat in self.categories.items()
        }

    def restrict_categories(self, category_ids) -> "Dataset":
        """Corpus with only the given categories; instances and per-image
        verified sets are filtered to match."""
        keep = frozenset(category_ids)
        images = [
            ImageRecord(
                id=im.id,
                positive_category_ids=im.positive_category_ids & keep,
                negative_category_ids=im.negative_category_ids & keep,
                not_exhaustive_category_ids=im.not_exhaustive_category_ids & keep,
            )
            for im in self.images.values()
        ]
        cats = [c for c in self.categories.values() if c.id in keep]
        insts = [g for g in self.instances if g.category_id in keep]
        return Dataset(images, cats, insts)

    def stats(self) -> dict[str, int]:
        return {
            "n_images": len(self.images),
            "n_categories": len(self.categories),
            "n_annotations": len(self.instances),
        }


class DetectionSet:
    """Columnar store of a detector's scored boxes.

    Rows are kept in ascending detection id order (= input-file order for a
    fresh load). Filtering preserves ids, which double as the deterministic
    tie-break key for equal scores.
    """

    def __init__(
        self,
        det_ids: np.ndarray,
        image_ids: np.ndarray,
        category_ids: np.ndarray,
        boxes: np.ndarray,
        scores: np.ndarray,
        clamped_scores: int = 0,
        load_summary: LoadSummary | None = None,
    ):
        n = len(det_ids)
        if not (
            len(image_ids) == len(category_ids) == len(scores) == n
            and boxes.shape == (n, 4)
        ):
            raise ValueError("detection columns disagree on length")
        self.det_ids = np.ascontiguousarray(det_ids, dtype=np.int64)
        self.image_ids = np.ascontiguousarray(image_ids, dtype=np.int64)
        self.category_ids = np.ascontiguousarray(category_ids, dtype=np.int64)
        self.boxes = np.ascontiguousarray(boxes, dtype=np.float64)
        self.scores = np.ascontiguousarray(scores, dtype=np.float64)
        self.clamped_scores = clamped_scores
        self.load_summary = load_summary or LoadSummary()
        for arr in (self.det_ids, self.image_ids, self.category_ids, self.boxes, self.scores):
            arr.setflags(write=False)

    @classmethod
    def empty(cls) -> "DetectionSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.zeros((0, 4)), np.zeros(0))

    @classmethod
    def from_detections(cls, detections) -> "DetectionSet":
        dets = list(detections)
        return cls(
            det_ids=np.array([d.id for d in dets], dtype=np.int64),
            image_ids=np.array([d.image_id for d in dets], dtype=np.int64),
            category_ids=np.array([d.category_id for d in dets], dtype=np.int64),
            boxes=np.array([[d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h] for d in dets])
            .reshape(len(dets), 4)
            .astype(np.float64),
            scores=np.array([d.score for d in dets], dtype=np.float64),
        )

    def __len__(self) -> int:
        return len(self.det_ids)

    def __getitem__(self, i: int) -> Detection:
        return Detection(
            id=int(self.det_ids[i]),
            image_id=int(self.image_ids[i]),
            category_id=int(self.category_ids[i]),
            bbox=BoundingBox(*(float(v) for v in self.boxes[i])),
            score=float(self.scores[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def filtered(self, mask: np.ndarray) -> "DetectionSet":
        """Subset in the same (id-ascending) order; ids are preserved."""
        return DetectionSet(
            self.det_ids[mask],
            self.image_ids[mask],
            self.category_ids[mask],
            self.boxes[mask],
            self.scores[mask],
            clamped_scores=self.clamped_scores,
        )

    def with_scores(self, scores: np.ndarray) -> "DetectionSet":
        """Same rows with replaced scores (calibration output path)."""
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != self.scores.shape:
            raise ValueError("score array shape mismatch")
        return DetectionSet(
            self.det_ids,
            self.image_ids,
            self.category_ids,
            self.boxes,
            scores,
            clamped_scores=self.clamped_scores,
        )
