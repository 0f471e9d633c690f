from __future__ import annotations

import json

import numpy as np
import pytest

from lveval.core import (
    BoundingBox,
    Category,
    Dataset,
    DetectionSet,
    GroundTruthInstance,
    ImageRecord,
)

# Scores drawn from this grid keep ties representable and transforms
# collision-free in the monotone-invariance tests.
SCORE_GRID = np.arange(1, 64) / 64.0


def random_corpus(
    seed: int,
    n_images: int = 5,
    n_categories: int = 6,
    max_gts_per_image: int = 4,
    max_dets_per_pair: int = 3,
    p_ignore: float = 0.1,
    p_federated: float = 0.3,
    p_not_exhaustive: float = 0.15,
) -> tuple[Dataset, DetectionSet]:
    """Small random corpus with federated fields, ignore regions and ties."""
    rng = np.random.default_rng(seed)
    cat_ids = list(range(1, n_categories + 1))
    categories = [
        Category(
            id=c,
            name=f"cat{c}",
            image_count=int(rng.integers(0, 300)) if rng.random() < 0.8 else None,
        )
        for c in cat_ids
    ]

    def rand_box():
        x, y = rng.uniform(0, 80, 2)
        w, h = rng.uniform(4, 30, 2)
        return BoundingBox(float(x), float(y), float(w), float(h))

    instances = []
    images = []
    gt_id = 1
    for img in range(1, n_images + 1):
        present = set()
        n_gts = int(rng.integers(0, max_gts_per_image + 1))
        for _ in range(n_gts):
            cid = int(rng.choice(cat_ids))
            present.add(cid)
            instances.append(
                GroundTruthInstance(
                    id=gt_id,
                    image_id=img,
                    category_id=cid,
                    bbox=rand_box(),
                    ignore=bool(rng.random() < p_ignore),
                )
            )
            gt_id += 1
        neg = frozenset()
        nex = frozenset()
        if rng.random() < p_federated:
            absent = [c for c in cat_ids if c not in present]
            if absent:
                neg = frozenset(
                    int(c)
                    for c in rng.choice(
                        absent, size=min(len(absent), int(rng.integers(1, 4))), replace=False
                    )
                )
            if present and rng.random() < p_not_exhaustive:
                nex = frozenset({int(rng.choice(sorted(present)))})
        images.append(
            ImageRecord(
                id=img,
                positive_category_ids=frozenset(present),
                negative_category_ids=neg,
                not_exhaustive_category_ids=nex,
            )
        )
    dataset = Dataset(images, categories, instances)

    rows = []
    for gt in instances:
        for _ in range(int(rng.integers(0, max_dets_per_pair + 1))):
            # Perturbed copy of a groundtruth box, sometimes mislabeled.
            cid = gt.category_id if rng.random() < 0.8 else int(rng.choice(cat_ids))
            bx = gt.bbox
            box = (
                bx.x + float(rng.normal(0, 6)),
                bx.y + float(rng.normal(0, 6)),
                max(1.0, bx.w * float(rng.uniform(0.6, 1.4))),
                max(1.0, bx.h * float(rng.uniform(0.6, 1.4))),
            )
            rows.append((gt.image_id, cid, box, float(rng.choice(SCORE_GRID))))
    for img in range(1, n_images + 1):
        for _ in range(int(rng.integers(0, 3))):
            cid = int(rng.choice(cat_ids))
            b = rand_box()
            rows.append((img, cid, (b.x, b.y, b.w, b.h), float(rng.choice(SCORE_GRID))))

    dets = DetectionSet(
        det_ids=np.arange(len(rows), dtype=np.int64),
        image_ids=np.array([r[0] for r in rows], dtype=np.int64),
        category_ids=np.array([r[1] for r in rows], dtype=np.int64),
        boxes=np.array([r[2] for r in rows], dtype=np.float64).reshape(len(rows), 4),
        scores=np.array([r[3] for r in rows], dtype=np.float64),
    )
    return dataset, dets


def dataset_to_json_dict(dataset: Dataset) -> dict:
    images = []
    for im in dataset.images.values():
        entry = {"id": im.id}
        if im.negative_category_ids:
            entry["neg_category_ids"] = sorted(im.negative_category_ids)
        if im.not_exhaustive_category_ids:
            entry["not_exhaustive_category_ids"] = sorted(im.not_exhaustive_category_ids)
        images.append(entry)
    categories = []
    for c in dataset.categories.values():
        entry = {"id": c.id, "name": c.name}
        if c.image_count is not None:
            entry["image_count"] = c.image_count
        categories.append(entry)
    annotations = [
        {
            "id": g.id,
            "image_id": g.image_id,
            "category_id": g.category_id,
            "bbox": [g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h],
            "iscrowd": int(g.ignore),
        }
        for g in dataset.instances
    ]
    return {"images": images, "annotations": annotations, "categories": categories}


def detections_to_json_list(dets: DetectionSet) -> list:
    return [
        {
            "image_id": int(dets.image_ids[i]),
            "category_id": int(dets.category_ids[i]),
            "bbox": [float(v) for v in dets.boxes[i]],
            "score": float(dets.scores[i]),
        }
        for i in range(len(dets))
    ]


def write_corpus(tmp_path, dataset: Dataset, dets: DetectionSet, stem: str = "corpus"):
    gt_path = tmp_path / f"{stem}_gt.json"
    det_path = tmp_path / f"{stem}_dets.json"
    gt_path.write_text(json.dumps(dataset_to_json_dict(dataset)))
    det_path.write_text(json.dumps(detections_to_json_list(dets)))
    return gt_path, det_path


@pytest.fixture(scope="session", autouse=True)
def warm_match_kernel():
    """Compile the matcher kernel once so timed tests measure work, not JIT."""
    from lveval.core import EvalConfig
    from lveval.metrics import evaluate

    ds, dets = random_corpus(0, n_images=2, n_categories=2)
    evaluate(ds, dets, EvalConfig(iou_thresholds=(0.5,)))
