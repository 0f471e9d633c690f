"""Parse groundtruth and detection-result files; persist reports and models.

Groundtruth follows the COCO annotation layout with the LVIS extensions
honored: image-level "neg_category_ids" and "not_exhaustive_category_ids",
category-level "image_count". Detections are a JSON array of
{image_id, category_id, bbox: [x, y, w, h], score} read with a streaming
parser so large result dumps never have to fit in memory as text.
"""

from __future__ import annotations

import csv
import json
import warnings

import numpy as np

from .core import (
    BoundingBox,
    Category,
    Dataset,
    DanglingReference,
    DetectionSet,
    GroundTruthInstance,
    ImageRecord,
    IoFailure,
    LoadSummary,
    MalformedFile,
    SchemaViolation,
)

_IMAGE_FIELDS = {"id", "neg_category_ids", "not_exhaustive_category_ids"}
_CATEGORY_FIELDS = {"id", "name", "image_count"}
_ANNOTATION_FIELDS = {"id", "image_id", "category_id", "bbox", "iscrowd", "ignore"}
_DETECTION_FIELDS = {"image_id", "category_id", "bbox", "score"}


def _require(entry: dict, key: str, where: str):
    if key not in entry:
        raise SchemaViolation(f"{where}: missing required field '{key}'")
    return entry[key]


def _int_field(entry: dict, key: str, where: str) -> int:
    v = _require(entry, key, where)
    if isinstance(v, bool) or not isinstance(v, int):
        raise SchemaViolation(f"{where}: field '{key}' must be an integer")
    return v


def _parse_bbox(raw, where: str, summary: LoadSummary) -> tuple[float, float, float, float]:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise SchemaViolation(f"{where}: bbox must be a [x, y, w, h] array")
    try:
        x, y, w, h = (float(v) for v in raw)
    except (TypeError, ValueError):
        raise SchemaViolation(f"{where}: bbox holds a non-numeric value") from None
    if not all(np.isfinite(v) for v in (x, y, w, h)):
        raise SchemaViolation(f"{where}: bbox holds a non-finite value")
    # Converted detector outputs occasionally carry slightly negative sizes;
    # clamp instead of rejecting the whole file.
    if w < 0 or h < 0:
        summary.clamped_boxes += 1
        w, h = max(w, 0.0), max(h, 0.0)
    return x, y, w, h


def load_dataset(path) -> Dataset:
    """Load an annotation file into a Dataset.

    Raises MalformedFile on JSON syntax errors, SchemaViolation on missing
    required fields, and DanglingReference when an annotation cites an
    unknown image or category. Unknown fields are ignored but counted in
    the returned dataset's load_summary.
    """
    try:
        with open(path, "r", encoding="utf-8") as fp:
            raw = json.load(fp)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaViolation(f"{path}: top level must be a JSON object")
    for key in ("images", "annotations", "categories"):
        if key not in raw or not isinstance(raw[key], list):
            raise SchemaViolation(f"{path}: missing top-level '{key}' array")

    summary = LoadSummary()
    for key in raw:
        if key not in ("images", "annotations", "categories"):
            summary.note_unknown(key)

    categories = []
    for i, entry in enumerate(raw["categories"]):
        where = f"categories[{i}]"
        cid = _int_field(entry, "id", where)
        image_count = entry.get("image_count")
        if image_count is not None and (
            isinstance(image_count, bool) or not isinstance(image_count, int)
        ):
            raise SchemaViolation(f"{where}: image_count must be an integer")
        categories.append(
            Category(id=cid, name=str(entry.get("name", "")), image_count=image_count)
        )
        for key in entry:
            if key not in _CATEGORY_FIELDS:
                summary.note_unknown(f"category.{key}")
    cat_ids = {c.id for c in categories}

    # Positive sets are derived below from the annotations themselves; the
    # file only declares the negative and not-exhaustive sets.
    neg: dict[int, set] = {}
    nex: dict[int, set] = {}
    image_ids = []
    for i, entry in enumerate(raw["images"]):
        where = f"images[{i}]"
        iid = _int_field(entry, "id", where)
        image_ids.append(iid)
        for key, store in (("neg_category_ids", neg), ("not_exhaustive_category_ids", nex)):
            if key in entry:
                vals = entry[key]
                if not isinstance(vals, list):
                    raise SchemaViolation(f"{where}: {key} must be an array")
                for c in vals:
                    if c not in cat_ids:
                        raise DanglingReference(
                            f"{where}: {key} cites unknown category {c}"
                        )
                store[iid] = set(vals)
        for key in entry:
            if key not in _IMAGE_FIELDS:
                summary.note_unknown(f"image.{key}")
    image_id_set = set(image_ids)

    positives: dict[int, set] = {}
    instances = []
    for i, entry in enumerate(raw["annotations"]):
        where = f"annotations[{i}]"
        aid = _int_field(entry, "id", where)
        iid = _int_field(entry, "image_id", where)
        cid = _int_field(entry, "category_id", where)
        if iid not in image_id_set:
            raise DanglingReference(f"{where}: cites unknown image {iid}")
        if cid not in cat_ids:
            raise DanglingReference(f"{where}: cites unknown category {cid}")
        x, y, w, h = _parse_bbox(_require(entry, "bbox", where), where, summary)
        ignore = bool(entry.get("iscrowd", 0)) or bool(entry.get("ignore", 0))
        instances.append(
            GroundTruthInstance(
                id=aid,
                image_id=iid,
                category_id=cid,
                bbox=BoundingBox(x, y, w, h),
                ignore=ignore,
            )
        )
        positives.setdefault(iid, set()).add(cid)
        for key in entry:
            if key not in _ANNOTATION_FIELDS:
                summary.note_unknown(f"annotation.{key}")

    images = [
        ImageRecord(
            id=iid,
            positive_category_ids=frozenset(positives.get(iid, ())),
            negative_category_ids=frozenset(neg.get(iid, set()) - positives.get(iid, set())),
            not_exhaustive_category_ids=frozenset(nex.get(iid, ())),
        )
        for iid in image_ids
    ]
    if summary.clamped_boxes:
        warnings.warn(
            f"{path}: clamped {summary.clamped_boxes} negative box sizes to zero",
            stacklevel=2,
        )
    return Dataset(images, categories, instances, load_summary=summary)


def save_dataset(dataset: Dataset, path) -> None:
    """Write a Dataset back out in the annotation layout load_dataset reads."""
    images = []
    for im in dataset.images.values():
        entry: dict = {"id": im.id}
        if im.negative_category_ids:
            entry["neg_category_ids"] = sorted(im.negative_category_ids)
        if im.not_exhaustive_category_ids:
            entry["not_exhaustive_category_ids"] = sorted(im.not_exhaustive_category_ids)
        images.append(entry)
    categories = []
    for cat in dataset.categories.values():
        entry = {"id": cat.id, "name": cat.name}
        if cat.image_count is not None:
            entry["image_count"] = cat.image_count
        categories.append(entry)
    annotations = []
    for gt in dataset.instances:
        annotations.append(
            {
                "id": gt.id,
                "image_id": gt.image_id,
                "category_id": gt.category_id,
                "bbox": [gt.bbox.x, gt.bbox.y, gt.bbox.w, gt.bbox.h],
                "iscrowd": int(gt.ignore),
            }
        )
    payload = {"images": images, "annotations": annotations, "categories": categories}
    try:
        with open(path, "w", encoding="utf-8") as fp:
            json.dump(payload, fp)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _iter_json_array(fp, chunk_size: int = 1 << 20):
    """Yield the elements of a top-level JSON array incrementally.

    Reads the file in chunks and decodes one element at a time, so peak
    memory is bounded by the chunk size plus one element, not the file size.
    """
    decoder = json.JSONDecoder()
    buf = ""
    pos = 0

    def fill() -> bool:
        nonlocal buf, pos
        chunk = fp.read(chunk_size)
        if not chunk:
            return False
        buf = buf[pos:] + chunk
        pos = 0
        return True

    def skip_ws() -> bool:
        nonlocal pos
        while True:
            while pos < len(buf) and buf[pos] in " \t\r\n":
                pos += 1
            if pos < len(buf):
                return True
            if not fill():
                return False

    if not skip_ws():
        raise MalformedFile("empty detections file")
    if buf[pos] != "[":
        raise MalformedFile("detections file must be a top-level JSON array")
    pos += 1

    first = True
    while True:
        if not skip_ws():
            raise MalformedFile("unterminated JSON array")
        if buf[pos] == "]":
            pos += 1
            if skip_ws():
                raise MalformedFile("trailing data after JSON array")
            return
        if not first:
            if buf[pos] != ",":
                raise MalformedFile("expected ',' between array elements")
            pos += 1
            if not skip_ws():
                raise MalformedFile("unterminated JSON array")
            if buf[pos] == "]":
                raise MalformedFile("trailing comma in JSON array")
        first = False
        while True:
            try:
                value, end = decoder.raw_decode(buf, pos)
            except json.JSONDecodeError:
                # May be an element truncated at the chunk boundary.
                if fill():
                    continue
                raise MalformedFile("invalid JSON inside detections array") from None
            if end == len(buf) and fill():
                # A bare number could continue in the next chunk; re-decode.
                continue
            pos = end
            break
        yield value


def load_detections(path, dataset: Dataset | None = None) -> DetectionSet:
    """Load a detection-results array in file order with ids 0..n-1.

    Scores are clamped into [0, 1] with a warning counter; out-of-range
    values happen in real detector output via float error. When a dataset
    is given, image and category references are validated.
    """
    from array import array

    image_ids = array("q")
    category_ids = array("q")
    boxes = array("d")  # flat x,y,w,h quadruples
    scores = array("d")
    summary = LoadSummary()
    clamped = 0

    known_images = set(dataset.images) if dataset is not None else None
    known_cats = set(dataset.categories) if dataset is not None else None

    try:
        fp = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    with fp:
        for i, entry in enumerate(_iter_json_array(fp)):
            where = f"detections[{i}]"
            if not isinstance(entry, dict):
                raise SchemaViolation(f"{where}: must be an object")
            iid = _int_field(entry, "image_id", where)
            cid = _int_field(entry, "category_id", where)
            if known_images is not None and iid not in known_images:
                raise DanglingReference(f"{where}: cites unknown image {iid}")
            if known_cats is not None and cid not in known_cats:
                raise DanglingReference(f"{where}: cites unknown category {cid}")
            score = _require(entry, "score", where)
            if isinstance(score, bool) or not isinstance(score, (int, float)):
                raise SchemaViolation(f"{where}: score must be a number")
            score = float(score)
            if not np.isfinite(score):
                raise SchemaViolation(f"{where}: score must be finite")
            if score < 0.0 or score > 1.0:
                clamped += 1
                score = min(max(score, 0.0), 1.0)
            box = _parse_bbox(_require(entry, "bbox", where), where, summary)
            image_ids.append(iid)
            category_ids.append(cid)
            boxes.extend(box)
            scores.append(score)
            for key in entry:
                if key not in _DETECTION_FIELDS:
                    summary.note_unknown(f"detection.{key}")

    n = len(scores)
    if clamped:
        warnings.warn(
            f"{path}: clamped {clamped} detection scores into [0, 1]", stacklevel=2
        )
    return DetectionSet(
        det_ids=np.arange(n, dtype=np.int64),
        image_ids=np.frombuffer(image_ids, dtype=np.int64).copy(),
        category_ids=np.frombuffer(category_ids, dtype=np.int64).copy(),
        boxes=np.frombuffer(boxes, dtype=np.float64).reshape(n, 4).copy(),
        scores=np.frombuffer(scores, dtype=np.float64).copy(),
        clamped_scores=clamped,
        load_summary=summary,
    )


def save_detections(dets: DetectionSet, path) -> None:
    """Write detections as a results array, preserving row order."""
    try:
        with open(path, "w", encoding="utf-8") as fp:
            fp.write("[")
            for i in range(len(dets)):
                if i:
                    fp.write(",")
                entry = {
                    "image_id": int(dets.image_ids[i]),
                    "category_id": int(dets.category_ids[i]),
                    "bbox": [float(v) for v in dets.boxes[i]],
                    "score": float(dets.scores[i]),
                }
                fp.write(json.dumps(entry))
            fp.write("]")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# --- report output -----------------------------------------------------------


def _fmt_points(value: float | None) -> str:
    """AP as points (x100, one decimal), the layout used in result tables."""
    return "-" if value is None else f"{100.0 * value:.1f}"


def _fmt_delta(value: float | None) -> str:
    if value is None:
        return "-"
    return f"{100.0 * value:+.1f}"


def format_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for j, cell in enumerate(row):
            widths[j] = max(widths[j], len(cell))
    lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    for row in rows:
        lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


GROUP_COLUMNS = ["AP", "AP_r", "AP_c", "AP_f"]


def _report_cells(report) -> list[tuple[str, str, float | None]]:
    cells = [
        ("ap", "all", report.mean_ap),
        ("ap", "rare", report.ap_rare),
        ("ap", "common", report.ap_common),
        ("ap", "frequent", report.ap_frequent),
    ]
    if report.pooled is not None:
        cells += [
            ("ap_pool", "all", report.pooled.ap_pool),
            ("ap_pool", "rare", report.pooled.ap_pool_rare),
            ("ap_pool", "common", report.pooled.ap_pool_common),
            ("ap_pool", "frequent", report.pooled.ap_pool_frequent),
        ]
    return cells


def report_to_table(report) -> str:
    rows = [
        ["ap"] + [_fmt_points(v) for _, _, v in _report_cells(report)[:4]],
    ]
    if report.pooled is not None:
        rows.append(["ap_pool"] + [_fmt_points(v) for _, _, v in _report_cells(report)[4:]])
    return format_table(["metric"] + GROUP_COLUMNS, rows)


def report_to_csv_rows(report) -> list[list[str]]:
    rows = [["metric", "group", "value"]]
    for metric, group, value in _report_cells(report):
        rows.append([metric, group, "" if value is None else repr(value)])
    return rows


def sweep_to_table(sweep_result) -> str:
    axis_label = {"dets_per_image": "dets/im", "dets_per_class": "dets/class"}[
        sweep_result.axis
    ]
    rows = []
    for value, report in zip(sweep_result.values, sweep_result.reports):
        rows.append(
            [str(value) if value is not None else "none"]
            + [
                _fmt_points(v)
                for v in (
                    report.mean_ap,
                    report.ap_rare,
                    report.ap_common,
                    report.ap_frequent,
                )
            ]
        )
    return format_table([axis_label] + GROUP_COLUMNS, rows)


def sweep_to_csv_rows(sweep_result) -> list[list[str]]:
    rows = [[sweep_result.axis, "metric", "group", "value"]]
    for value, report in zip(sweep_result.values, sweep_result.reports):
        for metric, group, v in _report_cells(report):
            rows.append(
                [
                    str(value) if value is not None else "none",
                    metric,
                    group,
                    "" if v is None else repr(v),
                ]
            )
    return rows


def game_to_table(game_result) -> str:
    base, gamed = game_result.baseline, game_result.gamed
    k = game_result.dets_per_class
    n = game_result.dets_per_image
    rows = [
        ["none", str(n) if n is not None else "none"]
        + [_fmt_points(v) for v in (base.mean_ap, base.ap_rare, base.ap_common, base.ap_frequent)],
        [str(k), str(n) if n is not None else "none"]
        + [_fmt_points(v) for v in (gamed.mean_ap, gamed.ap_rare, gamed.ap_common, gamed.ap_frequent)],
        ["delta", ""]
        + [
            _fmt_delta(None if a is None or b is None else b - a)
            for a, b in (
                (base.mean_ap, gamed.mean_ap),
                (base.ap_rare, gamed.ap_rare),
                (base.ap_common, gamed.ap_common),
                (base.ap_frequent, gamed.ap_frequent),
            )
        ],
    ]
    return format_table(["dets/class", "dets/im"] + GROUP_COLUMNS, rows)


def _csv_text(rows: list[list[str]]) -> str:
    import io as _io

    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def render_report(report, format: str) -> str:
    """Render an EvalReport (or sweep/game result) in the requested format."""
    kind = type(report).__name__
    if format == "json":
        return json.dumps(report.to_dict(), indent=2) + "\n"
    if format == "csv":
        if kind == "SweepResult":
            return _csv_text(sweep_to_csv_rows(report))
        if kind == "GameResult":
            rows = [["policy", "metric", "group", "value"]]
            for label, rep in (("baseline", report.baseline), ("gamed", report.gamed)):
                for metric, group, v in _report_cells(rep):
                    rows.append([label, metric, group, "" if v is None else repr(v)])
            return _csv_text(rows)
        return _csv_text(report_to_csv_rows(report))
    if format == "table":
        if kind == "SweepResult":
            return sweep_to_table(report)
        if kind == "GameResult":
            return game_to_table(report)
        return report_to_table(report)
    raise ValueError(f"unknown report format: {format}")


def write_report(report, path, format: str = "json") -> None:
    """Write a report to disk; the json form round-trips losslessly."""
    text = render_report(report, format)
    try:
        with open(path, "w", encoding="utf-8") as fp:
            fp.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
