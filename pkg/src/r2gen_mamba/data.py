"""JSON-lines dataset records.

Each line is an object with ``id``, ``report``, ``split`` (train/val/test),
exactly one of ``feature_path`` / ``image_path`` (a string, or a list of
strings for multi-image studies) and an optional 14-element ``labels`` list.
Relative paths resolve against the dataset file's directory.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .features import load_features, patch_means
from .io import read_jsonl
from .metrics import NUM_LABELS

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    report: str
    split: str
    feature_path: tuple[str, ...] | None = None
    image_path: tuple[str, ...] | None = None
    labels: tuple[int, ...] | None = None

    def load_raw(self, patch: int = 16) -> list[np.ndarray]:
        if self.feature_path is not None:
            return [load_features(p).values.data for p in self.feature_path]
        return [patch_means(np.load(p), patch).astype(np.float32) for p in self.image_path]


def _paths(value, base: Path, where: str) -> tuple[str, ...]:
    items = value if isinstance(value, list) else [value]
    if not items or not all(isinstance(v, str) and v for v in items):
        raise SchemaError(f"{where}: paths must be non-empty strings")
    return tuple(str(base / v) for v in items)


def parse_record(row: dict, base: Path, where: str) -> DatasetRecord:
    if not isinstance(row.get("id"), (str, int)):
        raise SchemaError(f"{where}: missing id")
    split = row.get("split")
    if split not in SPLITS:
        raise SchemaError(f"{where}: split must be one of {SPLITS}, got {split!r}")
    report = row.get("report", "")
    if not isinstance(report, str):
        raise SchemaError(f"{where}: report must be a string")
    if split != "test" and not report.strip():
        raise SchemaError(f"{where}: empty report in {split} split")
    has_feat, has_img = "feature_path" in row, "image_path" in row
    if has_feat == has_img:
        raise SchemaError(f"{where}: exactly one of feature_path / image_path is required")
    labels = row.get("labels")
    if labels is not None:
        if not (isinstance(labels, list) and len(labels) == NUM_LABELS
                and all(v in (0, 1) for v in labels)):
            raise SchemaError(f"{where}: labels must be {NUM_LABELS} binary values")
        labels = tuple(int(v) for v in labels)
    return DatasetRecord(
        id=str(row["id"]),
        report=report,
        split=split,
        feature_path=_paths(row["feature_path"], base, where) if has_feat else None,
        image_path=_paths(row["image_path"], base, where) if has_img else None,
        labels=labels,
    )


def load_dataset(path) -> list[DatasetRecord]:
    """Parse and validate every line; any error aborts the whole load."""
    path = Path(path)
    base = path.parent
    return [parse_record(row, base, f"{path}:{lineno}")
            for lineno, row in read_jsonl(path, with_lineno=True)]


def split(records: list[DatasetRecord], name: str) -> list[DatasetRecord]:
    return [r for r in records if r.split == name]
