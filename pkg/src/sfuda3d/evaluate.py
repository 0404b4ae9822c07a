"""Dice scores and per-class report tables."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sfuda3d.data.crops import as_stride
from sfuda3d.data.volume import CLASS_NAMES, LabelMap, ManifestEntry, load_pairs
from sfuda3d.exceptions import DataError, DimensionError
from sfuda3d.model import SegModel, sliding_window_predict

COLUMNS = CLASS_NAMES + ("Avg",)


def dice(pred, truth, c: int) -> float:
    """``2|A n B| / (|A| + |B|)`` for class ``c``; 1.0 when both sets are empty."""
    pred = pred.values if isinstance(pred, LabelMap) else np.asarray(pred)
    truth = truth.values if isinstance(truth, LabelMap) else np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    a, b = pred == c, truth == c
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def class_dice(pred, truth, classes=range(1, len(CLASS_NAMES) + 1)) -> list[float]:
    return [dice(pred, truth, c) for c in classes]


@dataclass
class DiceReport:
    per_volume: dict[str, list[float]]
    stride: tuple[int, int, int] = (8, 8, 8)
    classes: tuple[str, ...] = CLASS_NAMES
    per_class: list[float] = field(init=False)

    def __post_init__(self):
        if not self.per_volume:
            raise DataError("a Dice report needs at least one volume")
        self.per_class = [float(v) for v in np.mean(list(self.per_volume.values()), axis=0)]

    @property
    def average(self) -> float:
        return float(np.mean(self.per_class))

    def rows(self) -> list[tuple[str, list[float]]]:
        out = [(vid, list(d) + [float(np.mean(d))]) for vid, d in self.per_volume.items()]
        out.append(("mean", self.per_class + [self.average]))
        return out

    def to_json(self) -> dict:
        return {
            "stride": list(self.stride),
            "columns": list(self.classes) + ["Avg"],
            "volumes": {vid: dict(zip(COLUMNS, vals)) for vid, vals in self.rows()[:-1]},
            "mean": dict(zip(COLUMNS, self.rows()[-1][1])),
        }

    def write(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` and ``<stem>.json``; floats are written with ``repr`` so both agree exactly."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("volume",) + COLUMNS)
            for vid, vals in self.rows():
                writer.writerow([vid] + [repr(float(v)) for v in vals])
        json_path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return csv_path, json_path


def evaluate(model: SegModel, data, patch: int = 32, stride=(8, 8, 8), ids: list[str] | None = None) -> DiceReport:
    """Sliding-window predictions scored per volume, then averaged over volumes."""
    stride = as_stride(stride)
    data = list(data)
    if not data:
        raise DataError("nothing to evaluate")
    if ids is None:
        ids = [e.id if isinstance(e, ManifestEntry) else f"vol{i:03d}" for i, e in enumerate(data)]
    if isinstance(data[0], ManifestEntry):
        data = load_pairs(data)
    per_volume = {}
    for vid, (image, labels) in zip(ids, data):
        per_volume[vid] = class_dice(sliding_window_predict(model, image, patch, stride), labels)
    return DiceReport(per_volume, stride)
