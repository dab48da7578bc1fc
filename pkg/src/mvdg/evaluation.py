"""Classification metrics, the point-utilization profiler, and evaluation.

Evaluation runs one sample at a time in eval mode (running-stat
normalization, no gradients), so results are independent of dataset
order and of how samples would have been batched.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .dataio import LoadedDataset
from .errors import BadClassIdError, EmptyMatrixError, LengthMismatchError
from .geometry import normalize
from .model import MultiViewClassifier
from .nn import Tensor
from .projection import ViewSet, project, view_basis


@dataclass(frozen=True)
class MetricsResult:
    """Overall accuracy, average class accuracy, and the confusion counts.

    confusion[i, j] counts samples of true class i predicted as j.
    Average class accuracy is the mean per-class recall over classes
    that actually occur in the truth labels.
    """

    overall_acc: float
    avg_class_acc: float
    confusion: np.ndarray


def metrics(predictions, truths, num_classes: int) -> MetricsResult:
    p = np.asarray(predictions)
    t = np.asarray(truths)
    if p.ndim != 1 or t.ndim != 1 or p.shape != t.shape:
        raise LengthMismatchError(
            f"predictions {p.shape} and truths {t.shape} must be equal-length vectors"
        )
    if p.size == 0:
        raise LengthMismatchError("metrics need at least one sample")
    for name, arr in (("prediction", p), ("truth", t)):
        if arr.min() < 0 or arr.max() >= num_classes:
            bad = arr[(arr < 0) | (arr >= num_classes)][0]
            raise BadClassIdError(f"{name} id {bad} outside [0, {num_classes})")

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (t, p), 1)
    overall = float(np.trace(confusion)) / float(confusion.sum())
    row_totals = confusion.sum(axis=1)
    present = row_totals > 0
    recalls = np.diag(confusion)[present] / row_totals[present]
    return MetricsResult(
        overall_acc=overall,
        avg_class_acc=float(recalls.mean()),
        confusion=confusion,
    )


@dataclass(frozen=True)
class UtilizationReport:
    """How many input rows survive a per-column max over a feature matrix."""

    used_count: int
    total_count: int
    used_indices: tuple[int, ...]

    def to_json_dict(self) -> dict:
        return {
            "used_count": self.used_count,
            "total_count": self.total_count,
            "used_indices": list(self.used_indices),
        }


def utilization(point_features) -> UtilizationReport:
    """Rows selected by column-wise argmax; ties go to the lowest row."""
    f = np.asarray(point_features)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise EmptyMatrixError(
            f"utilization needs a nonempty 2-d matrix, got shape {f.shape}"
        )
    winners = np.argmax(f, axis=0)
    used = tuple(sorted(set(int(r) for r in winners)))
    return UtilizationReport(
        used_count=len(used), total_count=f.shape[0], used_indices=used
    )


@dataclass
class EvalResult:
    metrics: MetricsResult
    records: list


def evaluate(
    model: MultiViewClassifier,
    dataset: LoadedDataset,
    views: ViewSet | str = "orthogonal6",
) -> EvalResult:
    """Predict every sample (normalize, project, forward; nothing random).

    Returns metrics plus one record per sample: id, truth, fused
    prediction, and each branch's own argmax.
    """
    if isinstance(views, str):
        views = view_basis(views)
    model.eval()
    resolution = model.config.backbone.resolution
    records = []
    predictions = np.empty(len(dataset), dtype=np.int64)
    for i, (cloud, label, sample_id) in enumerate(
        zip(dataset.clouds, dataset.labels, dataset.ids)
    ):
        stack = project(normalize(cloud), views, resolution)
        images = Tensor(stack.images[None])
        with nn.no_grad():
            avg_logits, strip_logits = model(images)
        avg_probs = nn.softmax(avg_logits.data[0])
        strip_probs = nn.softmax(strip_logits.data[0])
        fused = avg_probs + strip_probs
        pred = int(np.argmax(fused))
        predictions[i] = pred
        records.append(
            {
                "id": sample_id,
                "truth": int(label),
                "prediction": pred,
                "avg_branch": int(np.argmax(avg_probs)),
                "strip_branch": int(np.argmax(strip_probs)),
            }
        )
    met = metrics(predictions, dataset.labels, len(dataset.classes))
    return EvalResult(metrics=met, records=records)


def write_confusion_csv(path, confusion: np.ndarray, classes) -> None:
    """Header row of class names, then one comma-separated row per true class."""
    lines = [",".join(classes)]
    for row in confusion:
        lines.append(",".join(str(int(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
