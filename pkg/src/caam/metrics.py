"""Accuracy breakdowns, attention localization and heatmap export."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import ConfoundedSplit, DatasetSpec, frequent_rare_split


class UndefinedMetricError(ValueError):
    pass


def accuracy(predictions, labels) -> float:
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape:
        raise ValueError(f"predictions {pred.shape} and labels {lab.shape} differ")
    if pred.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float((pred == lab).mean())


@dataclass
class GroupedAccuracy:
    per_group: dict[int, float]
    counts: dict[int, int]
    mean: float
    num_empty: int = 0


def grouped_accuracy(predictions, labels, group_labels, groups=None) -> GroupedAccuracy:
    """Per-group accuracy and their unweighted mean.

    ``groups`` lists the groups to report; any of them with no samples is left
    out of the mean and counted in ``num_empty``.
    """
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    grp = np.asarray(group_labels)
    if not (pred.shape == lab.shape == grp.shape):
        raise ValueError("predictions, labels and group labels must have equal length")
    wanted = sorted(set(grp.tolist())) if groups is None else sorted(groups)
    per, counts, empty = {}, {}, 0
    for g in wanted:
        sel = grp == g
        counts[int(g)] = int(sel.sum())
        if not sel.any():
            empty += 1
            continue
        per[int(g)] = float((pred[sel] == lab[sel]).mean())
    mean = float(np.mean(list(per.values()))) if per else float("nan")
    return GroupedAccuracy(per, counts, mean, empty)


# -- attention -------------------------------------------------------------

def resize_map(attention_map, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2-D map (half-pixel centres, no corner alignment)."""
    arr = np.asarray(attention_map, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"attention map must be 2-D, got shape {arr.shape}")
    if arr.shape == tuple(shape):
        return arr
    t = torch.from_numpy(arr.copy())[None, None]
    return F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)[0, 0].numpy()


def box_from_mask(mask) -> np.ndarray:
    """Tight bounding rectangle of the positive pixels, as a mask."""
    m = np.asarray(mask).astype(bool)
    box = np.zeros_like(m)
    if not m.any():
        return box
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    box[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = True
    return box


def attention_accuracy(attention_map, mask, box: bool = False) -> float:
    """Share of attention mass on the object (or its bounding box)."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    a = resize_map(attention_map, m.shape)
    if (a < 0).any():
        raise ValueError("attention map has negative entries")
    total = a.sum()
    if not total > 0:
        raise UndefinedMetricError("attention map has zero total mass")
    region = box_from_mask(m) if box else m
    return float(a[region].sum() / total)


def attention_accuracies(attention_maps, masks, box: bool = True) -> np.ndarray:
    return np.array([attention_accuracy(a, m, box=box) for a, m in zip(attention_maps, masks)])


# -- heatmaps --------------------------------------------------------------

def normalize_map(attention_map) -> np.ndarray:
    """Min-max scaling to [0, 1]; a constant map becomes all zeros."""
    a = np.asarray(attention_map, dtype=np.float64)
    lo, hi = a.min(), a.max()
    # resizing leaves rounding noise on constant maps
    if not hi - lo > 1e-9 * max(1.0, abs(hi), abs(lo)):
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def _heat_colors(norm: np.ndarray) -> np.ndarray:
    # black -> red -> yellow; R + G encodes the value linearly
    r = np.clip(2.0 * norm, 0.0, 1.0)
    g = np.clip(2.0 * norm - 1.0, 0.0, 1.0)
    return np.stack([r, g, np.zeros_like(norm)], axis=-1) * 255.0


def render_heatmap(attention_map, image, blend: float = 0.5) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be H x W x 3, got {img.shape}")
    norm = normalize_map(resize_map(attention_map, img.shape[:2]))
    out = (1.0 - blend) * img.astype(np.float64) + blend * _heat_colors(norm)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def export_heatmap(attention_map, image, path, blend: float = 0.5) -> Path:
    path = Path(path)
    Image.fromarray(render_heatmap(attention_map, image, blend)).save(path, format="PNG")
    return path


def read_heatmap(path, image, blend: float = 0.5) -> np.ndarray:
    """Recover the normalized map from an exported heatmap and its source image."""
    out = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    img = np.asarray(image, dtype=np.float64)
    heat = (out - (1.0 - blend) * img) / blend
    return np.clip((heat[..., 0] + heat[..., 1]) / 510.0, 0.0, 1.0)


# -- reports ---------------------------------------------------------------

@dataclass
class EvalReport:
    split: str
    num_samples: int
    accuracy: float
    per_class: dict[int, float]
    per_context: dict[int, float]
    frequent_accuracy: float | None
    rare_accuracy: float | None
    attention_accuracy: float | None
    counts: list[list[int]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        values = [self.accuracy, *self.per_class.values(), *self.per_context.values()]
        values += [v for v in (self.frequent_accuracy, self.rare_accuracy, self.attention_accuracy) if v is not None]
        for v in values:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {v} outside [0, 1]")
        if self.counts and int(np.sum(self.counts)) != self.num_samples:
            raise ValueError("cell counts do not sum to the split size")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["per_class"] = {str(k): v for k, v in self.per_class.items()}
        doc["per_context"] = {str(k): v for k, v in self.per_context.items()}
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        doc = dict(doc)
        doc["per_class"] = {int(k): v for k, v in doc["per_class"].items()}
        doc["per_context"] = {int(k): v for k, v in doc["per_context"].items()}
        return cls(**doc)

    def summary_row(self, model: str = "") -> dict:
        return {
            "model": model,
            "split": self.split,
            "n": self.num_samples,
            "accuracy": self.accuracy,
            "frequent_accuracy": self.frequent_accuracy,
            "rare_accuracy": self.rare_accuracy,
            "attention_accuracy": self.attention_accuracy,
        }


SUMMARY_FIELDS = ["model", "split", "n", "accuracy", "frequent_accuracy", "rare_accuracy", "attention_accuracy"]


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in SUMMARY_FIELDS})
    return buf.getvalue()


def frequent_mask(spec: DatasetSpec, object_labels, context_labels) -> np.ndarray:
    """True where a sample's context is one of its class's frequent contexts."""
    fr = frequent_rare_split(spec)
    obj = np.asarray(object_labels)
    ctx = np.asarray(context_labels)
    return np.array([int(c) in fr[int(o)][0] for o, c in zip(obj, ctx)], dtype=bool)


@dataclass
class ModelOutputs:
    predictions: np.ndarray
    attention: np.ndarray | None


@torch.no_grad()
def collect_outputs(model, images: np.ndarray, head: str = "g", batch_size: int = 250) -> ModelOutputs:
    from .trainer import images_to_tensor

    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    preds, maps = [], []
    try:
        for i in range(0, len(images), batch_size):
            out = model(images_to_tensor(images[i : i + batch_size], dtype))
            preds.append(getattr(out, f"logits_{head}").argmax(dim=1).numpy())
            if out.attention is not None:
                maps.append(out.attention.double().numpy())
    finally:
        model.train(was_training)
    attention = np.concatenate(maps) if maps else None
    return ModelOutputs(np.concatenate(preds) if preds else np.zeros(0, np.int64), attention)


def evaluate_split(
    model, split: ConfoundedSplit, spec: DatasetSpec, name: str, head: str = "g", box: bool = True
) -> EvalReport:
    outputs = collect_outputs(model, split.images, head)
    return report_from_outputs(outputs, split, spec, name, box=box)


def report_from_outputs(
    outputs: ModelOutputs, split: ConfoundedSplit, spec: DatasetSpec, name: str, box: bool = True
) -> EvalReport:
    pred = outputs.predictions
    obj, ctx = split.object_labels, split.context_labels
    by_class = grouped_accuracy(pred, obj, obj, range(spec.num_object_classes))
    by_ctx = grouped_accuracy(pred, obj, ctx, range(spec.num_contexts))
    freq = frequent_mask(spec, obj, ctx)
    freq_acc = accuracy(pred[freq], obj[freq]) if freq.any() else None
    rare_acc = accuracy(pred[~freq], obj[~freq]) if (~freq).any() else None
    att = None
    if outputs.attention is not None and len(pred):
        att = float(attention_accuracies(outputs.attention, split.masks, box=box).mean())
    counts = np.zeros((spec.num_object_classes, spec.num_contexts), dtype=np.int64)
    np.add.at(counts, (obj, ctx), 1)
    report = EvalReport(
        split=name,
        num_samples=int(len(pred)),
        accuracy=accuracy(pred, obj),
        per_class=by_class.per_group,
        per_context=by_ctx.per_group,
        frequent_accuracy=freq_acc,
        rare_accuracy=rare_acc,
        attention_accuracy=att,
        counts=counts.tolist(),
    )
    report.validate()
    return report
