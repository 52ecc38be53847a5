"""Synthetic confounded image classification data.

Objects of a class-keyed shape are pasted over context-keyed textured
backgrounds. Training contexts are long-tailed per class, some contexts are
never seen with a class during training, and every class has its own head
context. The OOD test split draws contexts uniformly.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "iid_test", "ood_test")
_SPLIT_IDS = {name: i for i, name in enumerate(SPLITS)}
ARRAY_KEYS = ("images", "object_labels", "context_labels", "masks")
MANIFEST = "manifest.json"


class DatasetSpecError(ValueError):
    """Invalid dataset specification; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class DatasetSpec:
    num_object_classes: int = 10
    num_contexts: int = 10
    contexts_seen_per_class: int = 7
    decay: float = 0.5
    n_train: int = 8000
    n_val: int = 1000
    n_iid_test: int = 1000
    n_ood_test: int = 2000
    image_size: int = 64
    seed: int = 0
    # fraction of pixels covered by the object
    object_coverage: tuple[float, float] = (0.06, 0.14)
    object_color_jitter: float = 0.12
    context_contrast: float = 1.0
    noise_std: float = 0.04

    def __post_init__(self):
        object.__setattr__(self, "object_coverage", tuple(float(v) for v in self.object_coverage))
        self.validate()

    def validate(self) -> None:
        for name in ("num_object_classes", "num_contexts", "contexts_seen_per_class", "image_size"):
            if int(getattr(self, name)) < 1:
                raise DatasetSpecError(name, "must be a positive integer")
        for name in ("n_train", "n_val", "n_iid_test", "n_ood_test"):
            if int(getattr(self, name)) < 0:
                raise DatasetSpecError(name, "must be non-negative")
        if self.contexts_seen_per_class > self.num_contexts:
            raise DatasetSpecError("contexts_seen_per_class", "cannot exceed num_contexts")
        if not 0.0 < self.decay <= 1.0:
            raise DatasetSpecError("decay", "must lie in (0, 1]")
        lo, hi = self.object_coverage if len(self.object_coverage) == 2 else (None, None)
        if lo is None or not 0.05 <= lo <= hi <= 0.3:
            raise DatasetSpecError("object_coverage", "need 0.05 <= min <= max <= 0.3")
        if self.image_size < 16:
            raise DatasetSpecError("image_size", "must be at least 16")
        for name in ("object_color_jitter", "noise_std"):
            if getattr(self, name) < 0:
                raise DatasetSpecError(name, "must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise DatasetSpecError(unknown[0], "unknown field")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise DatasetSpecError("spec", str(exc)) from None

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["object_coverage"] = list(self.object_coverage)
        return doc

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "iid_test": self.n_iid_test, "ood_test": self.n_ood_test}[split]


def seen_contexts(spec: DatasetSpec, class_index: int) -> np.ndarray:
    """Training contexts of a class, head context first."""
    head = class_index % spec.num_contexts
    return (head + np.arange(spec.contexts_seen_per_class)) % spec.num_contexts


def context_distribution(spec: DatasetSpec, class_index: int, phase: str = "train") -> np.ndarray:
    """Context probabilities for one class.

    ``train`` gives geometric mass ``decay**k`` to the k-th seen context and
    zero to the unseen ones; ``ood_test`` is uniform over all contexts.
    """
    if not 0 <= class_index < spec.num_object_classes:
        raise ValueError(f"class_index {class_index} outside [0, {spec.num_object_classes})")
    if phase == "ood_test":
        return np.full(spec.num_contexts, 1.0 / spec.num_contexts)
    if phase != "train":
        raise ValueError(f"unknown phase {phase!r}")
    probs = np.zeros(spec.num_contexts)
    probs[seen_contexts(spec, class_index)] = spec.decay ** np.arange(spec.contexts_seen_per_class)
    return probs / probs.sum()


def frequent_rare_split(spec: DatasetSpec, num_frequent: int = 3) -> list[tuple[frozenset, frozenset]]:
    """Per class, the top ``num_frequent`` training contexts and the rest."""
    if spec.num_contexts < num_frequent + 1:
        raise ValueError("need more contexts than frequent slots")
    out = []
    for k in range(spec.num_object_classes):
        probs = context_distribution(spec, k, "train")
        # stable sort on -mass keeps ties in context-index order
        order = np.argsort(-probs, kind="stable")
        out.append((frozenset(order[:num_frequent].tolist()), frozenset(order[num_frequent:].tolist())))
    return out


# -- rendering ---------------------------------------------------------------


def _palette(index: int, salt: int) -> np.ndarray:
    """Two fixed RGB colours per index, well separated in hue."""
    rng = np.random.default_rng([salt, index])
    hue = (index * 0.618034 + 0.1 * salt) % 1.0
    out = []
    for shift, val in ((0.0, rng.uniform(0.75, 0.95)), (0.5, rng.uniform(0.2, 0.4))):
        h = (hue + shift) % 1.0
        out.append(_hsv_to_rgb(h, rng.uniform(0.5, 0.9), val))
    return np.array(out)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _texture(family: int, u: np.ndarray, v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency pattern in [0, 1] over unit coordinates."""
    freq = rng.uniform(3.0, 4.5)
    phase = rng.uniform(0, 2 * np.pi)
    ang = rng.uniform(-0.2, 0.2)
    ur = u * np.cos(ang) - v * np.sin(ang)
    vr = u * np.sin(ang) + v * np.cos(ang)
    if family == 0:
        t = np.sin(2 * np.pi * freq * vr + phase)
    elif family == 1:
        t = np.sin(2 * np.pi * freq * ur + phase)
    elif family == 2:
        t = np.sin(2 * np.pi * freq * (ur + vr) / np.sqrt(2) + phase)
    elif family == 3:
        t = np.cos(2 * np.pi * freq * ur + phase) * np.cos(2 * np.pi * freq * vr + phase)
        t = (t > 0.5).astype(float) * 2 - 1
    elif family == 4:
        t = np.sign(np.sin(np.pi * freq * ur + phase) * np.sin(np.pi * freq * vr + phase))
    elif family == 5:
        t = 2 * ((ur + rng.uniform(-0.2, 0.2)) % 1.0) - 1
    elif family == 6:
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        t = 1 - 2.5 * np.hypot(u - cx, v - cy)
    elif family == 7:
        cx, cy = rng.uniform(0.3, 0.7, size=2)
        t = np.sin(2 * np.pi * freq * np.hypot(u - cx, v - cy) + phase)
    elif family == 8:
        t = np.maximum(np.cos(2 * np.pi * freq * ur + phase), np.cos(2 * np.pi * freq * vr + phase))
    else:
        t = np.sin(2 * np.pi * 1.5 * ur + phase) + np.sin(2 * np.pi * 1.7 * vr - phase) + np.sin(2 * np.pi * (ur - vr) + 2 * phase)
        t = t / 3
    return np.clip(0.5 + 0.5 * t, 0.0, 1.0)


def _shape_mask(family: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Inside test for a shape of unit radius at the origin."""
    r = np.hypot(x, y)
    th = np.arctan2(y, x)

    def polygon(n):
        sector = np.mod(th, 2 * np.pi / n) - np.pi / n
        return r * np.cos(sector) < np.cos(np.pi / n)

    if family == 0:
        return r < 0.9
    if family == 1:
        return np.maximum(np.abs(x), np.abs(y)) < 0.75
    if family == 2:
        return polygon(3)
    if family == 3:
        return r < 0.55 + 0.4 * np.cos(5 * th)
    if family == 4:
        return ((np.abs(x) < 0.3) & (np.abs(y) < 0.95)) | ((np.abs(y) < 0.3) & (np.abs(x) < 0.95))
    if family == 5:
        return (r > 0.5) & (r < 0.95)
    if family == 6:
        return np.abs(x) / 0.55 + np.abs(y) < 1.0
    if family == 7:
        return (x / 1.0) ** 2 + (y / 0.45) ** 2 < 1.0
    if family == 8:
        return (r < 0.95) & (np.hypot(x - 0.5, y) > 0.65)
    return r < 0.6 + 0.35 * np.sign(np.cos(4 * th))


@lru_cache(maxsize=None)
def _unit_area(family: int) -> float:
    g = np.linspace(-1.0, 1.0, 801)
    x, y = np.meshgrid(g, g)
    return float(_shape_mask(family, x, y).mean() * 4.0)


def render_sample(spec: DatasetSpec, object_label: int, context_label: int, rng: np.random.Generator):
    """Render one image and its foreground mask."""
    n = spec.image_size
    grid = (np.arange(n) + 0.5) / n
    u, v = np.meshgrid(grid, grid)
    bg_colors = _palette(context_label, salt=1)
    tex = _texture(context_label % 10, u, v, rng)
    lo, hi = 0.5 - 0.5 * spec.context_contrast, 0.5 + 0.5 * spec.context_contrast
    tex = lo + (hi - lo) * tex
    image = tex[..., None] * bg_colors[0] + (1 - tex[..., None]) * bg_colors[1]

    family = object_label % 10
    radius = np.sqrt(rng.uniform(*spec.object_coverage) / _unit_area(family))
    cx, cy = rng.uniform(radius, 1 - radius, size=2)
    angle = rng.uniform(0, 2 * np.pi)
    dx, dy = (u - cx) / radius, (v - cy) / radius
    lx = dx * np.cos(angle) + dy * np.sin(angle)
    ly = -dx * np.sin(angle) + dy * np.cos(angle)
    mask = _shape_mask(family, lx, ly)

    obj_colors = _palette(object_label, salt=2)
    shade = np.clip(0.5 + 0.5 * lx, 0.0, 1.0)[..., None]
    jitter = rng.normal(0.0, spec.object_color_jitter, size=3)
    obj = np.clip(shade * obj_colors[0] + (1 - shade) * obj_colors[1] + jitter, 0.0, 1.0)
    image = np.where(mask[..., None], obj, image)
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return image, mask.astype(np.uint8)


# -- datasets ---------------------------------------------------------------


@dataclass
class ConfoundedSplit:
    images: np.ndarray
    object_labels: np.ndarray
    context_labels: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return len(self.object_labels)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ARRAY_KEYS}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for key in ARRAY_KEYS:
            arr = np.ascontiguousarray(getattr(self, key))
            h.update(f"{key}:{arr.dtype.str}:{arr.shape}".encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def subset(self, index) -> "ConfoundedSplit":
        return ConfoundedSplit(*(getattr(self, k)[index] for k in ARRAY_KEYS))


@dataclass
class ConfoundedDataset:
    spec: DatasetSpec
    splits: dict[str, ConfoundedSplit] = field(default_factory=dict)

    def __getitem__(self, name: str) -> ConfoundedSplit:
        return self.splits[name]

    @property
    def train(self) -> ConfoundedSplit:
        return self.splits["train"]

    def checksum(self) -> str:
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for name in SPLITS:
            if name in self.splits:
                h.update(self.splits[name].checksum().encode())
        return h.hexdigest()


def _split_labels(spec: DatasetSpec, split: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = spec.split_size(split)
    k = spec.num_object_classes
    # balanced classes, multinomial contexts
    objects = np.sort(np.arange(n) % k)
    objects = objects[rng.permutation(n)]
    phase = "ood_test" if split == "ood_test" else "train"
    table = np.stack([context_distribution(spec, c, phase) for c in range(k)])
    u = rng.random(n)
    cdf = np.cumsum(table[objects], axis=1)
    contexts = np.minimum((u[:, None] > cdf).sum(axis=1), spec.num_contexts - 1)
    return objects.astype(np.int64), contexts.astype(np.int64)


def generate_split(spec: DatasetSpec, split: str) -> ConfoundedSplit:
    label_rng = np.random.default_rng([spec.seed, _SPLIT_IDS[split], 0])
    objects, contexts = _split_labels(spec, split, label_rng)
    n, s = len(objects), spec.image_size
    images = np.empty((n, s, s, 3), dtype=np.uint8)
    masks = np.empty((n, s, s), dtype=np.uint8)
    for i in range(n):
        # per-sample seeds keep every image independent of generation order
        rng = np.random.default_rng([spec.seed, _SPLIT_IDS[split], 1, i])
        images[i], masks[i] = render_sample(spec, int(objects[i]), int(contexts[i]), rng)
    return ConfoundedSplit(images, objects, contexts, masks)


def generate_dataset(spec: DatasetSpec, workers: int = 1) -> ConfoundedDataset:
    """Render all splits; ``workers > 1`` renders splits in separate processes.

    Samples are seeded individually, so the result does not depend on ``workers``.
    """
    spec.validate()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(SPLITS))) as pool:
            parts = list(pool.map(generate_split, [spec] * len(SPLITS), SPLITS))
        return ConfoundedDataset(spec, dict(zip(SPLITS, parts)))
    return ConfoundedDataset(spec, {name: generate_split(spec, name) for name in SPLITS})


def save_dataset(dataset: ConfoundedDataset, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checksums, counts = {}, {}
    for name, split in dataset.splits.items():
        np.savez(out / f"{name}.npz", **split.arrays())
        checksums[name] = split.checksum()
        counts[name] = len(split)
    manifest = {
        "format": "caam-dataset/1",
        "spec": dataset.spec.to_dict(),
        "counts": counts,
        "checksums": checksums,
        "dataset_checksum": dataset.checksum(),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


class DatasetFormatError(ValueError):
    pass


def load_dataset(path: str | Path, verify: bool = True) -> ConfoundedDataset:
    root = Path(path)
    manifest_path = root / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    spec = DatasetSpec.from_dict(manifest["spec"])
    splits = {}
    for name in manifest["counts"]:
        with np.load(root / f"{name}.npz") as z:
            split = ConfoundedSplit(*(z[k] for k in ARRAY_KEYS))
        if verify and split.checksum() != manifest["checksums"][name]:
            raise DatasetFormatError(f"checksum mismatch for split {name!r}")
        splits[name] = split
    return ConfoundedDataset(spec, splits)
