"""Datasets: synthetic two-task generation, CSV manifest ingestion, batching.

Synthetic images are class templates plus Gaussian noise. Fatigue classes
differ by eye/mouth-region intensity motifs; each face identity carries a
binary cell-grid signature, so any two identity templates differ by a
known amplitude. The template margin (minimum over distinct same-task
template pairs of the max absolute pixel difference) calibrates the noise
level: sigma below margin/2 keeps a nearest-template classifier nearly
perfect.
"""

import csv
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    ConfigError,
    LabelDensityError,
    ManifestError,
    MissingImageError,
    UnknownTaskError,
)

TASKS = ("fatigue", "face")

FATIGUE_AMPLITUDE = 0.4
FACE_AMPLITUDE = 0.2
_GRID = 4  # face signature cells per side


class Batch(NamedTuple):
    images: np.ndarray  # (B, H, W, C)
    labels: np.ndarray  # (B,)


@dataclass
class ArrayDataset:
    """In-memory dataset: (N, H, W, C) images and integer labels."""

    images: np.ndarray
    labels: np.ndarray
    task: str
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.images.shape[0]


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale synthetic data description.

    ``noise_sigma=None`` selects margin/4, where margin is the smaller of
    the two tasks' template margins.
    """

    image_size: tuple = (112, 112, 1)
    fatigue_classes: int = 2
    fatigue_per_class: int = 500
    fatigue_test_per_class: int = 100
    identities: int = 10
    images_per_identity: int = 100
    test_per_identity: int = 20
    noise_sigma: float = None
    seed: int = 0

    def validate(self):
        h, w, c = self.image_size
        if h < 8 or w < 8 or c < 1:
            raise ConfigError(f"image_size too small: {self.image_size}")
        if self.fatigue_classes != 2:
            raise ConfigError("fatigue task is binary; fatigue_classes must be 2")
        if not 1 <= self.identities <= 2 ** (_GRID * _GRID):
            raise ConfigError(f"identities must lie in [1, {2 ** (_GRID * _GRID)}]")
        if min(self.fatigue_per_class, self.images_per_identity) < 1:
            raise ConfigError("per-class sample counts must be >= 1")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def to_dict(self):
        return {
            "image_size": list(self.image_size),
            "fatigue_classes": self.fatigue_classes,
            "fatigue_per_class": self.fatigue_per_class,
            "fatigue_test_per_class": self.fatigue_test_per_class,
            "identities": self.identities,
            "images_per_identity": self.images_per_identity,
            "test_per_identity": self.test_per_identity,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        spec = cls(**d)
        spec.validate()
        return spec


def _base_face(h, w, c):
    rows = np.linspace(0.4, 0.5, h, dtype=np.float64)[:, None, None]
    return np.broadcast_to(rows, (h, w, c)).copy()


def _region(h, w, r0, r1, c0, c1):
    return slice(int(r0 * h), int(r1 * h)), slice(int(c0 * w), int(c1 * w))


def fatigue_templates(image_size):
    """Two templates: alert = bright open eyes, drowsy = bright open mouth."""
    h, w, c = image_size
    alert = _base_face(h, w, c)
    drowsy = _base_face(h, w, c)
    left_rows, left_cols = _region(h, w, 0.30, 0.42, 0.22, 0.40)
    _, right_cols = _region(h, w, 0.30, 0.42, 0.60, 0.78)
    mouth_rows, mouth_cols = _region(h, w, 0.62, 0.75, 0.38, 0.62)
    alert[left_rows, left_cols] += FATIGUE_AMPLITUDE
    alert[left_rows, right_cols] += FATIGUE_AMPLITUDE
    drowsy[mouth_rows, mouth_cols] += FATIGUE_AMPLITUDE
    return np.stack([alert, drowsy])


def face_templates(image_size, identities):
    """One template per identity: base face + signed binary cell grid.

    Identity ``i``'s central region is tiled into a 4x4 grid whose cells
    take +/- FACE_AMPLITUDE from the bits of ``i``, so distinct identities
    differ by 2 * FACE_AMPLITUDE in at least one cell.
    """
    h, w, c = image_size
    rows = np.linspace(int(0.2 * h), int(0.8 * h), _GRID + 1, dtype=int)
    cols = np.linspace(int(0.2 * w), int(0.8 * w), _GRID + 1, dtype=int)
    templates = np.empty((identities, h, w, c), dtype=np.float64)
    for i in range(identities):
        t = _base_face(h, w, c)
        for cell in range(_GRID * _GRID):
            sign = 1.0 if (i >> cell) & 1 else -1.0
            r, q = divmod(cell, _GRID)
            t[rows[r] : rows[r + 1], cols[q] : cols[q + 1]] += sign * FACE_AMPLITUDE
        templates[i] = t
    return templates


def template_margin(templates):
    """Minimum over distinct template pairs of the max absolute pixel gap."""
    n = templates.shape[0]
    if n < 2:
        return float("inf")
    margin = float("inf")
    for i in range(n):
        for j in range(i + 1, n):
            margin = min(margin, float(np.abs(templates[i] - templates[j]).max()))
    return margin


def _normalization_constants(fatigue_t, face_t, spec, sigma):
    """Analytic pixel mean/std of the train population (noise adds sigma^2)."""
    counts = np.concatenate(
        [
            np.full(fatigue_t.shape[0], spec.fatigue_per_class, dtype=np.float64),
            np.full(face_t.shape[0], spec.images_per_identity, dtype=np.float64),
        ]
    )
    templates = np.concatenate([fatigue_t, face_t])
    means = templates.reshape(templates.shape[0], -1).mean(axis=1)
    mean = float(np.average(means, weights=counts))
    sq = ((templates - mean) ** 2).reshape(templates.shape[0], -1).mean(axis=1)
    var = float(np.average(sq, weights=counts)) + sigma**2
    return mean, float(np.sqrt(var))


def generate_synthetic(spec, split="train", normalize=True):
    """Build the (fatigue, face) dataset pair for one split.

    Deterministic: identical (spec, split) arguments yield byte-identical
    arrays. Normalization constants are analytic (template statistics plus
    noise variance), so train and test share them exactly.

    Returns:
        (fatigue ArrayDataset, face ArrayDataset); each ``meta`` records
        the template margin, sigma, normalization constants, and the raw
        (unnormalized) templates.
    """
    spec.validate()
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}")
    split_idx = 0 if split == "train" else 1

    fatigue_t = fatigue_templates(spec.image_size)
    face_t = face_templates(spec.image_size, spec.identities)
    margins = {
        "fatigue": template_margin(fatigue_t),
        "face": template_margin(face_t),
    }
    overall = min(margins.values())
    sigma = spec.noise_sigma if spec.noise_sigma is not None else overall / 4.0

    mean, std = _normalization_constants(fatigue_t, face_t, spec, sigma)

    def build(task_idx, task, templates, per_class):
        n_classes = templates.shape[0]
        labels = np.repeat(np.arange(n_classes), per_class)
        images = templates[labels]
        if sigma > 0:
            rng = np.random.default_rng([spec.seed, split_idx, task_idx])
            images = images + rng.normal(0.0, sigma, size=images.shape)
        if normalize:
            images = (images - mean) / std
        return ArrayDataset(
            images=images.astype(np.float32),
            labels=labels.astype(np.int64),
            task=task,
            num_classes=n_classes,
            meta={
                "split": split,
                "margin": margins[task],
                "noise_sigma": sigma,
                "norm_mean": mean,
                "norm_std": std,
                "normalized": normalize,
                "templates": templates,
            },
        )

    per_fatigue = spec.fatigue_per_class if split == "train" else spec.fatigue_test_per_class
    per_face = spec.images_per_identity if split == "train" else spec.test_per_identity
    return (
        build(0, "fatigue", fatigue_t, per_fatigue),
        build(1, "face", face_t, per_face),
    )


# ---------------------------------------------------------------------------
# Manifest ingestion
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["path", "task", "label"]


class ManifestDataset:
    """Rows of (image path, task, label) with lazy, cached image decoding.

    Images decode to ``image_size`` at ``channels`` (1 = grayscale, 3 =
    RGB), scale to [0, 1], then normalize with the given constants.
    """

    def __init__(self, rows, root, image_size=(112, 112), channels=1, mean=0.0, std=1.0):
        self.rows = rows
        self.root = Path(root)
        self.image_size = tuple(image_size)
        self.channels = channels
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self._cache = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.rows)

    def task_counts(self):
        counts = {task: 0 for task in TASKS}
        for _, task, _ in self.rows:
            counts[task] += 1
        return counts

    def _decode(self, rel_path):
        from PIL import Image

        mode = "L" if self.channels == 1 else "RGB"
        with Image.open(self.root / rel_path) as img:
            img = img.convert(mode).resize((self.image_size[1], self.image_size[0]))
            arr = np.asarray(img, dtype=np.float64) / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return (arr - self.mean) / self.std

    def subset(self, task):
        """Decode (once, race-free) and return one task's ArrayDataset."""
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        with self._lock:
            if task not in self._cache:
                picked = [(p, label) for p, t, label in self.rows if t == task]
                images = np.stack([self._decode(p) for p, _ in picked]).astype(np.float32)
                labels = np.array([label for _, label in picked], dtype=np.int64)
                n_classes = 2 if task == "fatigue" else int(labels.max()) + 1
                self._cache[task] = ArrayDataset(
                    images=images,
                    labels=labels,
                    task=task,
                    num_classes=n_classes,
                    meta={"source": "manifest"},
                )
            return self._cache[task]


def load_manifest(path, image_size=(112, 112), channels=1, mean=0.0, std=1.0):
    """Read and validate a ``path,task,label`` CSV manifest.

    Raises distinct error types, each naming the offending row number:
    MissingImageError, UnknownTaskError, LabelDensityError (non-binary
    fatigue labels or non-dense face identity ids), ManifestError
    (malformed rows), ConfigError (missing/empty manifest).
    """
    manifest = Path(path)
    if not manifest.exists():
        raise ConfigError(f"manifest not found: {manifest}")
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{manifest}: no rows") from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(
                f"{manifest}: header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}"
            )
        rows = []
        face_ids = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{manifest}: row {lineno}: expected 3 columns, got {len(row)}")
            rel_path, task, raw_label = (cell.strip() for cell in row)
            if task not in TASKS:
                raise UnknownTaskError(f"{manifest}: row {lineno}: unknown task {task!r}")
            try:
                label = int(raw_label)
            except ValueError:
                raise ManifestError(
                    f"{manifest}: row {lineno}: label {raw_label!r} is not an integer"
                ) from None
            if not (manifest.parent / rel_path).exists():
                raise MissingImageError(f"{manifest}: row {lineno}: no such image {rel_path!r}")
            if task == "fatigue" and label not in (0, 1):
                raise LabelDensityError(
                    f"{manifest}: row {lineno}: fatigue label must be 0 or 1, got {label}"
                )
            if task == "face":
                if label < 0:
                    raise LabelDensityError(f"{manifest}: row {lineno}: negative identity id")
                face_ids.append(label)
            rows.append((rel_path, task, label))
    if not rows:
        raise ConfigError(f"{manifest}: no rows")
    if face_ids:
        present = set(face_ids)
        missing = sorted(set(range(max(present) + 1)) - present)
        if missing:
            raise LabelDensityError(
                f"{manifest}: face identity ids not dense in [0, {max(present) + 1}): "
                f"missing {missing}"
            )
    return ManifestDataset(
        rows, manifest.parent, image_size=image_size, channels=channels, mean=mean, std=std
    )


def export_manifest(out_dir, spec, splits=("train", "test")):
    """Write synthetic data as PNG files plus per-split manifest CSVs.

    Raw (unnormalized) images are clipped to [0, 1] and quantized to 8-bit;
    the manifest loader re-normalizes at ingestion time.

    Returns:
        dict split -> manifest path.
    """
    from PIL import Image

    out = Path(out_dir)
    manifests = {}
    for split in splits:
        fatigue_ds, face_ds = generate_synthetic(spec, split=split, normalize=False)
        img_dir = out / "images" / split
        img_dir.mkdir(parents=True, exist_ok=True)
        manifest_path = out / f"{split}_manifest.csv"
        with open(manifest_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_HEADER)
            for ds in (fatigue_ds, face_ds):
                for i in range(len(ds)):
                    arr = np.clip(ds.images[i], 0.0, 1.0)
                    arr = (arr * 255).round().astype(np.uint8)
                    if arr.shape[2] == 1:
                        img = Image.fromarray(arr[:, :, 0], mode="L")
                    else:
                        img = Image.fromarray(arr, mode="RGB")
                    rel = Path("images") / split / f"{ds.task}_{i:05d}.png"
                    img.save(out / rel)
                    writer.writerow([rel.as_posix(), ds.task, int(ds.labels[i])])
        manifests[split] = manifest_path
    return manifests


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def _permutation(n, seed, epoch, cycle=0):
    rng = np.random.default_rng([seed, epoch, cycle])
    return rng.permutation(n)


def batches(dataset, batch_size, seed, epoch):
    """Yield one epoch of deterministically shuffled batches.

    (seed, epoch) fully determines composition and order; the final short
    batch is emitted as-is, and the union of batches is the dataset
    exactly once.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    perm = _permutation(len(dataset), seed, epoch)
    for start in range(0, len(dataset), batch_size):
        idx = perm[start : start + batch_size]
        yield Batch(dataset.images[idx], dataset.labels[idx])


def cycling_batches(dataset, batch_size, seed, epoch):
    """Endless batch stream that reshuffles on every pass through the data."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    cycle = 0
    while True:
        perm = _permutation(len(dataset), seed, epoch, cycle + 1)
        for start in range(0, len(dataset), batch_size):
            idx = perm[start : start + batch_size]
            yield Batch(dataset.images[idx], dataset.labels[idx])
        cycle += 1
