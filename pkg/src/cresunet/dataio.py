"""Dataset ingestion (BUSI directory layout), fold planning and batching."""

from __future__ import annotations

import csv
import io
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .preprocess import add_speckle, resize_bilinear, resize_nearest, to_unit
from .tensor_core import Tensor, default_dtype

log = logging.getLogger(__name__)

CLASSES = ("benign", "malignant", "normal")
BUSI_COUNTS = {"benign": 437, "malignant": 210, "normal": 133}

_MASK_RE = re.compile(r"^(?P<stem>.+)_mask(?:_(?P<idx>\d+))?$")


class DataError(RuntimeError):
    """Malformed dataset, unreadable file or inconsistent fold plan."""


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    image_path: Path
    mask_paths: tuple[Path, ...]
    cls: str
    fold: int = -1


@dataclass
class Sample:
    """A decoded, resized image with its merged binary mask."""

    sample_id: str
    cls: str
    image: np.ndarray
    mask: np.ndarray


# ---------------------------------------------------------------------------
# PNG I/O


def read_gray(path: str | Path) -> np.ndarray:
    """8-bit grayscale pixels; RGB(A) input is luma-converted."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def write_png(path: str | Path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


# ---------------------------------------------------------------------------
# scanning


def scan_dataset(root: str | Path) -> list[SampleRecord]:
    """Find ``<class>/<name>.png`` images and their ``<name>_mask*.png`` masks."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    records = []
    for cls in CLASSES:
        d = root / cls
        if not d.is_dir():
            continue
        images: dict[str, Path] = {}
        masks: dict[str, list[tuple[int, Path]]] = {}
        for p in d.iterdir():
            if p.suffix.lower() != ".png":
                continue
            m = _MASK_RE.match(p.stem)
            if m:
                idx = int(m.group("idx")) if m.group("idx") else 0
                masks.setdefault(m.group("stem"), []).append((idx, p))
            else:
                images[p.stem] = p
        for name in sorted(images):
            found = sorted(masks.get(name, []))
            if not found:
                raise DataError(f"image {images[name]} has no mask file ({name}_mask.png)")
            records.append(SampleRecord(f"{cls}/{name}", images[name], tuple(p for _, p in found), cls))
        orphans = sorted(set(masks) - set(images))
        if orphans:
            log.warning("%s: %d mask(s) without an image, e.g. %s", d, len(orphans), orphans[0])
    if not records:
        log.warning("no samples found under %s", root)
    else:
        log.info("scanned %s: %s", root, class_counts(records))
    return records


def class_counts(records: Iterable) -> dict[str, int]:
    counts = {c: 0 for c in CLASSES}
    for r in records:
        counts[r.cls] = counts.get(r.cls, 0) + 1
    return counts


def merge_masks(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Pixel-wise union of binary masks."""
    if not masks:
        raise ValueError("merge_masks needs at least one mask")
    shape = np.shape(masks[0])
    out = np.zeros(shape, dtype=bool)
    for i, m in enumerate(masks):
        if np.shape(m) != shape:
            raise ValueError(f"mask {i} has shape {np.shape(m)}, expected {shape}")
        out |= np.asarray(m) > 0
    return out.astype(np.uint8)


def load_sample(record: SampleRecord, size: tuple[int, int] = (256, 256)) -> Sample:
    img = to_unit(read_gray(record.image_path))
    masks = [read_gray(p) > 127 for p in record.mask_paths]
    try:
        mask = merge_masks(masks)
    except ValueError as exc:
        raise DataError(f"{record.sample_id}: {exc}") from exc
    if mask.shape != img.shape:
        raise DataError(f"{record.sample_id}: mask shape {mask.shape} differs from image {img.shape}")
    h, w = size
    return Sample(record.sample_id, record.cls, resize_bilinear(img, h, w), resize_nearest(mask, h, w))


def load_samples(records: Sequence[SampleRecord], size: tuple[int, int] = (256, 256)) -> list[Sample]:
    return [load_sample(r, size) for r in records]


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    k: int
    seed: int
    stratified: bool
    folds: list[list[str]]
    classes: dict[str, str] = field(default_factory=dict)

    def fold_of(self, sample_id: str) -> int:
        for f, ids in enumerate(self.folds):
            if sample_id in ids:
                return f
        raise KeyError(sample_id)

    def test_ids(self, fold: int) -> list[str]:
        self._check_fold(fold)
        return list(self.folds[fold])

    def train_ids(self, fold: int) -> list[str]:
        self._check_fold(fold)
        return [i for f, ids in enumerate(self.folds) if f != fold for i in ids]

    def validation_split(self, fold: int, fraction: float = 0.2, seed: int | None = None) -> tuple[list[str], list[str]]:
        """Split the training folds of ``fold`` into (train, validation), stratified by class."""
        if not 0.0 <= fraction <= 0.5:
            raise ValueError(f"validation fraction must be in [0, 0.5], got {fraction}")
        ids = self.train_ids(fold)
        rng = np.random.default_rng([self.seed if seed is None else seed, fold, 17])
        val: set[str] = set()
        by_class: dict[str, list[str]] = {}
        for i in ids:
            by_class.setdefault(self.classes.get(i, ""), []).append(i)
        for cls in sorted(by_class):
            members = by_class[cls]
            n_val = int(round(fraction * len(members)))
            val.update(members[j] for j in rng.permutation(len(members))[:n_val])
        return [i for i in ids if i not in val], [i for i in ids if i in val]

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise ValueError(f"fold {fold} out of range for k={self.k}")

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# k={self.k} seed={self.seed} stratified={int(self.stratified)}\n")
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["sample_id", "class", "fold"])
        for f, ids in enumerate(self.folds):
            for i in ids:
                w.writerow([i, self.classes.get(i, ""), f])
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> FoldPlan:
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise DataError("fold plan: missing '# k=... seed=...' header")
        meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        try:
            k, seed, strat = int(meta["k"]), int(meta["seed"]), bool(int(meta.get("stratified", "1")))
        except (KeyError, ValueError) as exc:
            raise DataError(f"fold plan: bad header {lines[0]!r}") from exc
        folds: list[list[str]] = [[] for _ in range(k)]
        classes = {}
        reader = csv.DictReader(lines[1:], delimiter="\t")
        for row in reader:
            f = int(row["fold"])
            if not 0 <= f < k:
                raise DataError(f"fold plan: sample {row['sample_id']} has fold {f} outside [0, {k})")
            folds[f].append(row["sample_id"])
            classes[row["sample_id"]] = row["class"]
        return cls(k, seed, strat, folds, classes)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> FoldPlan:
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise DataError(f"cannot read fold plan {path}: {exc}") from exc


def kfold_split(records: Sequence, k: int = 5, seed: int = 0, stratified: bool = True) -> FoldPlan:
    """Deterministic k-fold partition.

    Stratified plans shuffle each class and deal its members round-robin,
    continuing the deal position from one class to the next so that both
    per-class and total fold sizes differ by at most one.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    classes = {r.sample_id: r.cls for r in records}
    if len(classes) != len(records):
        raise DataError("duplicate sample ids in records")
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    if stratified:
        groups: dict[str, list[str]] = {}
        for r in records:
            groups.setdefault(r.cls, []).append(r.sample_id)
        pos = 0
        for cls in sorted(groups):
            members = sorted(groups[cls])
            if len(members) < k:
                raise DataError(f"class {cls!r} has {len(members)} samples, fewer than k={k}")
            for j in rng.permutation(len(members)):
                folds[pos % k].append(members[j])
                pos += 1
    else:
        ids = sorted(classes)
        for n, j in enumerate(rng.permutation(len(ids))):
            folds[n % k].append(ids[j])
    return FoldPlan(k, seed, stratified, [sorted(f) for f in folds], classes)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    images: Tensor
    masks: np.ndarray
    ids: list[str]

    def __iter__(self):
        return iter((self.images, self.masks))


def batches(
    items: Sequence[Sample | SampleRecord],
    batch_size: int = 8,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
    size: tuple[int, int] = (256, 256),
) -> Iterator[Batch]:
    """Yield (N,1,H,W) image tensors and binary mask arrays.

    The order is a fixed permutation per (seed, epoch); the final partial
    batch is kept. Records are decoded and resized on demand.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be at least 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(items)) if shuffle else np.arange(len(items))
    dt = default_dtype()
    for s in range(0, len(order), batch_size):
        chunk = [items[j] for j in order[s : s + batch_size]]
        chunk = [load_sample(c, size) if isinstance(c, SampleRecord) else c for c in chunk]
        imgs = np.stack([c.image for c in chunk])[:, None].astype(dt)
        masks = (np.stack([c.mask for c in chunk])[:, None] > 0).astype(dt)
        yield Batch(Tensor(imgs), masks, [c.sample_id for c in chunk])


# ---------------------------------------------------------------------------
# synthetic data


def synthetic_sample(sample_id: str, cls: str, size: int, rng: np.random.Generator, speckle: float = 0.2) -> Sample:
    """A bright ellipse on a darker speckled background, with its exact mask."""
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    if cls == "normal":
        mask = np.zeros((size, size), dtype=np.uint8)
    else:
        cy, cx = rng.uniform(0.3, 0.7, size=2) * size
        ry, rx = rng.uniform(0.12, 0.25, size=2) * size
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask = ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.uint8)
    base = np.where(mask > 0, 0.75, 0.3).astype(np.float32)
    img = add_speckle(base, speckle, int(rng.integers(2**31)))
    return Sample(sample_id, cls, img, mask)


def synthetic_samples(n: int, size: int = 64, seed: int = 0, classes: Sequence[str] = ("benign", "malignant")) -> list[Sample]:
    rng = np.random.default_rng(seed)
    return [synthetic_sample(f"{classes[i % len(classes)]}/synth{i:03d}", classes[i % len(classes)], size, rng) for i in range(n)]


def write_busi_layout(root: str | Path, samples: Sequence[Sample]) -> list[Path]:
    """Write samples as ``<class>/<name>.png`` + ``<name>_mask.png``."""
    root = Path(root)
    written = []
    for s in samples:
        cls, name = s.sample_id.split("/", 1)
        img_path = root / cls / f"{name}.png"
        write_png(img_path, s.image)
        write_png(root / cls / f"{name}_mask.png", (np.asarray(s.mask) > 0).astype(np.uint8) * 255)
        written.append(img_path)
    return written


def mock_records(counts: dict[str, int] = BUSI_COUNTS) -> list[SampleRecord]:
    """Path-less records with the given class counts (fold-planning checks)."""
    return [
        SampleRecord(f"{cls}/{cls} ({i + 1})", Path(f"{cls} ({i + 1}).png"), (Path(f"{cls} ({i + 1})_mask.png"),), cls)
        for cls in CLASSES
        for i in range(counts.get(cls, 0))
    ]
