"""Domain data model, on-disk layout and sample-level transforms.

Layout of a dataset root::

    root/catalog.json
    root/source/images/*.png    8-bit RGB
    root/source/labels/*.png    8-bit single channel, raw class ids
    root/target/images/*.png
    root/target_eval/images/*.png   (optional, evaluation only)
    root/target_eval/labels/*.png

Pixels are held as float32 in [0, 1]; label maps as uint8 class ids.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .errors import DatasetStructureError, DatasetValidationError

CATALOG_FILE = "catalog.json"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    labels: np.ndarray  # H x W, uint8 class ids
    id: str

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        lb = np.asarray(self.labels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DatasetValidationError(f"{self.id}: pixels must be HxWx3, got {px.shape}")
        if lb.shape != px.shape[:2]:
            raise DatasetValidationError(
                f"{self.id}: image size {px.shape[:2]} does not match label size {lb.shape}"
            )
        if lb.size and (lb.min() < 0 or lb.max() > 255):
            raise DatasetValidationError(f"{self.id}: label ids must fit in 8 bits")
        object.__setattr__(self, "pixels", _frozen(px))
        object.__setattr__(self, "labels", _frozen(lb.astype(np.uint8)))

    @property
    def shape(self):
        return self.labels.shape


@dataclass(frozen=True)
class UnlabeledImage:
    pixels: np.ndarray
    id: str

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DatasetValidationError(f"{self.id}: pixels must be HxWx3, got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise DatasetValidationError(f"{self.id}: pixel values outside [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def shape(self):
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class ClassEntry:
    id: int
    name: str
    color: tuple  # (r, g, b) 0..255
    frequency: Optional[float] = None


@dataclass(frozen=True)
class ClassCatalog:
    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        ids = [e.id for e in entries]
        if ids != list(range(len(entries))):
            raise DatasetValidationError(f"class ids must be 0..N-1 in order, got {ids}")
        if len(entries) > 256:
            raise DatasetValidationError("at most 256 classes fit an 8-bit label map")
        colors = [tuple(int(c) for c in e.color) for e in entries]
        if len(set(colors)) != len(colors):
            raise DatasetValidationError("display colors must be distinct")
        freqs = [e.frequency for e in entries]
        if any(f is not None for f in freqs):
            if any(f is None for f in freqs):
                raise DatasetValidationError("frequencies must be populated for all classes or none")
            if any(f < 0.0 or f > 1.0 for f in freqs):
                raise DatasetValidationError("frequencies must lie in [0, 1]")
            if abs(sum(freqs) - 1.0) > 1e-9:
                raise DatasetValidationError(f"frequencies sum to {sum(freqs)!r}, expected 1")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_classes(cls, names: Sequence[str], colors: Sequence[Sequence[int]]) -> "ClassCatalog":
        return cls(tuple(ClassEntry(i, n, tuple(int(v) for v in c)) for i, (n, c) in enumerate(zip(names, colors))))

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list:
        return [e.name for e in self.entries]

    @property
    def colors(self) -> np.ndarray:
        return np.array([e.color for e in self.entries], dtype=np.uint8)

    @property
    def has_frequencies(self) -> bool:
        return bool(self.entries) and self.entries[0].frequency is not None

    @property
    def frequencies(self) -> np.ndarray:
        if not self.has_frequencies:
            raise ValueError("class frequencies are not populated")
        return np.array([e.frequency for e in self.entries], dtype=np.float64)

    def with_frequencies(self, freqs: Sequence[float]) -> "ClassCatalog":
        if len(freqs) != self.num_classes:
            raise ValueError(f"expected {self.num_classes} frequencies, got {len(freqs)}")
        return ClassCatalog(tuple(replace(e, frequency=float(f)) for e, f in zip(self.entries, freqs)))

    def to_dict(self) -> dict:
        out = []
        for e in self.entries:
            d = {"id": e.id, "name": e.name, "color": list(e.color)}
            if e.frequency is not None:
                d["frequency"] = e.frequency
            out.append(d)
        return {"classes": out}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassCatalog":
        try:
            entries = tuple(
                ClassEntry(int(c["id"]), str(c["name"]), tuple(int(v) for v in c["color"]), c.get("frequency"))
                for c in sorted(d["classes"], key=lambda c: int(c["id"]))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetValidationError(f"malformed catalog: {exc}") from exc
        return cls(entries)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ClassCatalog":
        path = Path(path)
        if not path.is_file():
            raise DatasetStructureError(f"catalog file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise DatasetValidationError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class DomainPairDataset:
    source: tuple
    target: tuple
    catalog: ClassCatalog
    target_eval: Optional[tuple] = None
    root: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(self.source))
        object.__setattr__(self, "target", tuple(self.target))
        if self.target_eval is not None:
            object.__setattr__(self, "target_eval", tuple(self.target_eval))
        for s in self.source + (self.target_eval or ()):
            validate_labels(s.labels, self.catalog, s.id)
        for t in self.target:
            if not isinstance(t, UnlabeledImage):
                raise TypeError("target samples must be UnlabeledImage (target labels are never used for training)")

    def with_source(self, source: Sequence[LabeledImage]) -> "DomainPairDataset":
        return replace(self, source=tuple(source), root=None)

    def with_catalog(self, catalog: ClassCatalog) -> "DomainPairDataset":
        return replace(self, catalog=catalog)


def validate_labels(labels: np.ndarray, catalog: ClassCatalog, name: str = "labels") -> None:
    if labels.size and int(labels.max()) >= catalog.num_classes:
        raise DatasetValidationError(
            f"{name}: label value {int(labels.max())} is not a valid class id (num_classes={catalog.num_classes})"
        )


# --------------------------------------------------------------------------- io


def read_rgb(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_label(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DatasetValidationError(f"{path}: label maps must be single-channel 8-bit, got mode {im.mode}")
        return np.asarray(im if im.mode == "L" else im.convert("L"), dtype=np.uint8).copy()


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_rgb(path: Union[str, Path], pixels: np.ndarray) -> None:
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG")


def write_label(path: Union[str, Path], labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path, format="PNG")


def _pngs(directory: Path) -> list:
    if not directory.is_dir():
        raise DatasetStructureError(f"missing directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DatasetStructureError(f"no PNG files in {directory}")
    return files


def _load_labeled(split_dir: Path, catalog: ClassCatalog, workers: int) -> list:
    images = _pngs(split_dir / "images")
    labels_dir = split_dir / "labels"
    label_files = {p.stem: p for p in _pngs(labels_dir)}
    missing = [p.name for p in images if p.stem not in label_files]
    if missing:
        raise DatasetStructureError(f"{labels_dir}: no label map for {missing[:3]}")

    def load_one(img_path):
        lab_path = label_files[img_path.stem]
        px = read_rgb(img_path)
        lb = read_label(lab_path)
        if lb.shape != px.shape[:2]:
            raise DatasetValidationError(f"{lab_path}: size {lb.shape} does not match image size {px.shape[:2]}")
        validate_labels(lb, catalog, str(lab_path))
        return LabeledImage(px, lb, img_path.stem)

    # map() preserves input order, so parallel loading keeps lexicographic order
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(load_one, images))


def load_dataset(
    root_path: Union[str, Path],
    catalog: Optional[ClassCatalog] = None,
    workers: int = 4,
    load_eval: bool = True,
) -> DomainPairDataset:
    """Load a dataset root into memory, validating labels against ``catalog``.

    When ``catalog`` is omitted, ``root/catalog.json`` is read.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetStructureError(f"dataset root not found: {root}")
    if catalog is None:
        catalog = ClassCatalog.load(root / CATALOG_FILE)
    source = _load_labeled(root / "source", catalog, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        target = list(pool.map(lambda p: UnlabeledImage(read_rgb(p), p.stem), _pngs(root / "target" / "images")))
    target_eval = None
    if load_eval and (root / "target_eval").is_dir():
        target_eval = _load_labeled(root / "target_eval", catalog, workers)
    return DomainPairDataset(source, target, catalog, target_eval, root=str(root))


def _write_labeled(split_dir: Path, samples: Sequence[LabeledImage]) -> None:
    (split_dir / "images").mkdir(parents=True, exist_ok=True)
    (split_dir / "labels").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_rgb(split_dir / "images" / f"{s.id}.png", s.pixels)
        write_label(split_dir / "labels" / f"{s.id}.png", s.labels)


def save_dataset(dataset: DomainPairDataset, root_path: Union[str, Path]) -> Path:
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    dataset.catalog.save(root / CATALOG_FILE)
    _write_labeled(root / "source", dataset.source)
    (root / "target" / "images").mkdir(parents=True, exist_ok=True)
    for t in dataset.target:
        write_rgb(root / "target" / "images" / f"{t.id}.png", t.pixels)
    if dataset.target_eval is not None:
        _write_labeled(root / "target_eval", dataset.target_eval)
    return root


def fingerprint(root_path: Union[str, Path]) -> str:
    """Content hash over every file under a dataset root (relative path + bytes)."""
    root = Path(root_path)
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(p.relative_to(root).as_posix().encode())
            h.update(b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()


# ------------------------------------------------------------------- transforms


def _as_rng(rng_state) -> np.random.Generator:
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def crop_window(shape, size: int, rng_state) -> tuple:
    h, w = shape
    if size > min(h, w) or size <= 0:
        raise ValueError(f"crop size {size} does not fit image of size {h}x{w}")
    rng = _as_rng(rng_state)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return top, left


def random_crop(sample, size: int, rng_state):
    """Crop a ``size`` x ``size`` window; labels share the pixel window.

    ``rng_state`` is a seed (or seed sequence) or a ``numpy.random.Generator``;
    equal seeds give equal windows.
    """
    top, left = crop_window(sample.shape, size, rng_state)
    px = sample.pixels[top:top + size, left:left + size]
    if isinstance(sample, LabeledImage):
        return LabeledImage(px, sample.labels[top:top + size, left:left + size], sample.id)
    return UnlabeledImage(px, sample.id)


def encode_label_colors(labels: np.ndarray, catalog: ClassCatalog) -> np.ndarray:
    """Map class ids to their display colors (uint8 H x W x 3)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= catalog.num_classes):
        raise DatasetValidationError("label map contains ids outside the catalog")
    return catalog.colors[labels.astype(np.int64)]


def decode_label_colors(image: np.ndarray, catalog: ClassCatalog) -> np.ndarray:
    """Inverse of :func:`encode_label_colors`."""
    image = np.asarray(image, dtype=np.uint8)
    key = (image[..., 0].astype(np.int64) << 16) | (image[..., 1].astype(np.int64) << 8) | image[..., 2]
    colors = catalog.colors.astype(np.int64)
    palette = (colors[:, 0] << 16) | (colors[:, 1] << 8) | colors[:, 2]
    order = np.argsort(palette)
    pos = np.searchsorted(palette[order], key)
    pos = np.clip(pos, 0, len(palette) - 1)
    hit = palette[order][pos] == key
    if not hit.all():
        raise DatasetValidationError("image contains colors not present in the catalog")
    return order[pos].astype(np.uint8)
