"""Procedural two-domain benchmark with exact per-pixel semantics.

Scenes are a background plus randomly placed rectangles, circles and
triangles; later shapes occlude earlier ones. One scene layout can be
rendered in a flat "synthetic" style or a textured, noisy, vignetted
"real" style, which gives a controlled appearance gap with identical
geometry statistics.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import (
    ClassCatalog,
    DomainPairDataset,
    LabeledImage,
    UnlabeledImage,
    save_dataset,
)

TOYWORLD_FILE = "toyworld.json"

CLASS_NAMES = ["background", "building", "vegetation", "vehicle", "person", "sign", "pole", "rider"]
SHAPES = ("rectangle", "circle", "triangle")


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    num_classes: int = 5
    shape_count_range: tuple = (3, 8)
    class_frequency_skew: float = 2.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape_count_range", tuple(int(v) for v in self.shape_count_range))
        lo, hi = self.shape_count_range
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2 (one is background)")
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid shape_count_range {self.shape_count_range}")
        if self.class_frequency_skew < 1.0:
            raise ValueError("class_frequency_skew must be >= 1")

    def class_probabilities(self) -> np.ndarray:
        """Probability of each foreground class (ids 1..C-1) being drawn for a shape."""
        k = np.arange(self.num_classes - 1, dtype=np.float64)
        p = self.class_frequency_skew ** (-k)
        return p / p.sum()


@dataclass(frozen=True)
class DomainStyle:
    palette: tuple  # per-class RGB in [0, 1]
    texture_amplitude: float = 0.0
    noise_sigma: float = 0.0
    illumination_gradient: float = 0.0

    def __post_init__(self):
        pal = tuple(tuple(float(v) for v in c) for c in self.palette)
        object.__setattr__(self, "palette", pal)
        if any(len(c) != 3 or min(c) < 0.0 or max(c) > 1.0 for c in pal):
            raise ValueError("palette entries must be RGB triples in [0, 1]")
        if not 0.0 <= self.texture_amplitude <= 1.0:
            raise ValueError("texture_amplitude must lie in [0, 1]")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.illumination_gradient <= 1.0:
            raise ValueError("illumination_gradient must lie in [0, 1]")


def _hue_palette(num_classes, hue_offset, saturation, value, background):
    colors = [tuple(background)]
    n = num_classes - 1
    for k in range(n):
        colors.append(colorsys.hsv_to_rgb((hue_offset + k / n) % 1.0, saturation, value))
    return tuple(colors)


def default_source_style(num_classes: int = 5) -> DomainStyle:
    """Flat, saturated, noise-free rendering (synthetic-like)."""
    return DomainStyle(_hue_palette(num_classes, 0.0, 0.85, 0.9, (0.55, 0.55, 0.55)))


def default_target_style(num_classes: int = 5) -> DomainStyle:
    """Shifted, desaturated palette with texture, sensor noise and vignetting (real-like)."""
    shift = 0.4 / (num_classes - 1)
    return DomainStyle(
        _hue_palette(num_classes, shift, 0.55, 0.7, (0.42, 0.4, 0.36)),
        texture_amplitude=0.35,
        noise_sigma=0.05,
        illumination_gradient=0.45,
    )


def default_catalog(num_classes: int = 5) -> ClassCatalog:
    names = [CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"class{i}" for i in range(num_classes)]
    colors = [(0, 0, 0)] + [
        tuple(int(round(255 * v)) for v in colorsys.hsv_to_rgb(k / max(num_classes - 1, 1), 1.0, 1.0))
        for k in range(num_classes - 1)
    ]
    return ClassCatalog.from_classes(names, colors)


# ----------------------------------------------------------------------- scenes


def _shape_mask(kind, yy, xx, cy, cx, r, rng):
    if kind == "rectangle":
        hh, hw = r * rng.uniform(0.5, 1.0), r * rng.uniform(0.5, 1.0)
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # triangle: random rotation of an isoceles triangle, inside test by edge signs
    theta = rng.uniform(0, 2 * np.pi)
    angles = theta + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    vy, vx = cy + r * np.sin(angles), cx + r * np.cos(angles)
    signs = []
    for i in range(3):
        j = (i + 1) % 3
        signs.append((vx[j] - vx[i]) * (yy - vy[i]) - (vy[j] - vy[i]) * (xx - vx[i]))
    s = np.stack(signs)
    return np.all(s >= 0, axis=0) | np.all(s <= 0, axis=0)


def generate_scene(spec: SceneSpec, index: int) -> np.ndarray:
    """Semantic map (uint8, H x W) determined entirely by ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    labels = np.zeros((size, size), dtype=np.uint8)
    lo, hi = spec.shape_count_range
    n = int(rng.integers(lo, hi + 1))
    if n == 0:
        return labels
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    probs = spec.class_probabilities()
    for _ in range(n):
        cls = 1 + int(rng.choice(spec.num_classes - 1, p=probs))
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        cy, cx = rng.uniform(0, size, size=2)
        r = rng.uniform(size / 12, size / 4.5)
        labels[_shape_mask(kind, yy, xx, cy, cx, r, rng)] = cls
    return labels


# --------------------------------------------------------------------- rendering


def _sub_rngs(rng_state, n):
    if isinstance(rng_state, np.random.Generator):
        rng_state = int(rng_state.integers(2**63))
    seq = rng_state if isinstance(rng_state, np.random.SeedSequence) else np.random.SeedSequence(rng_state)
    return [np.random.default_rng(s) for s in seq.spawn(n)]


def render(semantic_map: np.ndarray, style: DomainStyle, rng_state) -> np.ndarray:
    """Render a label map into an H x W x 3 float32 image in [0, 1].

    Texture, illumination and noise draw from independent sub-streams of
    ``rng_state``, so toggling one of them leaves the others unchanged.
    """
    labels = np.asarray(semantic_map)
    if labels.max(initial=0) >= len(style.palette):
        raise ValueError("semantic map has ids beyond the style palette")
    tex_rng, light_rng, noise_rng = _sub_rngs(rng_state, 3)
    h, w = labels.shape
    palette = np.asarray(style.palette, dtype=np.float64)
    img = palette[labels]

    # draw all random quantities unconditionally so sub-streams stay aligned
    n_cls = len(style.palette)
    freqs = tex_rng.uniform(2.0, 6.0, size=(n_cls, 2)) * tex_rng.choice([-1.0, 1.0], size=(n_cls, 2))
    phases = tex_rng.uniform(0, 2 * np.pi, size=n_cls)
    center = light_rng.uniform(0.2, 0.8, size=2)
    noise = noise_rng.standard_normal(img.shape)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy, xx = (yy + 0.5) / h, (xx + 0.5) / w
    if style.texture_amplitude > 0:
        f = freqs[labels]
        pattern = np.sin(2 * np.pi * (f[..., 0] * yy + f[..., 1] * xx) + phases[labels])
        img = img * (1.0 + 0.5 * style.texture_amplitude * pattern)[..., None]
    if style.illumination_gradient > 0:
        r2 = ((yy - center[0]) ** 2 + (xx - center[1]) ** 2) / 0.5
        img = img * (1.0 - style.illumination_gradient * np.clip(r2, 0.0, 1.0))[..., None]
    if style.noise_sigma > 0:
        img = img + style.noise_sigma * noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ----------------------------------------------------------------------- dataset


@dataclass
class ToyWorld:
    """A scene spec plus the two domain styles; serialized next to the data."""

    spec: SceneSpec = field(default_factory=SceneSpec)
    source_style: Optional[DomainStyle] = None
    target_style: Optional[DomainStyle] = None

    def __post_init__(self):
        if self.source_style is None:
            self.source_style = default_source_style(self.spec.num_classes)
        if self.target_style is None:
            self.target_style = default_target_style(self.spec.num_classes)
        for st in (self.source_style, self.target_style):
            if len(st.palette) != self.spec.num_classes:
                raise ValueError("style palette size must equal num_classes")

    def labeled(self, index: int, style: DomainStyle, prefix: str) -> LabeledImage:
        labels = generate_scene(self.spec, index)
        pixels = render(labels, style, [self.spec.seed, index, 1])
        return LabeledImage(pixels, labels, f"{prefix}_{index:06d}")

    def to_dict(self) -> dict:
        return {"spec": asdict(self.spec), "source_style": asdict(self.source_style), "target_style": asdict(self.target_style)}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyWorld":
        return cls(SceneSpec(**d["spec"]), DomainStyle(**d["source_style"]), DomainStyle(**d["target_style"]))

    @classmethod
    def load(cls, root: Union[str, Path]) -> "ToyWorld":
        path = Path(root) / TOYWORLD_FILE
        if not path.is_file():
            raise FileNotFoundError(f"{path} not found; dataset was not produced by the toy-world generator")
        return cls.from_dict(json.loads(path.read_text()))


# index ranges per split keep every scene distinct
_SPLIT_OFFSETS = {"source": 0, "target": 1_000_000, "target_eval": 2_000_000, "oracle": 3_000_000}


def split_indices(split: str, n: int) -> range:
    start = _SPLIT_OFFSETS[split]
    return range(start, start + n)


def build_dataset(world: ToyWorld, n_source: int, n_target: int, n_eval: int) -> DomainPairDataset:
    for name, n in (("n_source", n_source), ("n_target", n_target), ("n_eval", n_eval)):
        if n <= 0:
            raise ValueError(f"{name} must be positive, got {n}")
    if world.source_style == world.target_style:
        raise ValueError("source and target styles must differ")
    source = [world.labeled(i, world.source_style, "src") for i in split_indices("source", n_source)]
    target = [
        UnlabeledImage(world.labeled(i, world.target_style, "tgt").pixels, f"tgt_{i:06d}")
        for i in split_indices("target", n_target)
    ]
    target_eval = [world.labeled(i, world.target_style, "eval") for i in split_indices("target_eval", n_eval)]
    return DomainPairDataset(source, target, default_catalog(world.spec.num_classes), target_eval)


def generate_dataset(
    spec: SceneSpec,
    source_style: DomainStyle,
    target_style: DomainStyle,
    n_source: int,
    n_target: int,
    n_eval: int,
    root: Union[str, Path],
) -> DomainPairDataset:
    """Generate and write a toy dataset in the standard on-disk layout.

    The in-memory dataset returned is quantized exactly like the written
    PNGs, so it equals what ``load_dataset(root)`` would give.
    """
    world = ToyWorld(spec, source_style, target_style)
    ds = build_dataset(world, n_source, n_target, n_eval)
    root = Path(root)
    save_dataset(ds, root)
    (root / TOYWORLD_FILE).write_text(json.dumps(world.to_dict(), indent=2) + "\n")
    return quantize(ds)


def quantize(ds: DomainPairDataset) -> DomainPairDataset:
    q = lambda px: np.round(px * 255.0).astype(np.float32) / 255.0  # noqa: E731
    return DomainPairDataset(
        [LabeledImage(q(s.pixels), s.labels, s.id) for s in ds.source],
        [UnlabeledImage(q(t.pixels), t.id) for t in ds.target],
        ds.catalog,
        None if ds.target_eval is None else [LabeledImage(q(s.pixels), s.labels, s.id) for s in ds.target_eval],
        root=ds.root,
    )


def oracle_set(world: ToyWorld, n: int) -> list:
    """Labeled target-style renders of fresh scenes, for the semantic-preservation oracle."""
    return [world.labeled(i, world.target_style, "oracle") for i in split_indices("oracle", n)]


def target_style_twins(world: ToyWorld, samples: Sequence[LabeledImage]) -> list:
    """Target-style renders of the very scenes behind ``source``-split samples."""
    out = []
    for s in samples:
        index = int(s.id.rsplit("_", 1)[1])
        twin = world.labeled(index, world.target_style, "twin")
        out.append(LabeledImage(twin.pixels, s.labels, s.id))
    return out
