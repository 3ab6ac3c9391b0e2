"""Generators, dual-head discriminators, the downstream segmenter, and snapshots."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import SnapshotError, SpecMismatchError

SNAPSHOT_FORMAT = "semcycle-snapshot"
SNAPSHOT_VERSION = 1


def to_model_range(x: torch.Tensor) -> torch.Tensor:
    """[0, 1] -> [-1, 1]."""
    return x * 2.0 - 1.0


def to_data_range(x: torch.Tensor) -> torch.Tensor:
    """[-1, 1] -> [0, 1]."""
    return (x + 1.0) * 0.5


def images_to_tensor(pixels, dtype=torch.float32) -> torch.Tensor:
    """Stack H x W x 3 arrays in [0, 1] into an N x 3 x H x W tensor in [-1, 1]."""
    arr = np.stack([np.asarray(p) for p in pixels]).transpose(0, 3, 1, 2)
    return to_model_range(torch.from_numpy(np.ascontiguousarray(arr)).to(dtype))


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    return to_data_range(x.detach()).clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


def check_divisible(h: int, w: int, stages: int, what: str) -> None:
    f = 2 ** stages
    if h % f or w % f:
        raise ValueError(f"{what}: input size {h}x{w} is not divisible by {f}; pad or crop the input")


# -------------------------------------------------------------------- generator


@dataclass(frozen=True)
class GeneratorSpec:
    base_channels: int = 32
    num_residual_blocks: int = 4
    downsampling_stages: int = 2
    residual_scale: float = 1.0
    stem_kernel: int = 7

    def __post_init__(self):
        if min(self.base_channels, self.num_residual_blocks, self.downsampling_stages) < 1:
            raise ValueError("generator spec counts must be >= 1")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise ValueError("stem_kernel must be a positive odd number")


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch, affine=True),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(ch, ch, 3),
            nn.InstanceNorm2d(ch, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """ResNet-style encoder / residual trunk / decoder with a global skip.

    ``out = clip(x + gate * body(x), -1, 1)``; ``gate`` is learnable and starts
    at ``spec.residual_scale``, so a scale of 0 is the identity map.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        ch = spec.base_channels
        k, pad = spec.stem_kernel, spec.stem_kernel // 2
        layers = [nn.ReflectionPad2d(pad), nn.Conv2d(3, ch, k), nn.InstanceNorm2d(ch, affine=True), nn.ReLU(inplace=True)]
        for _ in range(spec.downsampling_stages):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(ch * 2, affine=True), nn.ReLU(inplace=True)]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(spec.num_residual_blocks)]
        for _ in range(spec.downsampling_stages):
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, ch // 2, 3, padding=1),
                nn.InstanceNorm2d(ch // 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(pad), nn.Conv2d(ch, 3, k), nn.Tanh()]
        self.body = nn.Sequential(*layers)
        self.gate = nn.Parameter(torch.tensor(float(spec.residual_scale)))

    def forward(self, x):
        check_divisible(x.shape[-2], x.shape[-1], self.spec.downsampling_stages, "generator")
        return torch.clamp(x + self.gate * self.body(x), -1.0, 1.0)


# ---------------------------------------------------------------- discriminator


@dataclass(frozen=True)
class DualHeadDiscriminatorSpec:
    base_channels: int = 32
    encoder_stages: int = 3
    num_classes: int = 5
    semantic_head: bool = True

    def __post_init__(self):
        if min(self.base_channels, self.encoder_stages) < 1 or self.num_classes < 2:
            raise ValueError("discriminator spec counts must be >= 1 and num_classes >= 2")


def _down(cin, cout, norm=True):
    layers = [nn.Conv2d(cin, cout, 4, stride=2, padding=1)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout, affine=True))
    layers.append(nn.LeakyReLU(0.2, inplace=True))
    return nn.Sequential(*layers)


class UNetEncoder(nn.Module):
    def __init__(self, base, stages):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, base, 3, padding=1), nn.LeakyReLU(0.2, inplace=True))
        chans = [base * 2 ** i for i in range(stages + 1)]
        self.downs = nn.ModuleList(_down(chans[i], chans[i + 1], norm=i > 0) for i in range(stages))
        self.channels = chans

    def forward(self, x):
        feats = [self.stem(x)]
        for d in self.downs:
            feats.append(d(feats[-1]))
        return feats  # feats[-1] is the deepest


class UNetDecoder(nn.Module):
    """Upsampling path with skip connections, emitting per-pixel logits."""

    def __init__(self, channels, out_channels):
        super().__init__()
        self.ups = nn.ModuleList()
        for i in range(len(channels) - 1, 0, -1):
            cin, cskip = channels[i], channels[i - 1]
            self.ups.append(
                nn.ModuleDict(
                    {
                        "up": nn.ConvTranspose2d(cin, cskip, 2, stride=2),
                        "fuse": nn.Sequential(nn.Conv2d(2 * cskip, cskip, 3, padding=1), nn.ReLU(inplace=True)),
                    }
                )
            )
        self.head = nn.Conv2d(channels[0], out_channels, 1)

    def forward(self, feats):
        x = feats[-1]
        for blk, skip in zip(self.ups, reversed(feats[:-1])):
            x = blk["fuse"](torch.cat([blk["up"](x), skip], dim=1))
        return self.head(x)


class DualHeadDiscriminator(nn.Module):
    """U-Net discriminator whose deepest encoder features feed two heads.

    ``forward`` returns ``(score_map, seg_logits)``: an ``N x 1 x h x w`` map of
    real/fake probabilities and ``N x C x H x W`` segmentation logits (``None``
    when the semantic head is disabled).
    """

    def __init__(self, spec: DualHeadDiscriminatorSpec):
        super().__init__()
        self.spec = spec
        self.encoder = UNetEncoder(spec.base_channels, spec.encoder_stages)
        deep = self.encoder.channels[-1]
        self.domain_head = nn.Sequential(
            nn.Conv2d(deep, deep, 3, padding=1), nn.LeakyReLU(0.2, inplace=True), nn.Conv2d(deep, 1, 3, padding=1)
        )
        self.seg_head = UNetDecoder(self.encoder.channels, spec.num_classes) if spec.semantic_head else None

    def logits(self, x):
        """Like ``forward`` but with the score map left as pre-sigmoid logits."""
        check_divisible(x.shape[-2], x.shape[-1], self.spec.encoder_stages, "discriminator")
        feats = self.encoder(x)
        seg = self.seg_head(feats) if self.seg_head is not None else None
        return self.domain_head(feats[-1]), seg

    def forward(self, x):
        score, seg = self.logits(x)
        return torch.sigmoid(score), seg

    def score(self, x):
        return self.forward(x)[0]


# -------------------------------------------------------------------- segmenter


@dataclass(frozen=True)
class SegmenterSpec:
    base_channels: int = 16
    encoder_stages: int = 3
    num_classes: int = 5

    def __post_init__(self):
        if min(self.base_channels, self.encoder_stages) < 1 or self.num_classes < 2:
            raise ValueError("segmenter spec counts must be >= 1 and num_classes >= 2")


class Segmenter(nn.Module):
    """Small encoder-decoder used for the downstream segmentation task."""

    def __init__(self, spec: SegmenterSpec):
        super().__init__()
        self.spec = spec
        self.encoder = UNetEncoder(spec.base_channels, spec.encoder_stages)
        self.decoder = UNetDecoder(self.encoder.channels, spec.num_classes)

    def forward(self, x):
        check_divisible(x.shape[-2], x.shape[-1], self.spec.encoder_stages, "segmenter")
        return self.decoder(self.encoder(x))

    @torch.no_grad()
    def predict(self, pixels, batch_size: int = 16) -> np.ndarray:
        """Class-id predictions (uint8 N x H x W) for H x W x 3 arrays in [0, 1]."""
        was_training = self.training
        self.eval()
        out = []
        for i in range(0, len(pixels), batch_size):
            x = images_to_tensor(pixels[i:i + batch_size], dtype=next(self.parameters()).dtype)
            out.append(self(x).argmax(1).to(torch.uint8).numpy())
        self.train(was_training)
        return np.concatenate(out)


# --------------------------------------------------------------------- builders


def _init_weights(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, a=0.2, generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_generator(spec: GeneratorSpec, seed: int = 0) -> Generator:
    g = Generator(spec)
    _init_weights(g, seed)
    return g


def build_discriminator(spec: DualHeadDiscriminatorSpec, seed: int = 0) -> DualHeadDiscriminator:
    d = DualHeadDiscriminator(spec)
    _init_weights(d, seed)
    return d


def build_segmenter(spec: SegmenterSpec, seed: int = 0) -> Segmenter:
    s = Segmenter(spec)
    _init_weights(s, seed)
    return s


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -------------------------------------------------------------------- snapshots


def save_snapshot(path: Union[str, Path], kind: str, specs: dict, models: dict, optimizers: dict, step: int, extra: Optional[dict] = None) -> Path:
    """Write a versioned, self-describing snapshot.

    ``specs`` maps a model name to its spec dataclass, ``models`` to its
    module; ``optimizers`` maps names to optimizers. The torch RNG state is
    stored alongside.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "kind": kind,
        "step": int(step),
        "specs": {k: {"type": type(v).__name__, **asdict(v)} for k, v in specs.items()},
        "models": {k: m.state_dict() for k, m in models.items()},
        "shapes": {k: {n: list(t.shape) for n, t in m.state_dict().items()} for k, m in models.items()},
        "optimizers": {k: o.state_dict() for k, o in optimizers.items()},
        "torch_rng": torch.get_rng_state(),
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_snapshot(path: Union[str, Path], kind: Optional[str] = None, expect_specs: Optional[dict] = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise SnapshotError(f"snapshot not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of types for corrupt archives
        raise SnapshotError(f"cannot read snapshot {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != SNAPSHOT_FORMAT:
        raise SnapshotError(f"{path} is not a {SNAPSHOT_FORMAT} file")
    if payload.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError(f"{path}: unsupported snapshot version {payload.get('version')}")
    if kind is not None and payload["kind"] != kind:
        raise SnapshotError(f"{path}: expected a '{kind}' snapshot, found '{payload['kind']}'")
    if expect_specs:
        for name, spec in expect_specs.items():
            stored = payload["specs"].get(name)
            want = {"type": type(spec).__name__, **asdict(spec)}
            if stored != want:
                raise SpecMismatchError(f"{path}: spec for '{name}' is {stored}, expected {want}")
    return payload


SPEC_TYPES = {cls.__name__: cls for cls in (GeneratorSpec, DualHeadDiscriminatorSpec, SegmenterSpec)}


def spec_from_dict(d: dict):
    d = dict(d)
    return SPEC_TYPES[d.pop("type")](**d)
