"""Downstream segmentation training, evaluation metrics, and the ablation driver."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from . import data as D
from .errors import ConfigValueError, SnapshotError
from .models import (
    SegmenterSpec,
    build_segmenter,
    images_to_tensor,
    load_snapshot,
    save_snapshot,
    spec_from_dict,
)

log = logging.getLogger(__name__)


@dataclass
class SegTrainConfig:
    iterations: int = 2500
    batch_size: int = 8
    learning_rate: float = 1e-3
    crop_size: int = 64
    seed: int = 0
    model: SegmenterSpec = field(default_factory=SegmenterSpec)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = SegmenterSpec(**self.model)
        for name in ("iterations", "batch_size", "crop_size"):
            if int(getattr(self, name)) <= 0:
                raise ConfigValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ConfigValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


FULL_SEG_SCALE = dict(iterations=100_000, batch_size=4, learning_rate=1e-4, crop_size=1024)


def full_scale_seg_config(**overrides) -> SegTrainConfig:
    return SegTrainConfig(**{**FULL_SEG_SCALE, **overrides})


# ----------------------------------------------------------------------- metrics


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    """C x C pixel counts; rows are ground truth, columns predictions."""
    gt = np.asarray(gt, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if gt.shape != pred.shape:
        raise ValueError("prediction and ground truth differ in size")
    if gt.size and (gt.max() >= num_classes or pred.max() >= num_classes or min(gt.min(), pred.min()) < 0):
        raise ValueError("class id out of range")
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    per_class_iou: list  # float, or None where IoU is undefined
    miou: float
    pixel_accuracy: float
    arm: str = ""

    @classmethod
    def from_confusion(cls, confusion: np.ndarray, arm: str = "") -> "MetricsReport":
        cm = np.asarray(confusion, dtype=np.int64)
        total = int(cm.sum())
        if total == 0:
            raise ValueError("empty confusion matrix")
        tp = np.diag(cm)
        fp = cm.sum(axis=0) - tp
        fn = cm.sum(axis=1) - tp
        ious = []
        for c in range(cm.shape[0]):
            denom = int(tp[c] + fp[c] + fn[c])
            ious.append(None if denom == 0 else float(tp[c]) / denom)
        defined = [v for v in ious if v is not None]
        return cls(cm, ious, float(np.mean(defined)), float(tp.sum()) / total, arm)

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport.from_confusion(self.confusion + other.confusion, self.arm)

    def to_dict(self) -> dict:
        return {
            "arm": self.arm,
            "miou": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "per_class_iou": self.per_class_iou,
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(np.array(d["confusion"], dtype=np.int64), d["per_class_iou"], d["miou"], d["pixel_accuracy"], d.get("arm", ""))

    def format(self, names: Optional[Sequence[str]] = None) -> str:
        names = names or [f"class{c}" for c in range(len(self.per_class_iou))]
        lines = [f"{'class':<14}{'IoU':>8}"]
        for n, v in zip(names, self.per_class_iou):
            lines.append(f"{n:<14}{'n/a' if v is None else f'{100 * v:.2f}':>8}")
        lines.append(f"{'mIoU':<14}{100 * self.miou:>8.2f}")
        lines.append(f"{'Acc.':<14}{100 * self.pixel_accuracy:>8.2f}")
        return "\n".join(lines)


# --------------------------------------------------------------------- segmenter


def _seg_batch(samples, config: SegTrainConfig, it: int):
    rng = np.random.default_rng([config.seed, 7, it])
    idx = rng.integers(0, len(samples), size=config.batch_size)
    crops = [D.random_crop(samples[i], config.crop_size, rng) for i in idx]
    flips = rng.random(len(crops)) < 0.5
    px = [c.pixels[:, ::-1] if f else c.pixels for c, f in zip(crops, flips)]
    lb = [c.labels[:, ::-1] if f else c.labels for c, f in zip(crops, flips)]
    return images_to_tensor(px), torch.from_numpy(np.stack(lb).astype(np.int64))


def train_segmenter(samples: Sequence[D.LabeledImage], config: SegTrainConfig, num_classes: Optional[int] = None):
    """Train a segmenter from scratch on labeled samples; deterministic given ``config.seed``."""
    if len(samples) == 0:
        raise ValueError("no labeled samples to train on")
    spec = config.model if num_classes is None else replace(config.model, num_classes=num_classes)
    torch.manual_seed(config.seed)
    model = build_segmenter(spec, seed=config.seed * 10 + 5)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    model.train()
    for it in range(config.iterations):
        x, y = _seg_batch(samples, config, it)
        loss = F.cross_entropy(model(x), y)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"segmenter loss is not finite at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    return model


def save_segmenter(model, path: Union[str, Path], config: Optional[SegTrainConfig] = None) -> Path:
    extra = {"config": config.to_dict()} if config is not None else {}
    return save_snapshot(path, "segmenter", {"segmenter": model.spec}, {"segmenter": model}, {}, 0, extra)


def load_segmenter(path: Union[str, Path], num_classes: Optional[int] = None):
    payload = load_snapshot(path, kind="segmenter")
    spec = spec_from_dict(payload["specs"]["segmenter"])
    if num_classes is not None and spec.num_classes != num_classes:
        raise SnapshotError(f"segmenter predicts {spec.num_classes} classes, dataset has {num_classes}")
    model = build_segmenter(spec)
    model.load_state_dict(payload["models"]["segmenter"])
    model.eval()
    return model


def evaluate(segmenter, eval_set: Sequence[D.LabeledImage], num_classes: Optional[int] = None, arm: str = "") -> MetricsReport:
    if len(eval_set) == 0:
        raise ValueError("evaluation set is empty")
    c = num_classes or segmenter.spec.num_classes
    preds = segmenter.predict([s.pixels for s in eval_set])
    cm = np.zeros((c, c), dtype=np.int64)
    for p, s in zip(preds, eval_set):
        cm += confusion_matrix(s.labels, p, c)
    return MetricsReport.from_confusion(cm, arm)


def semantic_preservation_score(adapted: Sequence[D.LabeledImage], oracle) -> float:
    """Pixel accuracy of an oracle target-domain segmenter on adapted images.

    ``adapted`` carries the source labels; ``oracle`` was trained on labeled
    target-style renders.
    """
    if oracle is None:
        raise ValueError("an oracle segmenter is required")
    return evaluate(oracle, adapted).pixel_accuracy


# ---------------------------------------------------------------------- ablation

# Published GTA -> Cityscapes ablation numbers (FCN8s); shown for context only.
REFERENCE_RESULTS = {
    "a": ("Synthetic", 18.23, 60.43),
    "b": ("GAN+Sem.", 29.45, 78.13),
    "c": ("GAN+Sem+weight.", 31.33, 79.85),
    "d": ("Cycle", 29.43, 79.20),
    "e": ("Cycle+sem+weight.", 34.27, 84.48),
}
ARM_ORDER = "abcde"
CELL_RESULT = "result.json"
ORACLE_FILE = "oracle_segmenter.pt"


@dataclass
class CellResult:
    arm: str
    seed: int
    report: MetricsReport
    preservation: Optional[float] = None
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "arm": self.arm,
            "seed": self.seed,
            "report": self.report.to_dict(),
            "preservation": self.preservation,
            "wall_clock_s": self.wall_clock_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellResult":
        return cls(d["arm"], int(d["seed"]), MetricsReport.from_dict(d["report"]), d.get("preservation"), d.get("wall_clock_s", 0.0))


@dataclass
class AblationReport:
    cells: list

    def arms(self) -> list:
        return [a for a in ARM_ORDER if any(c.arm == a for c in self.cells)]

    def for_arm(self, arm: str) -> list:
        return sorted((c for c in self.cells if c.arm == arm), key=lambda c: c.seed)

    def mean_miou(self, arm: str) -> float:
        return float(np.mean([c.report.miou for c in self.for_arm(arm)]))

    def mean_accuracy(self, arm: str) -> float:
        return float(np.mean([c.report.pixel_accuracy for c in self.for_arm(arm)]))

    def format(self) -> str:
        lines = [f"{'Test':<24}{'mIoU':>8}{'Acc.':>8}{'Pres.':>8}   per-seed mIoU / Acc."]
        for arm in self.arms():
            cells = self.for_arm(arm)
            pres = [c.preservation for c in cells if c.preservation is not None]
            pres_txt = f"{100 * np.mean(pres):8.2f}" if pres else f"{'-':>8}"
            seeds = ", ".join(f"s{c.seed}: {100 * c.report.miou:.2f}/{100 * c.report.pixel_accuracy:.2f}" for c in cells)
            name = f"({arm}) {REFERENCE_RESULTS[arm][0]}"
            lines.append(f"{name:<24}{100 * self.mean_miou(arm):8.2f}{100 * self.mean_accuracy(arm):8.2f}{pres_txt}   {seeds}")
        lines.append("")
        lines.append("Reference values, GTA -> Cityscapes at full scale (display only, not reproduced here):")
        for arm in ARM_ORDER:
            name, miou, acc = REFERENCE_RESULTS[arm]
            lines.append(f"  ({arm}) {name:<20} mIoU {miou:6.2f}  Acc. {acc:6.2f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Union[str, Path]) -> dict:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"text": out_dir / "ablation_report.txt", "csv": out_dir / "ablation_report.csv", "json": out_dir / "ablation_report.json"}
        paths["text"].write_text(self.format())
        with paths["csv"].open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["arm", "seed", "miou", "pixel_accuracy", "preservation"])
            for arm in self.arms():
                for c in self.for_arm(arm):
                    writer.writerow([arm, c.seed, f"{c.report.miou:.6f}", f"{c.report.pixel_accuracy:.6f}", "" if c.preservation is None else f"{c.preservation:.6f}"])
                writer.writerow([arm, "mean", f"{self.mean_miou(arm):.6f}", f"{self.mean_accuracy(arm):.6f}", ""])
        paths["json"].write_text(json.dumps({"cells": [c.to_dict() for c in self.cells]}, indent=2) + "\n")
        return paths


def train_oracle(world, config: SegTrainConfig, n: int = 200, path: Optional[Union[str, Path]] = None):
    """Segmenter trained on labeled target-style toy renders (cached at ``path``)."""
    from .toyworld import oracle_set

    if path is not None and Path(path).is_file():
        return load_segmenter(path, world.spec.num_classes)
    model = train_segmenter(oracle_set(world, n), replace(config, seed=0), world.spec.num_classes)
    if path is not None:
        save_segmenter(model, path, config)
    return model


def run_cell(dataset_root, arm: str, seed: int, gan_config, seg_config: SegTrainConfig, cell_dir, oracle_path=None) -> CellResult:
    """One ablation cell: translate (unless arm 'a'), adapt, train a segmenter, evaluate.

    A finished cell leaves ``result.json`` and is not recomputed.
    """
    from .trainer import adapt_dataset, train

    cell_dir = Path(cell_dir)
    done = cell_dir / CELL_RESULT
    if done.is_file():
        return CellResult.from_dict(json.loads(done.read_text()))
    t0 = time.time()
    dataset = D.load_dataset(dataset_root)
    if dataset.target_eval is None:
        raise ValueError("ablation needs a target_eval split")
    training_set = dataset
    if arm != "a":
        cfg = replace(gan_config, ablation_arm=arm, seed=seed)
        result = train(cfg, dataset, cell_dir / "gan")
        training_set = adapt_dataset(result.state.system.g_st, dataset, "S->T", cell_dir / "adapted")
    seg = train_segmenter(training_set.source, replace(seg_config, seed=seed), dataset.catalog.num_classes)
    save_segmenter(seg, cell_dir / "segmenter.pt", seg_config)
    report = evaluate(seg, dataset.target_eval, arm=arm)
    preservation = None
    if oracle_path is not None:
        preservation = semantic_preservation_score(training_set.source, load_segmenter(oracle_path))
    cell = CellResult(arm, seed, report, preservation, time.time() - t0)
    cell_dir.mkdir(parents=True, exist_ok=True)
    done.write_text(json.dumps(cell.to_dict(), indent=2) + "\n")
    log.info("cell arm=%s seed=%d: mIoU %.2f acc %.2f", arm, seed, 100 * report.miou, 100 * report.pixel_accuracy)
    return cell


def _run_cell_worker(args):
    torch.set_num_threads(1)
    return run_cell(*args)


def run_ablation(
    dataset_root: Union[str, Path],
    arms: Sequence[str],
    seeds: Sequence[int],
    gan_config,
    seg_config: SegTrainConfig,
    out_dir: Union[str, Path],
    jobs: int = 1,
    preservation: bool = True,
) -> AblationReport:
    """Run every arm x seed cell and write a Table-II-shaped report into ``out_dir``."""
    from .toyworld import TOYWORLD_FILE, ToyWorld

    bad = set(arms) - set(ARM_ORDER)
    arms = [a for a in ARM_ORDER if a in set(arms)]
    if not arms or bad:
        raise ConfigValueError(f"arms must be a non-empty subset of {ARM_ORDER}, got {sorted(set(arms) | bad)}")
    if not seeds:
        raise ConfigValueError("at least one seed is required")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    oracle_path = None
    if preservation and (Path(dataset_root) / TOYWORLD_FILE).is_file():
        oracle_path = out_dir / ORACLE_FILE
        train_oracle(ToyWorld.load(dataset_root), seg_config, path=oracle_path)
    tasks = [
        (str(dataset_root), arm, int(seed), gan_config, seg_config, out_dir / f"arm_{arm}" / f"seed_{seed}", oracle_path)
        for arm in arms
        for seed in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell_worker, tasks))
    else:
        cells = [run_cell(*t) for t in tasks]
    report = AblationReport(cells)
    report.write(out_dir)
    return report
