"""Alternating minimax training of the translation system, and dataset adaptation.

Ablation arms:

    a  no translation (source-only baseline)
    b  one generator S->T, one dual-head discriminator, no reconstruction
    c  b + (1 - w)-weighted L1 between adapted and input source image
    d  full cycle, two plain discriminators, unweighted cycle loss
    e  full cycle, two dual-head discriminators, weighted cycle loss
"""

from __future__ import annotations

import logging
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn

from . import data as D
from .errors import ConfigValueError, NonFiniteLossError, SnapshotError
from .losses import (
    LossBreakdown,
    LossWeights,
    adversarial_value_logits,
    check_finite,
    compose_losses,
    generator_adversarial_logits,
    pixel_cross_entropy,
    source_reconstruction,
)
from .models import (
    DualHeadDiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    images_to_tensor,
    load_snapshot,
    save_snapshot,
    spec_from_dict,
    tensor_to_images,
)
from .runs import JsonlLog, finalize_manifest, write_manifest
from .weighting import compute_class_frequencies

log = logging.getLogger(__name__)

LOG_FILE = "train_log.jsonl"
SNAPSHOT_NAME = "gan_latest.pt"


@dataclass(frozen=True)
class Arm:
    gan: bool = True
    cycle: bool = True
    semantic: bool = True
    weighted: bool = True
    source_rec: bool = True


ARMS = {
    "a": Arm(gan=False, cycle=False, semantic=False, weighted=False, source_rec=False),
    "b": Arm(cycle=False, semantic=True, weighted=False, source_rec=False),
    "c": Arm(cycle=False, semantic=True, weighted=True, source_rec=True),
    "d": Arm(cycle=True, semantic=False, weighted=False, source_rec=True),
    "e": Arm(cycle=True, semantic=True, weighted=True, source_rec=True),
}


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-4
    batch_size: int = 2
    total_steps: int = 2000
    crop_size: int = 64
    seed: int = 0
    ablation_arm: str = "e"
    saturating_adv: bool = False
    log_interval: int = 50
    snapshot_interval: int = 1000
    betas: tuple = (0.5, 0.999)
    d_steps_per_g: int = 1
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DualHeadDiscriminatorSpec = field(default_factory=DualHeadDiscriminatorSpec)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.generator, dict):
            self.generator = GeneratorSpec(**self.generator)
        if isinstance(self.discriminator, dict):
            self.discriminator = DualHeadDiscriminatorSpec(**self.discriminator)
        self.betas = tuple(float(b) for b in self.betas)
        if self.ablation_arm not in ARMS:
            raise ConfigValueError(f"ablation_arm must be one of {sorted(ARMS)}, got {self.ablation_arm!r}")
        for name in ("batch_size", "total_steps", "crop_size", "log_interval", "snapshot_interval", "d_steps_per_g"):
            if int(getattr(self, name)) <= 0:
                raise ConfigValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ConfigValueError("learning_rate must be positive")

    @property
    def arm(self) -> Arm:
        return ARMS[self.ablation_arm]

    def effective_weights(self) -> LossWeights:
        """Loss weights after the arm's switches are applied."""
        arm = self.arm
        return LossWeights(
            lambda_sem=self.weights.lambda_sem if arm.semantic else 0.0,
            lambda_rec=self.weights.lambda_rec if (arm.cycle or arm.source_rec) else 0.0,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


FULL_SCALE = dict(learning_rate=1e-4, batch_size=2, total_steps=300_000, crop_size=512)


def full_scale_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**FULL_SCALE, **overrides})


# ------------------------------------------------------------------------ system


class TranslationSystem(nn.Module):
    """Generators and discriminators of one arm; absent parts are ``None``."""

    def __init__(self, config: TrainConfig, num_classes: int):
        super().__init__()
        arm = config.arm
        if not arm.gan:
            raise ConfigValueError("arm 'a' trains no translation system")
        seed = config.seed
        dspec = replace(config.discriminator, num_classes=num_classes, semantic_head=arm.semantic)
        self.gspec, self.dspec = config.generator, dspec
        self.g_st = build_generator(config.generator, seed * 10 + 1)
        self.d_t = build_discriminator(dspec, seed * 10 + 2)
        self.g_ts = build_generator(config.generator, seed * 10 + 3) if arm.cycle else None
        self.d_s = build_discriminator(dspec, seed * 10 + 4) if arm.cycle else None

    def generators(self):
        return [m for m in (self.g_st, self.g_ts) if m is not None]

    def discriminators(self):
        return [m for m in (self.d_t, self.d_s) if m is not None]

    def generator_parameters(self):
        return [p for m in self.generators() for p in m.parameters()]

    def discriminator_parameters(self):
        return [p for m in self.discriminators() for p in m.parameters()]

    def specs(self) -> dict:
        out = {"g_st": self.gspec, "d_t": self.dspec}
        if self.g_ts is not None:
            out.update(g_ts=self.gspec, d_s=self.dspec)
        return out

    def named_models(self) -> dict:
        return {k: getattr(self, k) for k in self.specs()}


@dataclass
class Batch:
    x_s: torch.Tensor  # N x 3 x H x W, [-1, 1]
    y_s: torch.Tensor  # N x H x W int64
    w: torch.Tensor  # N x H x W class-frequency mask
    x_t: torch.Tensor


def make_batch(source_crops, target_crops, catalog: D.ClassCatalog, dtype=torch.float32, zero_weights=False) -> Batch:
    labels = np.stack([s.labels for s in source_crops]).astype(np.int64)
    if zero_weights:
        w = np.zeros(labels.shape)
    else:
        w = catalog.frequencies[labels]
    return Batch(
        images_to_tensor([s.pixels for s in source_crops], dtype),
        torch.from_numpy(labels),
        torch.from_numpy(w).to(dtype),
        images_to_tensor([t.pixels for t in target_crops], dtype),
    )


def _epoch_order(seed: int, stream: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, stream, epoch]).permutation(n)


def sample_indices(seed: int, stream: int, step: int, batch_size: int, n: int) -> list:
    """Indices for ``step`` under per-epoch seeded shuffling; a pure function of its arguments."""
    out = []
    for k in range(step * batch_size, (step + 1) * batch_size):
        epoch, pos = divmod(k, n)
        out.append(int(_epoch_order(seed, stream, epoch, n)[pos]))
    return out


def batch_for_step(dataset: D.DomainPairDataset, config: TrainConfig, step: int) -> Batch:
    src_idx = sample_indices(config.seed, 0, step, config.batch_size, len(dataset.source))
    tgt_idx = sample_indices(config.seed, 1, step, config.batch_size, len(dataset.target))
    rng = np.random.default_rng([config.seed, 2, step])
    src = [D.random_crop(dataset.source[i], config.crop_size, rng) for i in src_idx]
    tgt = [D.random_crop(dataset.target[i], config.crop_size, rng) for i in tgt_idx]
    return make_batch(src, tgt, dataset.catalog, zero_weights=not config.arm.weighted)


# ------------------------------------------------------------------------ losses


def generate(system: TranslationSystem, batch: Batch, arm: Arm) -> dict:
    """Forward both generators: adapted images and cycle reconstructions."""
    out = {"fake_t": system.g_st(batch.x_s)}
    if arm.cycle:
        out["fake_s"] = system.g_ts(batch.x_t)
        out["cyc_s"] = system.g_ts(out["fake_t"])
        out["cyc_t"] = system.g_st(out["fake_s"])
    return out


def reconstruction_term(fakes: dict, batch: Batch, arm: Arm) -> torch.Tensor:
    if arm.cycle:
        return source_reconstruction(fakes["cyc_s"], batch.x_s, batch.w) + (fakes["cyc_t"] - batch.x_t).abs().mean()
    if arm.source_rec:
        return source_reconstruction(fakes["fake_t"], batch.x_s, batch.w)
    return batch.x_s.new_zeros(())


def _named(term, fn, *args):
    try:
        return fn(*args)
    except NonFiniteLossError:
        raise NonFiniteLossError(term) from None


def discriminator_terms(system: TranslationSystem, batch: Batch, fakes: dict, arm: Arm, detach: bool) -> dict:
    """Adversarial values and semantic cross entropies, as differentiable tensors.

    Score maps are kept as logits (``*_score`` entries) for stable log terms.

    With ``detach`` the generator outputs are cut from the graph, so only
    discriminator parameters receive gradient.
    """
    cut = (lambda t: t.detach()) if detach else (lambda t: t)
    fake_t = cut(fakes["fake_t"])
    zero = batch.x_s.new_zeros(())
    real_t_score, _ = system.d_t.logits(batch.x_t)
    fake_t_score, fake_t_seg = system.d_t.logits(fake_t)
    terms = {
        "adv_st": _named("adv_st", adversarial_value_logits, real_t_score, fake_t_score),
        "g_adv_st_score": fake_t_score,
        "sem_st": pixel_cross_entropy(fake_t_seg, batch.y_s) if arm.semantic else zero,
        "adv_ts": zero,
        "sem_ts": zero,
    }
    if arm.cycle:
        fake_s = cut(fakes["fake_s"])
        real_s_score, real_s_seg = system.d_s.logits(batch.x_s)
        fake_s_score, _ = system.d_s.logits(fake_s)
        terms["adv_ts"] = _named("adv_ts", adversarial_value_logits, real_s_score, fake_s_score)
        terms["g_adv_ts_score"] = fake_s_score
        if arm.semantic:
            terms["sem_ts"] = pixel_cross_entropy(real_s_seg, batch.y_s)
    return terms


def system_losses(system: TranslationSystem, batch: Batch, config: TrainConfig, detach_fakes: bool = False) -> dict:
    """Every loss part plus the composed totals at the current parameters.

    Returns tensors: the five parts, ``adv``/``sem``/``rec``, ``L_D``/``L_G``
    (the composed totals), ``g_adv`` and ``G_objective`` (what the generator
    step minimizes; equals ``L_G`` under the saturating form).
    """
    arm, weights = config.arm, config.effective_weights()
    fakes = generate(system, batch, arm)
    terms = discriminator_terms(system, batch, fakes, arm, detach_fakes)
    rec = reconstruction_term(fakes, batch, arm)
    adv = terms["adv_st"] + terms["adv_ts"]
    sem = terms["sem_st"] + terms["sem_ts"]
    l_d, l_g = compose_losses(adv, sem, rec, weights)
    g_adv = generator_adversarial_logits(terms["g_adv_st_score"], config.saturating_adv)
    if arm.cycle:
        g_adv = g_adv + generator_adversarial_logits(terms["g_adv_ts_score"], config.saturating_adv)
    out = {k: terms[k] for k in ("adv_st", "adv_ts", "sem_st", "sem_ts")}
    out.update(
        adv=adv, sem=sem, rec=rec, L_D=l_d, L_G=l_g, g_adv=g_adv,
        G_objective=g_adv + weights.lambda_sem * sem + weights.lambda_rec * rec,
        fakes=fakes,
    )
    return out


# --------------------------------------------------------------------- training


class TrainState:
    """Models, optimizers and step counter of one training run."""

    def __init__(self, config: TrainConfig, num_classes: int):
        self.config = config
        torch.manual_seed(config.seed)
        self.system = TranslationSystem(config, num_classes)
        self.opt_g = torch.optim.Adam(self.system.generator_parameters(), lr=config.learning_rate, betas=config.betas)
        self.opt_d = torch.optim.Adam(self.system.discriminator_parameters(), lr=config.learning_rate, betas=config.betas)
        self.step = 0

    def save(self, path: Union[str, Path], extra: Optional[dict] = None) -> Path:
        extra = {"config": self.config.to_dict(), **(extra or {})}
        return save_snapshot(
            path, "gan", self.system.specs(), self.system.named_models(),
            {"opt_g": self.opt_g, "opt_d": self.opt_d}, self.step, extra,
        )

    @classmethod
    def load(cls, path: Union[str, Path], config: Optional[TrainConfig] = None, num_classes: Optional[int] = None) -> "TrainState":
        payload = load_snapshot(path, kind="gan")
        stored = TrainConfig.from_dict(payload["extra"]["config"])
        config = config or stored
        nc = num_classes or payload["specs"]["d_t"]["num_classes"]
        state = cls(config, nc)
        load_snapshot(path, kind="gan", expect_specs=state.system.specs())
        for name, module in state.system.named_models().items():
            module.load_state_dict(payload["models"][name])
        state.opt_g.load_state_dict(payload["optimizers"]["opt_g"])
        state.opt_d.load_state_dict(payload["optimizers"]["opt_d"])
        torch.set_rng_state(payload["torch_rng"])
        state.step = int(payload["step"])
        return state


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def train_step(state: TrainState, batch: Batch) -> LossBreakdown:
    """One discriminator update followed by one generator update.

    The returned breakdown is evaluated at the parameters held at the start
    of the step; its totals are the composed ``L_D`` and ``L_G``.
    """
    config, system = state.config, state.system
    arm, weights = config.arm, config.effective_weights()
    step = state.step + 1

    fakes = generate(system, batch, arm)
    rec = reconstruction_term(fakes, batch, arm)
    check_finite("rec", rec, step)

    # discriminator update(s) on detached generator outputs
    breakdown = None
    for k in range(config.d_steps_per_g):
        try:
            terms = discriminator_terms(system, batch, fakes, arm, detach=True)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(exc.term, step) from None
        for name in ("adv_st", "adv_ts", "sem_st", "sem_ts"):
            check_finite(name, terms[name], step)
        adv = terms["adv_st"] + terms["adv_ts"]
        sem = terms["sem_st"] + terms["sem_ts"]
        l_d, _ = compose_losses(adv, sem, rec.detach(), weights)
        if k == 0:
            breakdown = LossBreakdown(
                adv_st=terms["adv_st"].item(), adv_ts=terms["adv_ts"].item(),
                sem_st=terms["sem_st"].item(), sem_ts=terms["sem_ts"].item(), rec=rec.item(),
            )
            breakdown.total_d, breakdown.total_g = breakdown.recomposed(weights)
        state.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        state.opt_d.step()

    # generator update against the freshly updated, frozen discriminators
    _set_requires_grad(system.discriminators(), False)
    try:
        try:
            terms = discriminator_terms(system, batch, fakes, arm, detach=False)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(exc.term, step) from None
        g_adv = generator_adversarial_logits(terms["g_adv_st_score"], config.saturating_adv)
        if arm.cycle:
            g_adv = g_adv + generator_adversarial_logits(terms["g_adv_ts_score"], config.saturating_adv)
        check_finite("g_adv", g_adv, step)
        # sem_ts has no generator dependence and is left out
        objective = g_adv + weights.lambda_sem * terms["sem_st"] + weights.lambda_rec * rec
        state.opt_g.zero_grad(set_to_none=True)
        objective.backward()
        state.opt_g.step()
    finally:
        _set_requires_grad(system.discriminators(), True)

    breakdown.g_adv = g_adv.item()
    state.step = step
    return breakdown


@dataclass
class TrainResult:
    state: Optional[TrainState]
    records: list
    snapshot: Optional[Path]
    catalog: D.ClassCatalog


def ensure_frequencies(dataset: D.DomainPairDataset) -> D.DomainPairDataset:
    if dataset.catalog.has_frequencies:
        return dataset
    return dataset.with_catalog(compute_class_frequencies(dataset.source, dataset.catalog))


def train(
    config: TrainConfig,
    dataset: D.DomainPairDataset,
    run_dir: Optional[Union[str, Path]] = None,
    resume: bool = True,
    stop_at: Optional[int] = None,
    manifest_config=None,
) -> TrainResult:
    """Run ``config.total_steps`` training steps (or up to ``stop_at``).

    With a ``run_dir`` the manifest, a JSON-lines loss log and snapshots are
    written there, and an existing ``snapshots/gan_latest.pt`` is resumed.
    ``manifest_config`` replaces ``config`` in the manifest (the CLI records
    its full merged configuration there).
    """
    dataset = ensure_frequencies(dataset)
    if not config.arm.gan:
        log.info("arm 'a': no translation training")
        return TrainResult(None, [], None, dataset.catalog)
    run_dir = Path(run_dir) if run_dir is not None else None
    snap_path = run_dir / "snapshots" / SNAPSHOT_NAME if run_dir else None
    log_path = run_dir / LOG_FILE if run_dir else None

    if snap_path is not None and resume and snap_path.is_file():
        state = TrainState.load(snap_path, config, dataset.catalog.num_classes)
        log.info("resuming from %s at step %d", snap_path, state.step)
    else:
        state = TrainState(config, dataset.catalog.num_classes)
        if log_path is not None and log_path.exists():
            log_path.unlink()
    if run_dir is not None:
        write_manifest(
            run_dir, "train-gan", config if manifest_config is None else manifest_config,
            dataset_root=dataset.root,
            dataset_fingerprint=D.fingerprint(dataset.root) if dataset.root else None,
            class_frequencies=dataset.catalog.frequencies.tolist(),
            resumed_from_step=state.step,
        )
    runlog = JsonlLog(log_path)
    runlog.truncate_after(state.step)

    last = min(config.total_steps, stop_at) if stop_at is not None else config.total_steps
    t0 = time.time()
    try:
        while state.step < last:
            batch = batch_for_step(dataset, config, state.step)
            bd = train_step(state, batch)
            if state.step % config.log_interval == 0 or state.step == config.total_steps:
                runlog.append({"step": state.step, **bd.to_dict(), "wall_clock_s": time.time() - t0})
            if snap_path is not None and state.step % config.snapshot_interval == 0:
                state.save(snap_path)
    except NonFiniteLossError:
        if run_dir is not None:
            finalize_manifest(run_dir, status="failed")
        raise
    if snap_path is not None:
        state.save(snap_path)
        if state.step == config.total_steps:
            finalize_manifest(run_dir, snapshot=str(snap_path), steps=state.step)
    return TrainResult(state, runlog.records, snap_path, dataset.catalog)


# -------------------------------------------------------------------- adaptation


@torch.no_grad()
def translate(generator: nn.Module, pixels, batch_size: int = 8) -> list:
    """Run a generator on H x W x 3 arrays in [0, 1]; returns arrays quantized to 8 bits."""
    generator.eval()
    out = []
    dtype = next(generator.parameters()).dtype
    for i in range(0, len(pixels), batch_size):
        y = tensor_to_images(generator(images_to_tensor(pixels[i:i + batch_size], dtype)))
        out.extend(np.round(y * 255.0) / 255.0)
    generator.train()
    return [o.astype(np.float32) for o in out]


def load_generator(snapshot: Union[str, Path], direction: str = "S->T") -> nn.Module:
    name = {"S->T": "g_st", "T->S": "g_ts"}.get(direction.replace("→", "->"))
    if name is None:
        raise ValueError(f"direction must be 'S->T' or 'T->S', got {direction!r}")
    payload = load_snapshot(snapshot, kind="gan")
    if name not in payload["specs"]:
        raise SnapshotError(f"snapshot has no {direction} generator (single-direction arm)")
    g = build_generator(spec_from_dict(payload["specs"][name]))
    g.load_state_dict(payload["models"][name])
    return g


def adapt_dataset(
    snapshot,
    dataset: D.DomainPairDataset,
    direction: str = "S->T",
    out_root: Optional[Union[str, Path]] = None,
) -> D.DomainPairDataset:
    """Translate one domain of ``dataset`` with a trained generator.

    ``snapshot`` is a snapshot path or a generator module. For ``S->T`` each
    source image is replaced by its translation and labels pass through
    unchanged; for ``T->S`` the target images are translated. When
    ``out_root`` is given the result is written there, label files copied
    byte for byte from the input dataset when it lives on disk.
    """
    generator = snapshot if isinstance(snapshot, nn.Module) else load_generator(snapshot, direction)
    stages = generator.spec.downsampling_stages
    if direction.replace("→", "->") == "S->T":
        samples = dataset.source
        for s in samples:
            h, w = s.shape
            if h % 2 ** stages or w % 2 ** stages:
                raise ValueError(f"{s.id}: size {h}x{w} not divisible by {2 ** stages}; pad images before adapting")
        pixels = translate(generator, [s.pixels for s in samples])
        adapted = dataset.with_source(D.LabeledImage(p, s.labels, s.id) for p, s in zip(pixels, samples))
    else:
        pixels = translate(generator, [t.pixels for t in dataset.target])
        adapted = D.DomainPairDataset(
            dataset.source, [D.UnlabeledImage(p, t.id) for p, t in zip(pixels, dataset.target)],
            dataset.catalog, dataset.target_eval,
        )
    if out_root is not None:
        out_root = Path(out_root)
        D.save_dataset(adapted, out_root)
        if dataset.root:
            src_root = Path(dataset.root)
            for s in dataset.source:
                src = src_root / "source" / "labels" / f"{s.id}.png"
                if src.is_file():
                    shutil.copyfile(src, out_root / "source" / "labels" / f"{s.id}.png")
            extra = src_root / "toyworld.json"
            if extra.is_file():
                shutil.copyfile(extra, out_root / "toyworld.json")
        adapted = replace(adapted, root=str(out_root))
    return adapted
