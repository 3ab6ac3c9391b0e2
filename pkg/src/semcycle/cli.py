"""Command-line entry point: ``semcycle <subcommand> [flags]``.

One config file (YAML or JSON) holds per-subcommand sections::

    data:  {image_size: 64, num_classes: 5, n_source: 200, ...}
    gan:   {total_steps: 2000, learning_rate: 2e-4, generator: {base_channels: 16}, ...}
    seg:   {iterations: 2000, crop_size: 32, model: {base_channels: 16}, ...}

Flags override file values; the merged result is what the run manifest
records. A manifest.json from an earlier run is accepted as a config file.
Failures print one line ``error: <category>: <message>`` and exit non-zero.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .errors import ConfigNotFoundError, ConfigValueError, MissingInputError, SemCycleError

log = logging.getLogger("semcycle")

SUBCOMMANDS = ("generate-data", "train-gan", "adapt", "train-seg", "evaluate", "ablate", "plot")

EXIT_CODES = {
    "usage": 2,
    "config-not-found": 3,
    "config-invalid": 4,
    "missing-input": 5,
    "dataset-structure": 6,
    "dataset-invalid": 7,
    "snapshot-invalid": 8,
    "spec-mismatch": 8,
    "non-finite-loss": 9,
    "invalid-value": 10,
    "internal": 1,
}


class UsageError(SemCycleError):
    category = "usage"


@dataclasses.dataclass
class DataConfig:
    image_size: int = 64
    num_classes: int = 5
    shape_count_range: tuple = (3, 8)
    class_frequency_skew: float = 2.0
    seed: int = 0
    n_source: int = 200
    n_target: int = 200
    n_eval: int = 50


# --------------------------------------------------------------------- config


def _section_classes():
    from .segeval import SegTrainConfig
    from .trainer import TrainConfig

    return {"data": DataConfig, "gan": TrainConfig, "seg": SegTrainConfig}


def load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigNotFoundError(f"config file {path} not found")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigValueError(f"{path}: not valid YAML/JSON ({str(exc).splitlines()[0]})") from None
    if not isinstance(doc, dict):
        raise ConfigValueError(f"{path}: top level must be a mapping")
    if "config" in doc and "command" in doc:  # a run manifest
        doc = doc["config"]
    unknown = set(doc) - set(_section_classes()) - {"ablate"}
    if unknown:
        raise ConfigValueError(f"{path}: unknown sections {sorted(unknown)}")
    return doc


def _leaf_fields(cls, prefix=()):
    """(path, default) for every scalar or tuple field, recursing into nested dataclasses."""
    inst = cls()
    for f in dataclasses.fields(cls):
        value = getattr(inst, f.name)
        if dataclasses.is_dataclass(value):
            yield from _leaf_fields(type(value), prefix + (f.name,))
        else:
            yield prefix + (f.name,), value


def _flag(path, prefix=""):
    return "--" + prefix + "-".join(p.replace("_", "-") for p in path)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def add_override_flags(parser, cls, dest_prefix: str, flag_prefix: str = "", skip=()):
    group = parser.add_argument_group(f"{dest_prefix} overrides")
    for path, default in _leaf_fields(cls):
        if path[0] in skip:
            continue
        dest = "ov__" + dest_prefix + "__" + "__".join(path)
        kw = dict(dest=dest, default=None, help=f"default {default}")
        if isinstance(default, bool):
            kw.update(type=_parse_bool, metavar="BOOL")
        elif isinstance(default, tuple):
            kw.update(type=type(default[0]), nargs=len(default), metavar="V")
        else:
            kw.update(type=type(default), metavar=type(default).__name__.upper())
        group.add_argument(_flag(path, flag_prefix), **kw)


def _set_path(d: dict, path, value):
    for key in path[:-1]:
        node = d.get(key)
        if node is None:
            node = d[key] = {}
        elif not isinstance(node, dict):
            raise ConfigValueError(f"{'.'.join(path)}: {key} is not a section")
        d = node
    d[path[-1]] = list(value) if isinstance(value, list) else value


def merged_section(doc: dict, args, section: str) -> dict:
    out = copy.deepcopy(doc.get(section) or {})
    if not isinstance(out, dict):
        raise ConfigValueError(f"section {section!r} must be a mapping")
    prefix = f"ov__{section}__"
    for dest, value in vars(args).items():
        if dest.startswith(prefix) and value is not None:
            _set_path(out, dest[len(prefix):].split("__"), value)
    return out


def build_section(section: str, values: dict):
    cls = _section_classes()[section]
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigValueError(f"section {section!r}: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, SemCycleError):
            raise
        raise ConfigValueError(f"section {section!r}: {exc}") from None


def resolve_section(doc, args, section, seed_override=None):
    values = merged_section(doc, args, section)
    if seed_override is not None:
        values["seed"] = seed_override
    return build_section(section, values)


# ---------------------------------------------------------------- run folders


def resolve_run_dir(args, command: str) -> Path:
    from .runs import default_run_root

    if args.run_dir:
        return Path(args.run_dir)
    base = default_run_root() / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    path, k = base, 1
    while path.exists():
        path, k = Path(f"{base}-{k}"), k + 1
    return path


def _existing(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{what} path {p} does not exist")
    return p


def _snapshot_file(path, default_name: str, what: str) -> Path:
    p = _existing(path, what)
    if p.is_dir():
        for cand in (p / default_name, p / "snapshots" / default_name):
            if cand.is_file():
                return cand
        raise MissingInputError(f"no {default_name} under {p}")
    return p


def _config_dict(obj):
    return obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)


# ----------------------------------------------------------------- commands


def cmd_generate_data(args, doc):
    from . import toyworld as T
    from .runs import finalize_manifest, write_manifest

    cfg = resolve_section(doc, args, "data", args.seed)
    spec = T.SceneSpec(cfg.image_size, cfg.num_classes, tuple(cfg.shape_count_range), cfg.class_frequency_skew, cfg.seed)
    world = T.ToyWorld(spec)
    run_dir = resolve_run_dir(args, "generate-data")
    out = Path(args.out) if args.out else run_dir / "dataset"
    write_manifest(run_dir, "generate-data", {"data": _config_dict(cfg)}, output=out, toyworld=world.to_dict())
    T.generate_dataset(spec, world.source_style, world.target_style, cfg.n_source, cfg.n_target, cfg.n_eval, out)
    from .data import fingerprint

    finalize_manifest(run_dir, dataset_fingerprint=fingerprint(out))
    print(out)


def cmd_train_gan(args, doc):
    from . import data as D
    from .runs import write_manifest
    from .trainer import train

    cfg = resolve_section(doc, args, "gan", args.seed)
    data_root = _existing(args.data, "data")
    run_dir = resolve_run_dir(args, "train-gan")
    full = {"gan": cfg.to_dict()}
    write_manifest(run_dir, "train-gan", full, dataset_root=data_root)
    dataset = D.load_dataset(data_root, workers=args.jobs)
    result = train(cfg, dataset, run_dir, resume=not args.no_resume, manifest_config=full)
    print(result.snapshot if result.snapshot else "arm 'a': nothing to train")


def cmd_adapt(args, doc):
    from . import data as D
    from .runs import finalize_manifest, write_manifest
    from .trainer import SNAPSHOT_NAME, adapt_dataset

    snap = _snapshot_file(args.snapshot, SNAPSHOT_NAME, "snapshot")
    data_root = _existing(args.data, "data")
    run_dir = resolve_run_dir(args, "adapt")
    out = Path(args.out) if args.out else run_dir / "adapted"
    write_manifest(run_dir, "adapt", {"direction": args.direction}, snapshot=snap, dataset_root=data_root, output=out)
    adapt_dataset(snap, D.load_dataset(data_root, workers=args.jobs), args.direction, out)
    finalize_manifest(run_dir, dataset_fingerprint=D.fingerprint(out))
    print(out)


def cmd_train_seg(args, doc):
    from . import data as D
    from .runs import finalize_manifest, write_manifest
    from .segeval import save_segmenter, train_segmenter

    cfg = resolve_section(doc, args, "seg", args.seed)
    data_root = _existing(args.data, "data")
    run_dir = resolve_run_dir(args, "train-seg")
    write_manifest(run_dir, "train-seg", {"seg": cfg.to_dict()}, dataset_root=data_root)
    dataset = D.load_dataset(data_root, workers=args.jobs, load_eval=False)
    model = train_segmenter(dataset.source, cfg, dataset.catalog.num_classes)
    path = save_segmenter(model, run_dir / "segmenter.pt", cfg)
    finalize_manifest(run_dir, segmenter=path, dataset_fingerprint=D.fingerprint(data_root))
    print(path)


def write_metrics_report(report, names, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"text": out_dir / "report.txt", "csv": out_dir / "report.csv", "json": out_dir / "report.json"}
    paths["text"].write_text(report.format(names) + "\n")
    rows = ["class,iou"] + [f"{n},{'' if v is None else f'{v:.6f}'}" for n, v in zip(names, report.per_class_iou)]
    rows += [f"mIoU,{report.miou:.6f}", f"accuracy,{report.pixel_accuracy:.6f}"]
    paths["csv"].write_text("\n".join(rows) + "\n")
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return paths


def cmd_evaluate(args, doc):
    from . import data as D
    from .runs import finalize_manifest, write_manifest
    from .segeval import evaluate, load_segmenter

    seg_path = _snapshot_file(args.segmenter, "segmenter.pt", "segmenter")
    data_root = _existing(args.data, "data")
    run_dir = resolve_run_dir(args, "evaluate")
    write_manifest(run_dir, "evaluate", {"arm": args.arm}, segmenter=seg_path, dataset_root=data_root)
    dataset = D.load_dataset(data_root, workers=args.jobs)
    if not dataset.target_eval:
        raise MissingInputError(f"{data_root} has no target_eval split")
    report = evaluate(load_segmenter(seg_path, dataset.catalog.num_classes), dataset.target_eval, arm=args.arm)
    write_metrics_report(report, dataset.catalog.names, run_dir)
    finalize_manifest(run_dir, miou=report.miou, pixel_accuracy=report.pixel_accuracy)
    print(report.format(dataset.catalog.names))


def _parse_arms(text: str) -> list:
    from .segeval import ARM_ORDER

    arms = [a.strip() for a in text.split(",") if a.strip()]
    bad = [a for a in arms if a not in ARM_ORDER]
    if not arms or bad:
        raise ConfigValueError(f"--arms must list arms from {','.join(ARM_ORDER)}, got {text!r}")
    return arms


def _parse_seeds(text: str) -> list:
    try:
        if "," in text:
            return [int(s) for s in text.split(",") if s.strip()]
        n = int(text)
    except ValueError:
        raise ConfigValueError(f"--seeds takes a count or a comma list, got {text!r}") from None
    if n <= 0:
        raise ConfigValueError("--seeds must be positive")
    return list(range(n))


def cmd_ablate(args, doc):
    from . import toyworld as T
    from .runs import finalize_manifest, write_manifest
    from .segeval import run_ablation

    section = doc.get("ablate") or {}
    arms = _parse_arms(args.arms or ",".join(section.get("arms", ["a", "b", "c", "d", "e"])))
    seeds = _parse_seeds(args.seeds or str(section.get("seeds", 1)))
    if args.seed is not None:
        seeds = [args.seed + s for s in seeds]
    gan = resolve_section(doc, args, "gan")
    seg = resolve_section(doc, args, "seg")
    data = resolve_section(doc, args, "data")
    run_dir = resolve_run_dir(args, "ablate")
    full = {"data": _config_dict(data), "gan": gan.to_dict(), "seg": seg.to_dict(), "ablate": {"arms": arms, "seeds": seeds}}
    write_manifest(run_dir, "ablate", full, jobs=args.jobs)
    if args.data:
        data_root = _existing(args.data, "data")
    else:
        data_root = run_dir / "dataset"
        if not (data_root / T.TOYWORLD_FILE).is_file():
            spec = T.SceneSpec(data.image_size, data.num_classes, tuple(data.shape_count_range), data.class_frequency_skew, data.seed)
            world = T.ToyWorld(spec)
            T.generate_dataset(spec, world.source_style, world.target_style, data.n_source, data.n_target, data.n_eval, data_root)
    report = run_ablation(data_root, arms, seeds, gan, seg, run_dir, jobs=args.jobs, preservation=not args.no_preservation)
    finalize_manifest(run_dir, dataset_root=data_root, means={a: {"miou": report.mean_miou(a), "accuracy": report.mean_accuracy(a)} for a in report.arms()})
    print(report.format())


def cmd_plot(args, doc):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .runs import read_jsonl, write_manifest
    from .segeval import AblationReport, CellResult

    if not args.log and not args.report:
        raise UsageError("plot needs --log and/or --report")
    run_dir = resolve_run_dir(args, "plot")
    write_manifest(run_dir, "plot", {}, logs=args.log or [], report=args.report)
    written = []
    if args.log:
        keys = ("adv_st", "adv_ts", "sem_st", "sem_ts", "rec", "total_d", "total_g")
        fig, axes = plt.subplots(len(keys), 1, figsize=(7, 2 * len(keys)), sharex=True)
        for item in args.log:
            p = Path(item)
            p = p / "train_log.jsonl" if p.is_dir() else p
            records = read_jsonl(_existing(p, "log"))
            steps = [r["step"] for r in records]
            for ax, key in zip(axes, keys):
                ax.plot(steps, [r[key] for r in records], label=p.parent.name)
                ax.set_ylabel(key)
        axes[-1].set_xlabel("step")
        axes[0].legend(fontsize="small")
        fig.tight_layout()
        out = run_dir / "loss_curves.png"
        fig.savefig(out, dpi=100)
        plt.close(fig)
        written.append(out)
    if args.report:
        p = Path(args.report)
        p = p / "ablation_report.json" if p.is_dir() else p
        cells = [CellResult.from_dict(c) for c in json.loads(_existing(p, "report").read_text())["cells"]]
        report = AblationReport(cells)
        arms = report.arms()
        fig, ax = plt.subplots(figsize=(6, 3.5))
        xs = range(len(arms))
        ax.bar([x - 0.2 for x in xs], [100 * report.mean_miou(a) for a in arms], 0.4, label="mIoU")
        ax.bar([x + 0.2 for x in xs], [100 * report.mean_accuracy(a) for a in arms], 0.4, label="Acc.")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([f"({a})" for a in arms])
        ax.set_ylabel("%")
        ax.legend()
        fig.tight_layout()
        out = run_dir / "ablation_bars.png"
        fig.savefig(out, dpi=100)
        plt.close(fig)
        written.append(out)
    from .runs import finalize_manifest

    finalize_manifest(run_dir, outputs=written)
    for w in written:
        print(w)


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train-gan": cmd_train_gan,
    "adapt": cmd_adapt,
    "train-seg": cmd_train_seg,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


# ------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    from .segeval import SegTrainConfig
    from .trainer import TrainConfig

    parser = _Parser(prog="semcycle", description="Semantics-aware cycle-consistent domain translation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="YAML or JSON config file with data/gan/seg sections")
        p.add_argument("--run-dir", help="output directory (default: $SEMCYCLE_RUN_ROOT/<command>-<time>)")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, default=1, help="worker count for I/O or ablation cells")
        return p

    p = common(sub.add_parser("generate-data", help="write a toy-world domain pair"))
    p.add_argument("--out", help="dataset directory (default: <run-dir>/dataset)")
    add_override_flags(p, DataConfig, "data", skip=("seed",))

    p = common(sub.add_parser("train-gan", help="train the translation networks"))
    p.add_argument("--data", help="dataset root")
    p.add_argument("--no-resume", action="store_true", help="ignore an existing snapshot in the run directory")
    add_override_flags(p, TrainConfig, "gan", skip=("seed",))

    p = common(sub.add_parser("adapt", help="translate a dataset with a trained generator"))
    p.add_argument("--snapshot", help="GAN snapshot file or train-gan run directory")
    p.add_argument("--data", help="dataset root")
    p.add_argument("--direction", default="S->T", choices=["S->T", "T->S"])
    p.add_argument("--out", help="adapted dataset directory (default: <run-dir>/adapted)")

    p = common(sub.add_parser("train-seg", help="train a segmenter on a dataset's labeled source split"))
    p.add_argument("--data", help="dataset root (an adapted dataset for arms b-e)")
    add_override_flags(p, SegTrainConfig, "seg", skip=("seed",))

    p = common(sub.add_parser("evaluate", help="score a segmenter on the target_eval split"))
    p.add_argument("--segmenter", help="segmenter snapshot or train-seg run directory")
    p.add_argument("--data", help="dataset root with a target_eval split")
    p.add_argument("--arm", default="", help="label recorded in the report")

    p = common(sub.add_parser("ablate", help="run arms x seeds and write the ablation table"))
    p.add_argument("--data", help="toy dataset root (default: generate one from the data section)")
    p.add_argument("--arms", help="comma list from a,b,c,d,e")
    p.add_argument("--seeds", help="seed count N (seeds 0..N-1) or a comma list")
    p.add_argument("--no-preservation", action="store_true", help="skip the semantic-preservation oracle")
    add_override_flags(p, TrainConfig, "gan", flag_prefix="gan-", skip=("seed", "ablation_arm"))
    add_override_flags(p, SegTrainConfig, "seg", flag_prefix="seg-", skip=("seed",))

    p = common(sub.add_parser("plot", help="render loss curves and per-arm bars"))
    p.add_argument("--log", action="append", help="train_log.jsonl or train-gan run directory (repeatable)")
    p.add_argument("--report", help="ablation_report.json or ablate run directory")
    return parser


def _category(exc: BaseException) -> str:
    if isinstance(exc, SemCycleError):
        return exc.category
    if isinstance(exc, FileNotFoundError):
        return "missing-input"
    if isinstance(exc, ValueError):
        return "invalid-value"
    return "internal"


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        if args.jobs <= 0:
            raise ConfigValueError("--jobs must be positive")
        doc = load_config_file(args.config)
        COMMANDS[args.command](args, doc)
        return 0
    except KeyboardInterrupt:
        print("error: interrupted: keyboard interrupt", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure becomes one categorized line
        category = _category(exc)
        if category == "internal" and os.environ.get("SEMCYCLE_DEBUG"):
            raise
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {category}: {message}", file=sys.stderr)
        return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
