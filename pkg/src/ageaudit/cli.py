"""Command-line surface tying the modules into reproducible experiments.

Commands: generate (synthetic dataset), train (checkpoints), audit (report
files), inspect (raster stats and defect hits), adapt (serve a checkpoint
through the external-adapter protocol). Every command is a pure function of
(config file, seed, input tree); all randomness flows from the master seed.

Exit codes: 0 success, 2 config error, 3 data error, 4 adapter error,
5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import audit as audit_mod
from . import sensor
from .avg import VARIANT_ORDER, build_variants, sample_averaging_sets
from .core import (
    Image,
    RASTER_MAGIC,
    Rng,
    load_dataset_dir,
    load_float_raster,
    load_image,
    save_float_raster,
    save_png,
    split_dataset,
)
from .errors import (
    AdapterError,
    AgeAuditError,
    ConfigError,
    DataError,
    DecodeError,
    FormatError,
    NumericError,
)
from .learn import (
    ModelSpec,
    PatchSpec,
    TrainConfig,
    load_checkpoint,
    load_train_state,
    save_checkpoint,
    save_train_state,
    train_tinynet,
)
from .learn import TinyNetArch  # noqa: F401  (re-exported for config docs)

log = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ADAPTER = 4
EXIT_NUMERIC = 5


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the procedural imager used by `generate`."""

    classes: int = 2
    content_count: int = 200
    height: int = 256
    width: int = 256
    channels: int = 1
    tau: float = 2.0
    noise_sigma: float = 2.0
    frames: int = 16
    base_defects: int = 24
    new_defects_per_class: int = 24
    dark_current_min: float = 30.0
    dark_current_max: float = 60.0
    offset_min: float = 0.0
    offset_max: float = 5.0
    min_defect_separation: int = 6

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"synthetic.classes must be >= 2, got {self.classes}")
        if self.content_count < 1:
            raise ConfigError("synthetic.content_count must be >= 1")
        if self.channels not in (1, 3):
            raise ConfigError("synthetic.channels must be 1 or 3")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/experiment"
    dataset_root: str | None = None
    synthetic: SyntheticConfig | None = None
    model: ModelSpec = field(default_factory=ModelSpec)
    audit: audit_mod.AuditConfig = field(default_factory=audit_mod.AuditConfig)

    def __post_init__(self):
        if (self.dataset_root is None) == (self.synthetic is None):
            raise ConfigError(
                "config needs exactly one of dataset_root or synthetic"
            )

    def resolved_dataset_root(self) -> Path:
        if self.dataset_root is not None:
            return Path(self.dataset_root)
        return Path(self.out) / "dataset"


def _build(cls, data: dict, context: str):
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {context} section: {exc}") from None
    except (DataError, ConfigError) as exc:
        raise ConfigError(f"bad {context} section: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    known = {"seed", "out", "dataset_root", "synthetic", "model", "audit"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    synthetic = None
    if data.get("synthetic") is not None:
        synthetic = _build(SyntheticConfig, dict(data["synthetic"]), "synthetic")

    model_data = dict(data.get("model", {}))
    if "patch" in model_data:
        patch = dict(model_data["patch"])
        if "positions" in patch:
            patch["positions"] = tuple(patch["positions"])
        model_data["patch"] = _build(PatchSpec, patch, "model.patch")
    if "train" in model_data:
        train = dict(model_data["train"])
        if "schedule" in train:
            train["schedule"] = tuple((int(e), float(r)) for e, r in train["schedule"])
        model_data["train"] = _build(TrainConfig, train, "model.train")
    if "command" in model_data:
        model_data["command"] = tuple(model_data["command"])
    if "body_channels" in model_data:
        model_data["body_channels"] = tuple(model_data["body_channels"])
    model = _build(ModelSpec, model_data, "model")

    audit_data = dict(data.get("audit", {}))
    if "split_fractions" in audit_data:
        audit_data["split_fractions"] = tuple(audit_data["split_fractions"])
    audit_cfg = _build(audit_mod.AuditConfig, audit_data, "audit")

    try:
        return ExperimentConfig(
            seed=int(data.get("seed", 0)),
            out=str(data.get("out", "runs/experiment")),
            dataset_root=(
                None if data.get("dataset_root") is None else str(data["dataset_root"])
            ),
            synthetic=synthetic,
            model=model,
            audit=audit_cfg,
        )
    except (DataError, ConfigError) as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(config: ExperimentConfig) -> dict:
    model = config.model
    out = {
        "seed": config.seed,
        "out": config.out,
        "dataset_root": config.dataset_root,
        "synthetic": None,
        "model": {
            "kind": model.kind,
            "variant": model.variant,
            "patch": {"size": model.patch.size, "positions": list(model.patch.positions)},
            "fusion": model.fusion,
            "train": {
                "optimizer": model.train.optimizer,
                "lr": model.train.lr,
                "momentum": model.train.momentum,
                "schedule": [list(s) for s in model.train.schedule],
                "epochs": model.train.epochs,
                "batch_size": model.train.batch_size,
                "loss": model.train.loss,
                "seed": model.train.seed,
            },
            "front_kernels": model.front_kernels,
            "front_size": model.front_size,
            "body_channels": list(model.body_channels),
            "command": list(model.command),
            "num_classes": model.num_classes,
            "preprocess": model.preprocess,
        },
        "audit": {
            "num_runs": config.audit.num_runs,
            "num_sets": config.audit.num_sets,
            "fraction": config.audit.fraction,
            "split_fractions": list(config.audit.split_fractions),
            "imager_id": config.audit.imager_id,
            "threads": config.audit.threads,
            "approx_zero": config.audit.approx_zero,
        },
    }
    if config.synthetic is not None:
        s = config.synthetic
        out["synthetic"] = {
            "classes": s.classes,
            "content_count": s.content_count,
            "height": s.height,
            "width": s.width,
            "channels": s.channels,
            "tau": s.tau,
            "noise_sigma": s.noise_sigma,
            "frames": s.frames,
            "base_defects": s.base_defects,
            "new_defects_per_class": s.new_defects_per_class,
            "dark_current_min": s.dark_current_min,
            "dark_current_max": s.dark_current_max,
            "offset_min": s.offset_min,
            "offset_max": s.offset_max,
            "min_defect_separation": s.min_defect_separation,
        }
    return out


def load_config(path, seed_override=None, out_override=None,
                threads_override=None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    config = config_from_dict(data)
    if seed_override is not None:
        config = replace(config, seed=int(seed_override))
    if out_override is not None:
        config = replace(config, out=str(out_override))
    if threads_override is not None:
        config = replace(config, audit=replace(config.audit, threads=int(threads_override)))
    _validate_paths(config)
    return config


def _validate_paths(config: ExperimentConfig) -> None:
    if config.dataset_root is not None and not Path(config.dataset_root).is_dir():
        raise ConfigError(f"dataset_root {config.dataset_root} does not exist")
    if config.model.kind == "external":
        exe = config.model.command[0]
        if shutil.which(exe) is None and not Path(exe).exists():
            raise ConfigError(f"external model command {exe!r} not found")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _load_experiment_dataset(config: ExperimentConfig):
    root = config.resolved_dataset_root()
    if not root.is_dir():
        raise DataError(
            f"dataset directory {root} not found; run `generate` first or set dataset_root"
        )
    return load_dataset_dir(root)


def cmd_generate(config: ExperimentConfig, force: bool = False) -> Path:
    """Write the synthetic dataset tree, signals, and defect maps."""
    if config.synthetic is None:
        raise ConfigError("generate needs a synthetic block in the config")
    s = config.synthetic
    out = config.resolved_dataset_root()
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use --force)")
    if out.exists() and force:
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)

    rng = Rng(config.seed).derive("generate")
    signals, maps = sensor.make_synthetic_signals(
        s.height, s.width, s.channels, rng.derive("signals"),
        num_classes=s.classes,
        base_defects=s.base_defects,
        new_defects_per_class=s.new_defects_per_class,
        tau=s.tau,
        noise_sigma=s.noise_sigma,
        frames=s.frames,
        dark_current_range=(s.dark_current_min, s.dark_current_max),
        offset_range=(s.offset_min, s.offset_max),
        min_separation=s.min_defect_separation,
    )
    dataset = sensor.generate_synthetic_dataset(
        s.content_count, (s.height, s.width), signals, rng.derive("dataset"),
        channels=s.channels,
    )

    counts = [0] * s.classes
    for item in dataset.items:
        k = item.class_label
        cdir = out / f"class_{k:02d}"
        cdir.mkdir(exist_ok=True)
        save_png(item.image, cdir / f"img_{counts[k]:05d}.png")
        counts[k] += 1
    for k, (signal, dmap) in enumerate(zip(signals, maps)):
        signal.save(out / f"signal_class{k}.avgi", out / f"signal_class{k}.json")
        dmap.save_csv(out / f"defects_class{k}.csv")
    manifest = {
        "classes": s.classes,
        "images_per_class": counts,
        "height": s.height,
        "width": s.width,
        "channels": s.channels,
        "seed": config.seed,
        "defects_per_class": [len(m.entries) for m in maps],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("generated %d images into %s", sum(counts), out)
    return out


def cmd_train(config: ExperimentConfig, resume: bool = False) -> Path:
    """Train one network per configured patch position; write checkpoints."""
    if config.model.kind != "tinynet":
        raise ConfigError("train applies to tinynet model specs only")
    dataset = _load_experiment_dataset(config)
    prep = config.model.resolve_preprocess()
    if prep is not None:
        dataset = dataset.map_images(prep)
    rng = Rng(config.seed).derive("train")
    dataset = split_dataset(dataset, config.audit.split_fractions, rng.derive("split"))

    first = dataset.items[0].load()
    arch = TinyNetArch(
        num_classes=dataset.num_classes,
        in_channels=first.channels,
        front_end=config.model.front_end(),
        front_kernels=config.model.front_kernels,
        front_size=config.model.front_size,
        body_channels=config.model.body_channels,
    )

    out = Path(config.out) / "models"
    out.mkdir(parents=True, exist_ok=True)
    curve_rows = []
    for position in config.model.patch.positions:
        state_path = out / f"trainstate_{position}.tnst"
        prior = None
        if resume:
            if not state_path.exists():
                raise DataError(f"no train state to resume at {state_path}")
            prior = load_train_state(state_path)
        result = train_tinynet(
            dataset, config.model.train, position=position,
            patch_size=config.model.patch.size, arch=arch,
            rng=rng.derive(f"fit/{position}"), resume=prior,
        )
        save_checkpoint(result.model, out / f"model_{position}.tnet")
        save_train_state(result.state, state_path)
        for row in result.history:
            curve_rows.append([position, row["epoch"], repr(row["lr"]),
                               repr(row["loss"]), repr(row["train_acc"]),
                               repr(row["val_acc"])])
    mode = "a" if resume else "w"
    with open(out / "training_curve.csv", mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["position", "epoch", "lr", "loss", "train_acc", "val_acc"])
        writer.writerows(curve_rows)
    log.info("wrote checkpoints for %s to %s", config.model.patch.positions, out)
    return out


def cmd_audit(config: ExperimentConfig, export_averages: bool = False,
              export_png: bool = False) -> Path:
    """Run the full audit protocol and write report files."""
    dataset = _load_experiment_dataset(config)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(config.seed).derive("audit")
    try:
        report = audit_mod.run_audit(dataset, config.model, config.audit, rng)
    except audit_mod.AuditRunError as exc:
        if exc.completed:
            partial = audit_mod.assemble_report(
                config.audit.imager_id, dataset.num_classes, exc.completed,
                config_snapshot=config_to_dict(config),
            )
            audit_mod.write_runs_csv(partial, out / "runs.csv")
        (out / "failure.txt").write_text(
            f"run {exc.run_index} failed: {exc.cause}\n"
            f"completed runs: {len(exc.completed)}\n"
        )
        raise
    report = audit_mod.with_config_snapshot(report, config_to_dict(config))

    audit_mod.write_runs_csv(report, out / "runs.csv")
    audit_mod.write_summary_csv([report], out / "summary.csv")
    audit_mod.write_report_json(report, out / "report.json")
    findings = audit_mod.interpret_report(report, config.audit.approx_zero)
    (out / "findings.txt").write_text(findings + "\n")

    if export_averages or export_png:
        _export_averages(config, dataset, out / "averages", export_png)
    log.info("audit complete: %s", out / "summary.csv")
    return out


def _export_averages(config: ExperimentConfig, dataset, avg_dir: Path,
                     export_png: bool) -> None:
    """Re-derive each run's averaging sets and persist the variant images."""
    prep = config.model.resolve_preprocess()
    if prep is not None:
        dataset = dataset.map_images(prep)
    rng = Rng(config.seed).derive("audit")
    for i in range(config.audit.num_runs):
        run_rng = rng.derive(f"run/{i}")
        ds = split_dataset(dataset, config.audit.split_fractions, run_rng.derive("split"))
        sets = sample_averaging_sets(
            ds, config.audit.num_sets, config.audit.fraction, run_rng.derive("sets")
        )
        run_dir = avg_dir / f"run_{i}"
        run_dir.mkdir(parents=True, exist_ok=True)
        for avg_set in sets:
            variants = build_variants(avg_set, ds, preprocess=None)
            for variant in VARIANT_ORDER:
                stem = (
                    f"set{avg_set.set_index:02d}_class{avg_set.class_label}"
                    f"_{variant.value}"
                )
                save_float_raster(variants[variant], run_dir / f"{stem}.avgi")
                if export_png:
                    save_png(variants[variant], run_dir / f"{stem}.png")


def cmd_inspect(paths, threshold: float = 20.0, out_csv=None) -> str:
    """Print raster stats and strong-defect hits; optionally dump CSV."""
    lines = []
    csv_rows = []
    for path in paths:
        path = Path(path)
        with path.open("rb") as fh:
            head = fh.read(4)
        image = load_float_raster(path) if head == RASTER_MAGIC else load_image(path)
        lines.append(f"{path}: {image.height}x{image.width}x{image.channels}")
        for c in range(image.channels):
            plane = image.data[:, :, c]
            lines.append(
                f"  channel {c}: min={plane.min():.4f} max={plane.max():.4f} "
                f"mean={plane.mean():.4f}"
            )
        hits = sensor.detect_strong_defects(image, threshold)
        lines.append(f"  defects above {threshold}: {len(hits)}")
        for row, col, chan, mag in hits:
            lines.append(f"    ({row},{col},{chan}) magnitude {mag:.3f}")
            csv_rows.append([str(path), row, col, chan, repr(mag)])
    text = "\n".join(lines)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "row", "col", "channel", "magnitude"])
            writer.writerows(csv_rows)
    return text


def cmd_adapt(model_path, manifest_path, out_path) -> None:
    """Serve a checkpoint through the external-adapter protocol."""
    model = load_checkpoint(model_path)
    manifest = Path(manifest_path).read_text().splitlines()
    paths = [ln.strip() for ln in manifest if ln.strip()]
    rows = []
    for i, p in enumerate(paths):
        image = load_float_raster(p)
        x = image.data.transpose(2, 0, 1)[np.newaxis]
        scores = model.predict_scores(x)[0]
        rows.append([i] + [repr(float(v)) for v in scores])
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["index"] + [f"score_{i}" for i in range(model.arch.num_classes)]
        )
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ageaudit",
        description="Audit whether an image-age classifier uses age traces or content bias.",
    )
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--threads", type=int, default=None, help="parallel audit runs")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    add_common(p)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output")

    p = sub.add_parser("train", help="train checkpoints for the configured model")
    add_common(p)
    p.add_argument("--resume", action="store_true", help="continue from saved train state")

    p = sub.add_parser("audit", help="run the audit protocol and write reports")
    add_common(p)
    p.add_argument("--export-averages", action="store_true",
                   help="write the average-image variants as AVGI rasters")
    p.add_argument("--export-png", action="store_true",
                   help="also write clipped 8-bit PNG previews (lossy, inspection only)")

    p = sub.add_parser("inspect", help="dump raster stats and strong-defect hits")
    p.add_argument("paths", nargs="+", help="AVGI or PNG files")
    p.add_argument("--threshold", type=float, default=20.0)
    p.add_argument("--csv", default=None, help="also write defect hits to this CSV")

    p = sub.add_parser("adapt", help="serve a checkpoint via the adapter protocol")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return parser


def _dispatch(args) -> None:
    if args.command == "inspect":
        print(cmd_inspect(args.paths, args.threshold, args.csv))
        return
    if args.command == "adapt":
        cmd_adapt(args.model, args.manifest, args.out)
        return
    config = load_config(
        args.config, seed_override=args.seed, out_override=args.out,
        threads_override=args.threads,
    )
    if args.command == "generate":
        cmd_generate(config, force=args.force)
    elif args.command == "train":
        cmd_train(config, resume=args.resume)
    elif args.command == "audit":
        cmd_audit(config, export_averages=args.export_averages,
                  export_png=args.export_png)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _dispatch(args)
    except audit_mod.AuditRunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code_for(exc.cause)
    except AgeAuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code_for(exc)
    return 0


def _exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, AdapterError):
        return EXIT_ADAPTER
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, DecodeError, FormatError)):
        return EXIT_DATA
    return 1


if __name__ == "__main__":
    sys.exit(main())
