"""Sensor output simulation and the synthetic age-signal pipeline.

Dark-field frames isolate the additive sensor terms (scaled dark current,
fixed offset, noise); averaging a stack of them estimates the per-class age
signal, which can then be embedded into procedurally generated content so
the audit protocol can be exercised without any external data.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (
    DatasetItem,
    Image,
    LabeledDataset,
    Rng,
    load_float_raster,
    save_float_raster,
    split_dataset,
)
from .errors import DataError, FormatError
from .filters import median_filter


@dataclass(frozen=True)
class Defect:
    """One defective photosite: dark current D and fixed offset c."""

    row: int
    col: int
    channel: int
    dark_current: float
    offset: float


@dataclass(frozen=True)
class DefectMap:
    """Defective photosites of one sensor at one point in time."""

    height: int
    width: int
    channels: int
    entries: tuple[Defect, ...]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if not (0 <= e.row < self.height and 0 <= e.col < self.width):
                raise DataError(f"defect at ({e.row},{e.col}) outside {self.height}x{self.width}")
            if not 0 <= e.channel < self.channels:
                raise DataError(f"defect channel {e.channel} out of range")
            if e.dark_current < 0 or e.offset < 0:
                raise DataError("defect dark current and offset must be >= 0")
            key = (e.row, e.col, e.channel)
            if key in seen:
                raise DataError(f"duplicate defect at {key}")
            seen.add(key)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "channel", "D", "c"])
            for e in self.entries:
                writer.writerow([e.row, e.col, e.channel, repr(e.dark_current), repr(e.offset)])

    @staticmethod
    def load_csv(path, height: int, width: int, channels: int) -> "DefectMap":
        entries = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["row", "col", "channel", "D", "c"]:
                raise FormatError(f"{path}: unexpected defect CSV header {header}")
            for rec in reader:
                if len(rec) != 5:
                    raise FormatError(f"{path}: malformed defect row {rec}")
                entries.append(
                    Defect(int(rec[0]), int(rec[1]), int(rec[2]), float(rec[3]), float(rec[4]))
                )
        return DefectMap(height, width, channels, tuple(entries))


@dataclass(frozen=True)
class CaptureParams:
    """Combined exposure/ISO/temperature factor and sensor noise level."""

    tau: float
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise DataError(f"tau must be positive and finite, got {self.tau}")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise DataError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass(frozen=True)
class AgeSignal:
    """Additive per-pixel signal attributed to one age class."""

    theta: Image
    class_label: int
    provenance: str  # "simulated" | "estimated-from-frames"

    def __post_init__(self):
        if self.provenance not in ("simulated", "estimated-from-frames"):
            raise DataError(f"unknown provenance {self.provenance!r}")

    def save(self, raster_path, sidecar_path) -> None:
        save_float_raster(self.theta, raster_path)
        Path(sidecar_path).write_text(
            json.dumps(
                {"class_label": self.class_label, "provenance": self.provenance},
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )

    @staticmethod
    def load(raster_path, sidecar_path) -> "AgeSignal":
        meta = json.loads(Path(sidecar_path).read_text())
        return AgeSignal(
            load_float_raster(raster_path),
            int(meta["class_label"]),
            str(meta["provenance"]),
        )


# ---------------------------------------------------------------------------
# Dark frames and signal estimation
# ---------------------------------------------------------------------------

def simulate_dark_frame(defects: DefectMap, params: CaptureParams, rng: Rng) -> Image:
    """One dark-field capture: tau*D + c at defect sites plus sensor noise.

    Incident light is zero, so only the additive terms remain; Gaussian
    noise of std `noise_sigma` is added everywhere and the result is clamped
    at 0 from below (sensor output is nonnegative).
    """
    frame = np.zeros((defects.height, defects.width, defects.channels))
    for e in defects.entries:
        frame[e.row, e.col, e.channel] = params.tau * e.dark_current + e.offset
    if params.noise_sigma > 0:
        frame += rng.generator.normal(0.0, params.noise_sigma, size=frame.shape)
    np.maximum(frame, 0.0, out=frame)
    return Image(frame, copy=False)


def estimate_age_signal(frames, class_label: int) -> AgeSignal:
    """Average a stack of dark frames; random noise cancels, defects remain."""
    frames = list(frames)
    if not frames:
        raise DataError("cannot estimate an age signal from zero frames")
    shape = frames[0].shape
    acc = np.zeros(shape)
    for fr in frames:
        if fr.shape != shape:
            raise DataError(f"frame shape mismatch: {fr.shape} vs {shape}")
        acc += fr.data
    acc /= len(frames)
    return AgeSignal(Image(acc, copy=False), class_label, "estimated-from-frames")


def embed_age_signal(content: Image, signal: AgeSignal) -> Image:
    """Add the signal to content pixel-wise; values are left unclipped."""
    if content.shape != signal.theta.shape:
        raise DataError(
            f"content shape {content.shape} != signal shape {signal.theta.shape}; "
            "mirror_expand the content first"
        )
    return Image(content.data + signal.theta.data, copy=False)


def mirror_expand(content: Image, target_h: int, target_w: int) -> Image:
    """Grow an image to target dims by edge-inclusive boundary mirroring.

    The content is centered (top/left padding = floor((target - size) / 2))
    and each border is reflected including the edge pixel, so e.g. row
    [1,2,3] widened to 5 becomes [1,1,2,3,3]. At most one reflection per
    side is allowed (target <= 3x content).
    """
    if target_h < content.height or target_w < content.width:
        raise DataError(
            f"target {target_h}x{target_w} smaller than content "
            f"{content.height}x{content.width}"
        )
    top = (target_h - content.height) // 2
    bottom = target_h - content.height - top
    left = (target_w - content.width) // 2
    right = target_w - content.width - left
    if max(top, bottom) > content.height or max(left, right) > content.width:
        raise DataError(
            f"target {target_h}x{target_w} needs more than one reflection of "
            f"{content.height}x{content.width} content"
        )
    out = np.pad(content.data, ((top, bottom), (left, right), (0, 0)), mode="symmetric")
    return Image(out, copy=False)


def detect_strong_defects(avg: Image, threshold: float) -> list[tuple[int, int, int, float]]:
    """Threshold the 5x5 median residual of an average image.

    Returns (row, col, channel, magnitude) tuples sorted by descending
    magnitude; position-stable spikes such as in-field sensor defects
    survive averaging and stand out in the residual.
    """
    if avg.height < 5 or avg.width < 5:
        raise DataError("image too small for 5x5 median residual")
    residual = np.abs(avg.data - median_filter(avg, 5).data)
    rows, cols, chans = np.nonzero(residual > threshold)
    mags = residual[rows, cols, chans]
    order = np.argsort(-mags, kind="stable")
    return [
        (int(rows[i]), int(cols[i]), int(chans[i]), float(mags[i]))
        for i in order
    ]


# ---------------------------------------------------------------------------
# Defect map and content generators
# ---------------------------------------------------------------------------

def random_defect_map(
    height: int,
    width: int,
    channels: int,
    count: int,
    rng: Rng,
    dark_current_range: tuple[float, float] = (30.0, 60.0),
    offset_range: tuple[float, float] = (0.0, 5.0),
    min_separation: int = 6,
    existing: "DefectMap | None" = None,
) -> DefectMap:
    """Random isolated defects, at least `min_separation` apart (Chebyshev).

    When `existing` is given, its entries are kept and `count` new defects
    are added, so later-in-time maps are supersets of earlier ones (defects
    accumulate over a sensor's life). Isolation keeps every defect removable
    by a 5x5 median, which the filtered average variant relies on.
    """
    gen = rng.generator
    entries = list(existing.entries) if existing is not None else []
    occupied = [(e.row, e.col) for e in entries]
    attempts = 0
    placed = 0
    while placed < count:
        attempts += 1
        if attempts > 10000 * count:
            raise DataError(
                f"cannot place {count} defects with separation {min_separation} "
                f"on a {height}x{width} sensor"
            )
        r = int(gen.integers(0, height))
        c = int(gen.integers(0, width))
        if any(max(abs(r - rr), abs(c - cc)) < min_separation for rr, cc in occupied):
            continue
        ch = int(gen.integers(0, channels))
        d = float(gen.uniform(*dark_current_range))
        off = float(gen.uniform(*offset_range))
        entries.append(Defect(r, c, ch, d, off))
        occupied.append((r, c))
        placed += 1
    return DefectMap(height, width, channels, tuple(entries))


def generate_content(height: int, width: int, channels: int, rng: Rng) -> Image:
    """One procedural content image: smooth gradient, soft shapes, mild texture.

    Values stay within [25, 200] so an embedded signal has headroom before
    8-bit export would clip. Content is intentionally smooth: its 3x3 median
    residual is small compared to an isolated defect.
    """
    gen = rng.generator
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )
    angle = gen.uniform(0.0, 2.0 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    base = gen.uniform(70.0, 140.0) + gen.uniform(-45.0, 45.0) * ramp

    for _ in range(int(gen.integers(2, 6))):
        cy, cx = gen.uniform(0.0, 1.0, size=2)
        ry = gen.uniform(0.08, 0.35)
        rx = gen.uniform(0.08, 0.35)
        amp = gen.uniform(-40.0, 40.0)
        dist = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        base += amp / (1.0 + np.exp(12.0 * (dist - 1.0)))

    texture = gen.normal(0.0, 1.0, size=(height, width))
    texture = ndimage.gaussian_filter(texture, sigma=2.0, mode="reflect")
    sd = texture.std()
    if sd > 0:
        base += texture * (2.5 / sd)

    base = np.clip(base, 25.0, 200.0)
    if channels == 1:
        data = base[:, :, np.newaxis]
    else:
        tints = gen.uniform(-12.0, 12.0, size=3)
        data = np.clip(base[:, :, np.newaxis] + tints, 25.0, 200.0)
    return Image(data, copy=False)


def generate_synthetic_dataset(
    content_count: int,
    image_size: tuple[int, int],
    signals: list[AgeSignal],
    rng: Rng,
    channels: int = 1,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> LabeledDataset:
    """Identical content per class, differing only in the embedded signal.

    `content_count` procedural images are generated at `image_size`, then
    every class receives a copy of each with its own signal added; any class
    separation a model finds therefore cannot come from content. Content
    smaller than the signal raster is grown by boundary mirroring first.
    """
    if content_count < 1:
        raise DataError(f"content_count must be >= 1, got {content_count}")
    if len(signals) < 2:
        raise DataError(f"need signals for >= 2 classes, got {len(signals)}")
    labels = sorted(s.class_label for s in signals)
    if labels != list(range(len(signals))):
        raise DataError(f"signal class labels must be 0..K-1, got {labels}")
    sig_shape = signals[0].theta.shape
    for s in signals:
        if s.theta.shape != sig_shape:
            raise DataError("all signals must share one raster shape")
    h, w = image_size
    if sig_shape[2] != channels:
        raise DataError(
            f"signal channels {sig_shape[2]} != requested content channels {channels}"
        )

    by_label = {s.class_label: s for s in signals}
    items = []
    for i in range(content_count):
        content = generate_content(h, w, channels, rng.derive(f"content/{i}"))
        if content.shape != sig_shape:
            content = mirror_expand(content, sig_shape[0], sig_shape[1])
        for k in range(len(signals)):
            items.append(
                DatasetItem(
                    item_id=f"class{k}/img{i:05d}",
                    class_label=k,
                    split="train",
                    image=embed_age_signal(content, by_label[k]),
                )
            )
    dataset = LabeledDataset(tuple(items), len(signals))
    return split_dataset(dataset, split_fractions, rng.derive("split"))


def make_synthetic_signals(
    height: int,
    width: int,
    channels: int,
    rng: Rng,
    num_classes: int = 2,
    base_defects: int = 24,
    new_defects_per_class: int = 24,
    tau: float = 2.0,
    noise_sigma: float = 2.0,
    frames: int = 16,
    dark_current_range: tuple[float, float] = (30.0, 60.0),
    offset_range: tuple[float, float] = (0.0, 5.0),
    min_separation: int = 6,
) -> tuple[list[AgeSignal], list[DefectMap]]:
    """Defect maps and estimated age signals for a synthetic imager.

    Class k's defect map extends class k-1's with `new_defects_per_class`
    fresh defects; each class's signal is estimated from `frames` simulated
    dark-field captures.
    """
    params = CaptureParams(tau=tau, noise_sigma=noise_sigma)
    maps: list[DefectMap] = []
    current: DefectMap | None = None
    for k in range(num_classes):
        count = base_defects if k == 0 else new_defects_per_class
        current = random_defect_map(
            height,
            width,
            channels,
            count,
            rng.derive(f"defects/class{k}"),
            dark_current_range=dark_current_range,
            offset_range=offset_range,
            min_separation=min_separation,
            existing=current,
        )
        maps.append(current)
    signals = []
    for k, dm in enumerate(maps):
        frame_rng = rng.derive(f"frames/class{k}")
        stack = [
            simulate_dark_frame(dm, params, frame_rng.derive(f"frame/{j}"))
            for j in range(frames)
        ]
        signals.append(estimate_age_signal(stack, k))
    return signals, maps
