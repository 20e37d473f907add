"""Average-image variants and balanced averaging-set sampling.

A position-stable signal survives per-pixel averaging while random content
is suppressed; the four variants isolate what remains (structure, color,
structure-minus-color, low-frequency components) so a classifier's behavior
on them reveals what it actually keys on.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import Image, LabeledDataset, Rng
from .errors import DataError
from .filters import median_filter


class AverageVariant(enum.Enum):
    STANDARD = "standard"
    COLOR = "color"
    RANGE = "range"
    FILTERED = "filtered"


VARIANT_ORDER = (
    AverageVariant.STANDARD,
    AverageVariant.COLOR,
    AverageVariant.RANGE,
    AverageVariant.FILTERED,
)


@dataclass(frozen=True)
class AveragingSet:
    """Balanced member draw for one (class, set_index) average image."""

    class_label: int
    member_ids: tuple[str, ...]
    set_index: int


def average_image(images) -> Image:
    """Per-pixel arithmetic mean of same-shaped images."""
    images = list(images)
    if not images:
        raise DataError("cannot average an empty list of images")
    shape = images[0].shape
    acc = np.zeros(shape)
    for im in images:
        if im.shape != shape:
            raise DataError(f"shape mismatch in average: {im.shape} vs {shape}")
        acc += im.data
    acc /= len(images)
    return Image(acc, copy=False)


def average_color(avg: Image) -> Image:
    """Constant image carrying each channel's spatial mean.

    Removes all structure; only the average color remains. The mean is taken
    per channel so color balance is preserved for RGB inputs.
    """
    means = avg.data.mean(axis=(0, 1))
    out = np.broadcast_to(means, avg.shape)
    return Image(out)


def range_image(avg: Image) -> Image:
    """Shift so the single global minimum (over all channels) becomes 0.

    Pairwise pixel differences are untouched, so structure survives while
    the color baseline is removed.
    """
    return Image(avg.data - avg.data.min(), copy=False)


def filtered_average(avg: Image) -> Image:
    """5x5 median of the average image; strips high-frequency components."""
    if avg.height < 5 or avg.width < 5:
        raise DataError(
            f"image {avg.height}x{avg.width} too small for the 5x5 median"
        )
    return median_filter(avg, 5)


def sample_averaging_sets(
    dataset: LabeledDataset, num_sets: int, fraction: float, rng: Rng
) -> list[AveragingSet]:
    """Draw `num_sets` balanced member sets per class from the full pool.

    Every set draws floor(fraction * min class size) items per class without
    replacement, regardless of split assignment, so larger classes are
    undersampled to match the smallest one. Sets are drawn independently and
    may overlap.
    """
    if num_sets < 1:
        raise DataError(f"num_sets must be >= 1, got {num_sets}")
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    pools = [
        tuple(it.item_id for it in dataset.items_of_class(k))
        for k in range(dataset.num_classes)
    ]
    n = int(np.floor(fraction * min(len(p) for p in pools)))
    if n == 0:
        raise DataError(
            f"fraction {fraction} of the smallest class yields empty averaging sets"
        )
    sets = []
    for s in range(num_sets):
        for k, pool in enumerate(pools):
            gen = rng.derive(f"avgset/{s}/class{k}").generator
            idx = gen.choice(len(pool), size=n, replace=False)
            sets.append(AveragingSet(k, tuple(pool[i] for i in idx), s))
    return sets


def build_variants(
    avg_set: AveragingSet, dataset: LabeledDataset, preprocess=None
) -> dict[AverageVariant, Image]:
    """All four average-image variants for one averaging set.

    When a preprocessing transform is configured it is applied to every
    member image before averaging (never to the finished averages), matching
    how preprocessed classifiers see their training data.
    """
    members = [dataset.item(i).load() for i in avg_set.member_ids]
    if preprocess is not None:
        members = [preprocess(m) for m in members]
    std = average_image(members)
    return {
        AverageVariant.STANDARD: std,
        AverageVariant.COLOR: average_color(std),
        AverageVariant.RANGE: range_image(std),
        AverageVariant.FILTERED: filtered_average(std),
    }
