"""Image container, dataset model, deterministic RNG, and file I/O.

Everything downstream works on float-valued rasters; pixel data is
quantized only when exporting 8-bit PNG previews.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError, DecodeError, FormatError

log = logging.getLogger(__name__)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
RASTER_MAGIC = b"AVGI"

SPLITS = ("train", "validation", "test")


class Image:
    """Immutable float raster of shape (height, width, channels).

    Values are float64 with nominal range [0, 255]; intermediate results
    (residuals, embedded signals) may leave that range but must stay finite.
    Grayscale input arrays of shape (h, w) gain a trailing channel axis.
    """

    __slots__ = ("data",)

    def __init__(self, data, copy: bool = True):
        if copy:
            arr = np.array(data, dtype=np.float64, order="C")
        else:
            arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3:
            raise DataError(f"image must be 2-D or 3-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"image has empty spatial dims: {arr.shape}")
        if arr.shape[2] not in (1, 3):
            raise DataError(f"image must have 1 or 3 channels, got {arr.shape[2]}")
        if not np.all(np.isfinite(arr)):
            raise DataError("image contains non-finite values")
        arr.flags.writeable = False
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __repr__(self):
        return f"Image({self.height}x{self.width}x{self.channels})"


class Rng:
    """Deterministic random source: PCG64 keyed by a 64-bit unsigned seed.

    Identical seeds produce identical streams on every platform. Independent
    sub-streams come from `derive(tag)`, which hashes (seed, tag) with
    BLAKE2b-64 so that parallel execution order can never change results.
    """

    __slots__ = ("seed", "generator")

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise DataError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.generator = np.random.Generator(np.random.PCG64(seed))

    def derive(self, tag: str) -> "Rng":
        digest = hashlib.blake2b(
            self.seed.to_bytes(8, "little") + tag.encode("utf-8"), digest_size=8
        ).digest()
        return Rng(int.from_bytes(digest, "little"))

    def __repr__(self):
        return f"Rng(seed={self.seed})"


# ---------------------------------------------------------------------------
# PNG and float-raster I/O
# ---------------------------------------------------------------------------

def load_image(path) -> Image:
    """Decode an 8- or 16-bit PNG (grayscale or RGB) into [0, 255] floats.

    16-bit samples are scaled by 255/65535. Alpha channels and non-PNG
    payloads are rejected with DecodeError.
    """
    path = Path(path)
    try:
        with path.open("rb") as fh:
            head = fh.read(len(PNG_SIGNATURE))
    except OSError as exc:
        raise DecodeError(f"cannot read {path}: {exc}") from None
    if head != PNG_SIGNATURE:
        raise DecodeError(f"{path} is not a PNG file")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DecodeError(f"cannot decode {path}")
    if raw.ndim == 3 and raw.shape[2] == 4:
        raise DecodeError(f"{path}: alpha channels are not supported")
    if raw.ndim == 3 and raw.shape[2] == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    if raw.dtype == np.uint8:
        data = raw.astype(np.float64)
    elif raw.dtype == np.uint16:
        data = raw.astype(np.float64) * (255.0 / 65535.0)
    else:
        raise DecodeError(f"{path}: unsupported sample type {raw.dtype}")
    return Image(data, copy=False)


def save_png(image: Image, path) -> None:
    """Write an 8-bit PNG. Lossy: values are clipped to [0, 255] and rounded."""
    data = image.data
    if data.min() < 0.0 or data.max() > 255.0:
        log.warning("clipping out-of-range values while writing %s", path)
    arr = np.clip(np.rint(data), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    else:
        arr = cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), arr):
        raise DataError(f"failed to write PNG {path}")


def save_float_raster(image: Image, path) -> None:
    """Write the lossless AVGI raster: magic, u32 h/w/c, then f32 pixels.

    All integers and floats are little-endian; pixels are row-major,
    channel-interleaved.
    """
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(struct.pack("<III", image.height, image.width, image.channels))
        fh.write(np.ascontiguousarray(image.data, dtype="<f4").tobytes())


def load_float_raster(path) -> Image:
    """Read an AVGI raster written by `save_float_raster`."""
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated raster header")
    if blob[:4] != RASTER_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {RASTER_MAGIC!r}")
    h, w, c = struct.unpack_from("<III", blob, 4)
    expected = 16 + h * w * c * 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload is {len(blob) - 16} bytes, expected {expected - 16}"
        )
    pixels = np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w, c)
    return Image(pixels.astype(np.float64), copy=False)


# ---------------------------------------------------------------------------
# Dataset model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetItem:
    """One labeled image. `item_id` is unique within a dataset."""

    item_id: str
    class_label: int
    split: str
    image: Image

    def load(self) -> Image:
        return self.image


@dataclass(frozen=True)
class LabeledDataset:
    """Images with class labels and train/validation/test assignments."""

    items: tuple[DatasetItem, ...]
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError(f"need at least 2 classes, got {self.num_classes}")
        seen = set()
        counts = [0] * self.num_classes
        for it in self.items:
            if not 0 <= it.class_label < self.num_classes:
                raise DataError(f"label {it.class_label} out of range for K={self.num_classes}")
            if it.split not in SPLITS:
                raise DataError(f"unknown split {it.split!r}")
            if it.item_id in seen:
                raise DataError(f"duplicate item id {it.item_id!r}")
            seen.add(it.item_id)
            counts[it.class_label] += 1
        if any(c == 0 for c in counts):
            raise DataError(f"every class needs at least one item, counts={counts}")

    @cached_property
    def _by_id(self) -> dict:
        return {it.item_id: it for it in self.items}

    def item(self, item_id: str) -> DatasetItem:
        try:
            return self._by_id[item_id]
        except KeyError:
            raise DataError(f"no item with id {item_id!r}") from None

    def items_of_class(self, label: int) -> tuple[DatasetItem, ...]:
        return tuple(it for it in self.items if it.class_label == label)

    def items_in_split(self, split: str) -> tuple[DatasetItem, ...]:
        return tuple(it for it in self.items if it.split == split)

    def class_counts(self) -> list[int]:
        counts = [0] * self.num_classes
        for it in self.items:
            counts[it.class_label] += 1
        return counts

    def map_images(self, fn) -> "LabeledDataset":
        """New dataset with `fn(image)` applied to every item, ids preserved."""
        return LabeledDataset(
            tuple(replace(it, image=fn(it.image)) for it in self.items),
            self.num_classes,
        )


def split_dataset(dataset, fractions, rng: Rng) -> LabeledDataset:
    """Per-class stratified split into train/validation/test.

    `dataset` is a LabeledDataset or a sequence of DatasetItem; existing
    split assignments are discarded. `fractions` is a (train, validation,
    test) triple summing to 1. Counts per class follow floor allocation
    with the remainder going to the largest fractional parts.
    """
    if isinstance(dataset, LabeledDataset):
        items, num_classes = dataset.items, dataset.num_classes
    else:
        items = tuple(dataset)
        num_classes = max(it.class_label for it in items) + 1
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(SPLITS):
        raise DataError(f"need {len(SPLITS)} split fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise DataError(f"split fractions must be nonnegative: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {sum(fractions)}")

    new_items = {}
    for k in range(num_classes):
        pool = [it for it in items if it.class_label == k]
        n = len(pool)
        alloc = [int(np.floor(n * f)) for f in fractions]
        remainders = [n * f - a for f, a in zip(fractions, alloc)]
        for _ in range(n - sum(alloc)):
            j = int(np.argmax(remainders))
            alloc[j] += 1
            remainders[j] = -1.0
        if any(a == 0 and f > 0 for a, f in zip(alloc, fractions)):
            raise DataError(
                f"class {k} has too few items ({n}) for split fractions {fractions}"
            )
        order = rng.derive(f"split/class{k}").generator.permutation(n)
        cursor = 0
        for split_name, count in zip(SPLITS, alloc):
            for idx in order[cursor:cursor + count]:
                it = pool[idx]
                new_items[it.item_id] = replace(it, split=split_name)
            cursor += count

    return LabeledDataset(
        tuple(new_items[it.item_id] for it in items), num_classes
    )


def load_dataset_dir(root) -> LabeledDataset:
    """Load `<root>/<class_dir>/*.png` into memory.

    Class index is the lexicographic rank of the directory name. All items
    start in the train split; call `split_dataset` to assign splits.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise DataError(f"dataset root {root} needs at least 2 class directories")
    items = []
    for label, cdir in enumerate(class_dirs):
        paths = sorted(cdir.glob("*.png"))
        if not paths:
            raise DataError(f"class directory {cdir} contains no PNG files")
        for p in paths:
            items.append(
                DatasetItem(
                    item_id=f"{cdir.name}/{p.name}",
                    class_label=label,
                    split="train",
                    image=load_image(p),
                )
            )
    return LabeledDataset(tuple(items), len(class_dirs))
