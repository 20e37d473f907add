"""Spatial filtering primitives.

Median filters and residual transforms, the fixed high-pass kernel bank for
residual preprocessing, and the constrained-kernel projection used by the
trainable residual front end. All border handling is edge-inclusive mirror
padding (the edge pixel is duplicated), and all filtering is plain
cross-correlation: kernels are never flipped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import ndimage

from .core import Image, Rng
from .errors import DataError, FormatError

log = logging.getLogger(__name__)

# scipy's "reflect" is edge-inclusive mirroring, same as np.pad(mode="symmetric")
_MIRROR = "reflect"

DEGENERATE_SUM_EPS = 1e-8


@dataclass(frozen=True)
class Kernel:
    """Square odd-sized filter kernel with one or more depth slices.

    `weights` has shape (k, k, depth). `divisor` records the integer
    normalization the weights were loaded with (bookkeeping only; weights
    are already divided).
    """

    name: str
    weights: np.ndarray
    divisor: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 2:
            w = w[:, :, np.newaxis]
        if w.ndim != 3 or w.shape[0] != w.shape[1]:
            raise DataError(f"kernel weights must be square, got shape {w.shape}")
        if w.shape[0] < 3 or w.shape[0] % 2 == 0:
            raise DataError(f"kernel size must be odd and >= 3, got {w.shape[0]}")
        if not np.all(np.isfinite(w)):
            raise DataError("kernel weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def depth(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class FilterBank:
    """Named list of single-depth kernels with per-kernel divisors."""

    name: str
    kernels: tuple[Kernel, ...]

    def __post_init__(self):
        if not self.kernels:
            raise DataError("filter bank must contain at least one kernel")

    def __len__(self):
        return len(self.kernels)

    @property
    def common_size(self) -> int:
        return max(k.size for k in self.kernels)

    def padded_stack(self) -> np.ndarray:
        """All kernels zero-padded to the common size, shape (n, K, K)."""
        s = self.common_size
        out = np.zeros((len(self.kernels), s, s))
        for i, k in enumerate(self.kernels):
            off = (s - k.size) // 2
            out[i, off:off + k.size, off:off + k.size] = k.weights[:, :, 0]
        return out


# ---------------------------------------------------------------------------
# Median filtering and residuals
# ---------------------------------------------------------------------------

def median_filter(image: Image, k: int) -> Image:
    """Per-channel k x k median with mirror border padding, k in {3, 5}."""
    if k not in (3, 5):
        raise DataError(f"median kernel size must be 3 or 5, got {k}")
    if image.height < k or image.width < k:
        raise DataError(
            f"image {image.height}x{image.width} smaller than median kernel {k}"
        )
    out = ndimage.median_filter(image.data, size=(k, k, 1), mode=_MIRROR)
    return Image(out, copy=False)


def residual_transform(image: Image) -> Image:
    """Absolute difference between an image and its 3x3 median.

    Keeps only high-frequency components; output is in [0, 255] whenever the
    input is.
    """
    filtered = median_filter(image, 3)
    return Image(np.abs(image.data - filtered.data), copy=False)


# ---------------------------------------------------------------------------
# Fixed high-pass kernel bank
# ---------------------------------------------------------------------------

_BANK_CACHE: FilterBank | None = None


def _parse_bank(text: str, name: str) -> FilterBank:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    kernels = []
    i = 0
    while i < len(lines):
        header = [p.strip() for p in lines[i].split(",")]
        if len(header) != 3:
            raise FormatError(f"filter bank {name}: bad header line {lines[i]!r}")
        kname = header[0]
        try:
            k, divisor = int(header[1]), int(header[2])
        except ValueError:
            raise FormatError(f"filter bank {name}: bad header line {lines[i]!r}") from None
        if divisor == 0:
            raise FormatError(f"filter bank {name}: zero divisor in {lines[i]!r}")
        if i + k >= len(lines):
            raise FormatError(f"filter bank {name}: truncated block {kname!r}")
        rows = []
        for j in range(k):
            parts = lines[i + 1 + j].split()
            if len(parts) != k:
                raise FormatError(f"filter bank {name}: kernel {kname!r} row has {len(parts)} values, expected {k}")
            try:
                rows.append([int(p) for p in parts])
            except ValueError:
                raise FormatError(f"filter bank {name}: non-integer weight in {kname!r}") from None
        kernels.append(Kernel(kname, np.array(rows, dtype=np.float64) / divisor, divisor))
        i += 1 + k
    if not kernels:
        raise FormatError(f"filter bank {name}: no kernels found")
    return FilterBank(name, tuple(kernels))


def srm_filter_bank() -> FilterBank:
    """The bundled 30-kernel basic high-pass residual bank.

    First/second/third-order difference predictors plus 3x3/5x5 square and
    edge predictors, each stored as integers with a standard divisor.
    Loaded once and cached.
    """
    global _BANK_CACHE
    if _BANK_CACHE is None:
        text = resources.files("ageaudit.data").joinpath("srm_basic.txt").read_text()
        _BANK_CACHE = _parse_bank(text, "srm_basic")
    return _BANK_CACHE


def apply_filter_bank(image: Image, bank: FilterBank) -> Image:
    """Cross-correlate with every bank kernel; mirror padding, same size.

    Each kernel is applied to each input channel and the per-channel
    responses are summed, so the output has len(bank) channels.
    """
    stack = bank.padded_stack()
    h, w, cin = image.shape
    out = np.zeros((h, w, len(bank)))
    for i in range(stack.shape[0]):
        acc = np.zeros((h, w))
        for c in range(cin):
            acc += ndimage.correlate(image.data[:, :, c], stack[i], mode=_MIRROR)
        out[:, :, i] = acc
    return Image(out, copy=False)


# ---------------------------------------------------------------------------
# Constrained-kernel projection
# ---------------------------------------------------------------------------

def _glorot_bound(k: int, depth: int) -> float:
    return float(np.sqrt(6.0 / (2.0 * k * k * depth)))


def project_constrained_slice(w: np.ndarray, rng: Rng | None = None) -> np.ndarray:
    """Project one 2-D kernel slice onto the residual-predictor constraint set.

    The center weight becomes -1 and the off-center weights are rescaled to
    sum to 1. If the off-center sum is numerically degenerate (< 1e-8 in
    magnitude) the slice is reinitialized from the uniform
    +-sqrt(6 / (2 k^2)) distribution and re-projected; that event is logged.
    """
    w = np.asarray(w, dtype=np.float64)
    k = w.shape[0]
    mid = k // 2
    off_sum = w.sum() - w[mid, mid]
    if abs(off_sum) < DEGENERATE_SUM_EPS:
        log.warning("degenerate constrained kernel slice (off-center sum %.3g); reinitializing", off_sum)
        gen = (rng or Rng(0).derive("constrained-reinit")).generator
        bound = _glorot_bound(k, 1)
        fresh = gen.uniform(-bound, bound, size=w.shape)
        return project_constrained_slice(fresh, rng)
    out = w / off_sum
    out[mid, mid] = -1.0
    return out


def project_constrained_kernel(kernel: Kernel, rng: Rng | None = None) -> Kernel:
    """Apply the residual-predictor projection to every depth slice."""
    slices = [
        project_constrained_slice(kernel.weights[:, :, d], rng)
        for d in range(kernel.depth)
    ]
    return Kernel(kernel.name, np.stack(slices, axis=2), kernel.divisor)
