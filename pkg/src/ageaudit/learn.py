"""Trainable reference classifier, optimizers, patching, and fusion.

The network is a small float64 convnet with hand-written forward/backward
passes so gradients are exactly checkable against finite differences. Three
front ends are supported: raw pixels, a trainable constrained-residual
convolution (center weight -1, off-center weights summing to 1, re-projected
after every optimizer step), and the fixed high-pass kernel bank.
"""

from __future__ import annotations

import abc
import csv
import json
import struct
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Image, Rng, save_float_raster
from .errors import AdapterError, DataError, FormatError, TrainingDivergedError
from .filters import project_constrained_slice, residual_transform, srm_filter_bank

POSITIONS = ("tl", "tr", "bl", "br", "ce")
FRONT_ENDS = ("raw", "constrained", "fixed_bank")
OPTIMIZERS = ("adamax", "sgd_momentum")
FUSION_RULES = ("score_sum", "majority")

CHECKPOINT_MAGIC = b"TNET"
TRAINSTATE_MAGIC = b"TNST"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Patching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchSpec:
    """Fixed-position square patches used for training and inference."""

    size: int = 256
    positions: tuple[str, ...] = POSITIONS

    def __post_init__(self):
        if self.size < 1:
            raise DataError(f"patch size must be >= 1, got {self.size}")
        if not self.positions:
            raise DataError("patch spec needs at least one position")
        for p in self.positions:
            if p not in POSITIONS:
                raise DataError(f"unknown patch position {p!r}")
        if len(set(self.positions)) != len(self.positions):
            raise DataError(f"duplicate patch positions: {self.positions}")


def crop_anchor(position: str, height: int, width: int, size: int) -> tuple[int, int]:
    """Top-left corner of a fixed-position crop."""
    if size > height or size > width:
        raise DataError(f"crop size {size} exceeds image {height}x{width}")
    anchors = {
        "tl": (0, 0),
        "tr": (0, width - size),
        "bl": (height - size, 0),
        "br": (height - size, width - size),
        "ce": ((height - size) // 2, (width - size) // 2),
    }
    try:
        return anchors[position]
    except KeyError:
        raise DataError(f"unknown patch position {position!r}") from None


def extract_crop(image: Image, position: str, size: int) -> Image:
    r, c = crop_anchor(position, image.height, image.width, size)
    return Image(image.data[r:r + size, c:c + size, :])


def extract_five_crops(image: Image, spec: PatchSpec) -> dict[str, Image]:
    """Exact crops at each configured position; no resampling."""
    return {p: extract_crop(image, p, spec.size) for p in spec.positions}


def extract_blocks_48(image: Image, block: int = 500) -> list[Image]:
    """First 48 non-overlapping blocks in row-major order from (0, 0)."""
    rows = image.height // block
    cols = image.width // block
    if rows * cols < 48:
        raise DataError(
            f"image {image.height}x{image.width} holds only {rows * cols} "
            f"blocks of {block}x{block}, need 48"
        )
    out = []
    for i in range(48):
        r, c = divmod(i, cols)
        out.append(Image(image.data[r * block:(r + 1) * block, c * block:(c + 1) * block, :]))
    return out


# ---------------------------------------------------------------------------
# Convolution primitives (valid padding, cross-correlation)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """(B, C, H, W) -> (B, oh*ow, C*kh*kw) patch matrix plus output dims."""
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, oh, ow = v.shape[:4]
    cols = v.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int):
    f, _, kh, kw = w.shape
    cols, oh, ow = _im2col(x, kh, kw, stride)
    out = cols @ w.reshape(f, -1).T
    if b is not None:
        out += b
    y = out.transpose(0, 2, 1).reshape(x.shape[0], f, oh, ow)
    return y, cols


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int):
    b, c, h, w = x_shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    d = dcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros(x_shape)
    for u in range(kh):
        for v in range(kw):
            dx[:, :, u:u + oh * stride:stride, v:v + ow * stride:stride] += d[:, :, u, v]
    return dx


def _conv_backward(dy: np.ndarray, x_shape, w: np.ndarray, cols: np.ndarray,
                   stride: int, need_dx: bool = True):
    f, _, kh, kw = w.shape
    b = dy.shape[0]
    dflat = dy.reshape(b, f, -1).transpose(0, 2, 1)
    dflat2 = dflat.reshape(-1, f)
    dw = (dflat2.T @ cols.reshape(dflat2.shape[0], -1)).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dcols = dflat @ w.reshape(f, -1)
        dx = _col2im(dcols, x_shape, kh, kw, stride)
    return dx, dw, db


def _mirror_pad(x: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="symmetric")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over a batch; returns (loss, probs, dlogits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    denom = expz.sum(axis=1, keepdims=True)
    logsum = np.log(denom[:, 0])
    n = logits.shape[0]
    loss = float((logsum - z[np.arange(n), labels]).mean())
    probs = expz / denom
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, probs, dlogits


# ---------------------------------------------------------------------------
# The network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TinyNetArch:
    """Architecture constants; defaults give the documented reference net."""

    num_classes: int
    in_channels: int = 1
    front_end: str = "raw"
    front_kernels: int = 4
    front_size: int = 5
    body_channels: tuple[int, int] = (8, 16)

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels not in (1, 3):
            raise DataError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.front_end not in FRONT_ENDS:
            raise DataError(f"unknown front end {self.front_end!r}")
        if self.front_end == "constrained":
            if self.front_kernels < 1:
                raise DataError("constrained front end needs >= 1 kernel")
            if self.front_size < 3 or self.front_size % 2 == 0:
                raise DataError(f"front kernel size must be odd >= 3, got {self.front_size}")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "front_end": self.front_end,
            "front_kernels": self.front_kernels,
            "front_size": self.front_size,
            "body_channels": list(self.body_channels),
        }

    @staticmethod
    def from_dict(d: dict) -> "TinyNetArch":
        return TinyNetArch(
            num_classes=int(d["num_classes"]),
            in_channels=int(d["in_channels"]),
            front_end=str(d["front_end"]),
            front_kernels=int(d["front_kernels"]),
            front_size=int(d["front_size"]),
            body_channels=tuple(int(v) for v in d["body_channels"]),
        )


def _glorot(gen, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-bound, bound, size=shape)


class TinyNet:
    """Small convolutional classifier with a selectable front end.

    Body: two 3x3 valid convolutions (stride 1 then 2) with ReLU, global
    average pooling, and a fully connected layer to the class scores. The
    front end runs at the input resolution with mirror padding.
    """

    def __init__(self, arch: TinyNetArch, rng: Rng | None = None,
                 params: dict | None = None, seed: int | None = None):
        self.arch = arch
        c1, c2 = arch.body_channels
        if arch.front_end == "raw":
            body_in = arch.in_channels
        elif arch.front_end == "constrained":
            body_in = arch.front_kernels
        else:
            bank = srm_filter_bank()
            body_in = len(bank)
            stack = bank.padded_stack()  # (F, K, K)
            self._bank_w = np.repeat(stack[:, np.newaxis, :, :], arch.in_channels, axis=1)
        self._body_in = body_in

        shapes = {}
        if arch.front_end == "constrained":
            k = arch.front_size
            shapes["front.w"] = (arch.front_kernels, arch.in_channels, k, k)
        shapes["conv1.w"] = (c1, body_in, 3, 3)
        shapes["conv1.b"] = (c1,)
        shapes["conv2.w"] = (c2, c1, 3, 3)
        shapes["conv2.b"] = (c2,)
        shapes["fc.w"] = (c2, arch.num_classes)
        shapes["fc.b"] = (arch.num_classes,)
        self._shapes = shapes

        if params is not None:
            for name, shape in shapes.items():
                if name not in params or params[name].shape != shape:
                    raise DataError(f"bad parameter block {name!r} for this architecture")
            self.params = {n: np.array(params[n], dtype=np.float64) for n in shapes}
            self.seed = seed if seed is not None else 0
        else:
            if rng is None:
                raise DataError("TinyNet needs an Rng or explicit parameters")
            gen = rng.derive("init").generator
            p = {}
            if arch.front_end == "constrained":
                k = arch.front_size
                fan = arch.in_channels * k * k
                p["front.w"] = _glorot(gen, shapes["front.w"], fan, arch.front_kernels * k * k)
            p["conv1.w"] = _glorot(gen, shapes["conv1.w"], body_in * 9, c1 * 9)
            p["conv1.b"] = np.zeros(c1)
            p["conv2.w"] = _glorot(gen, shapes["conv2.w"], c1 * 9, c2 * 9)
            p["conv2.b"] = np.zeros(c2)
            p["fc.w"] = _glorot(gen, shapes["fc.w"], c2, arch.num_classes)
            p["fc.b"] = np.zeros(arch.num_classes)
            self.params = p
            self.seed = rng.seed
            if arch.front_end == "constrained":
                self.project_front(rng.derive("project-init"))

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(self._shapes)

    def project_front(self, rng: Rng | None = None) -> None:
        """Re-project constrained front-end slices onto the constraint set."""
        if self.arch.front_end != "constrained":
            return
        w = self.params["front.w"]
        out = np.empty_like(w)
        for f in range(w.shape[0]):
            for c in range(w.shape[1]):
                out[f, c] = project_constrained_slice(w[f, c], rng)
        self.params["front.w"] = out

    def _front(self, x: np.ndarray, want_cols: bool):
        arch = self.arch
        if arch.front_end == "raw":
            return x, None
        w = self.params["front.w"] if arch.front_end == "constrained" else self._bank_w
        pad = w.shape[2] // 2
        xp = _mirror_pad(x, pad)
        if arch.front_end == "constrained" and want_cols:
            y, cols = _conv_forward(xp, w, None, 1)
            return y, cols
        y, _ = _conv_forward(xp, w, None, 1)
        return y, None

    def forward(self, x: np.ndarray, want_grads: bool = False):
        """Logits for a (B, C, H, W) float batch; caches activations on demand."""
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise DataError(
                f"expected batch (B, {self.arch.in_channels}, H, W), got {x.shape}"
            )
        if x.shape[2] < self.min_input_size or x.shape[3] < self.min_input_size:
            raise DataError(
                f"input {x.shape[2]}x{x.shape[3]} below the minimum "
                f"{self.min_input_size}x{self.min_input_size}"
            )
        h0, front_cols = self._front(x, want_grads)
        z1, cols1 = _conv_forward(h0, self.params["conv1.w"], self.params["conv1.b"], 1)
        a1 = np.maximum(z1, 0.0)
        z2, cols2 = _conv_forward(a1, self.params["conv2.w"], self.params["conv2.b"], 2)
        a2 = np.maximum(z2, 0.0)
        feat = a2.mean(axis=(2, 3))
        logits = feat @ self.params["fc.w"] + self.params["fc.b"]
        if not want_grads:
            return logits, None
        cache = {
            "x": x, "front_cols": front_cols, "h0": h0,
            "z1": z1, "a1": a1, "cols1": cols1,
            "z2": z2, "a2": a2, "cols2": cols2, "feat": feat,
        }
        return logits, cache

    @property
    def min_input_size(self) -> int:
        # front end keeps size; two valid 3x3 convolutions need >= 5 pixels
        front = self.arch.front_size // 2 + 1 if self.arch.front_end != "raw" else 1
        return max(5, front)

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray):
        """Cross-entropy loss, parameter gradients, and logits for a batch."""
        logits, cache = self.forward(x, want_grads=True)
        loss, _, dlogits = softmax_cross_entropy(logits, labels)
        grads = {}
        grads["fc.w"] = cache["feat"].T @ dlogits
        grads["fc.b"] = dlogits.sum(axis=0)
        dfeat = dlogits @ self.params["fc.w"].T
        a2 = cache["a2"]
        area = a2.shape[2] * a2.shape[3]
        da2 = np.broadcast_to(dfeat[:, :, None, None], a2.shape) / area
        dz2 = da2 * (cache["z2"] > 0)
        need_front = self.arch.front_end == "constrained"
        da1, grads["conv2.w"], grads["conv2.b"] = _conv_backward(
            dz2, cache["a1"].shape, self.params["conv2.w"], cache["cols2"], 2
        )
        dz1 = da1 * (cache["z1"] > 0)
        dh0, grads["conv1.w"], grads["conv1.b"] = _conv_backward(
            dz1, cache["h0"].shape, self.params["conv1.w"], cache["cols1"], 1,
            need_dx=need_front,
        )
        if need_front:
            w = self.params["front.w"]
            f = w.shape[0]
            b = x.shape[0]
            dflat = dh0.reshape(b, f, -1).transpose(0, 2, 1).reshape(-1, f)
            cols = cache["front_cols"].reshape(dflat.shape[0], -1)
            grads["front.w"] = (dflat.T @ cols).reshape(w.shape)
        return loss, grads, logits

    def predict_scores(self, x: np.ndarray, chunk: int = 32) -> np.ndarray:
        """Softmax scores for a (B, C, H, W) batch, computed in chunks."""
        outs = []
        for i in range(0, x.shape[0], chunk):
            logits, _ = self.forward(x[i:i + chunk])
            _, probs, _ = softmax_cross_entropy(
                logits, np.zeros(logits.shape[0], dtype=np.intp)
            )
            outs.append(probs)
        return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# Optimizers (pure functions over parameter dicts)
# ---------------------------------------------------------------------------

def adamax_init(params: dict) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "u": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adamax_step(params: dict, grads: dict, state: dict, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One AdaMax update; returns (new_params, new_state)."""
    t = state["t"] + 1
    new_p, new_m, new_u = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state["m"][k] + (1.0 - beta1) * g
        u = np.maximum(beta2 * state["u"][k], np.abs(g))
        new_p[k] = p - (lr / (1.0 - beta1 ** t)) * m / (u + eps)
        new_m[k] = m
        new_u[k] = u
    return new_p, {"t": t, "m": new_m, "u": new_u}


def sgd_momentum_init(params: dict) -> dict:
    return {"v": {k: np.zeros_like(v) for k, v in params.items()}}


def sgd_momentum_step(params: dict, grads: dict, state: dict, lr: float,
                      momentum: float):
    """Classic momentum: v <- momentum*v + g; p <- p - lr*v."""
    new_p, new_v = {}, {}
    for k, p in params.items():
        v = momentum * state["v"][k] + grads[k]
        new_p[k] = p - lr * v
        new_v[k] = v
    return new_p, {"v": new_v}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamax"
    lr: float = 0.001
    momentum: float = 0.95
    schedule: tuple[tuple[int, float], ...] = ()
    epochs: int = 10
    batch_size: int = 8
    loss: str = "cross_entropy"
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise DataError(f"unknown optimizer {self.optimizer!r}")
        # lr 0 is allowed as a diagnostic no-op configuration
        if self.lr < 0:
            raise DataError(f"learning rate must be >= 0, got {self.lr}")
        if self.epochs < 1:
            raise DataError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss != "cross_entropy":
            raise DataError(f"unsupported loss {self.loss!r}")
        object.__setattr__(
            self, "schedule",
            tuple((int(e), float(r)) for e, r in self.schedule),
        )

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        best = -1
        for e, r in self.schedule:
            if e <= epoch and e > best:
                best, lr = e, r
        return lr


@dataclass(frozen=True)
class TrainState:
    """Everything needed to continue training bit-exactly."""

    arch: TinyNetArch
    optimizer: str
    params: dict
    opt_state: dict
    next_epoch: int
    seed: int


@dataclass(frozen=True)
class TrainResult:
    model: TinyNet
    history: tuple[dict, ...]
    state: TrainState


def _stack_patches(items, position: str, size: int) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for it in items:
        im = it.load()
        crop = extract_crop(im, position, size)
        xs.append(crop.data.transpose(2, 0, 1))
        ys.append(it.class_label)
    return np.stack(xs), np.array(ys, dtype=np.intp)


def train_tinynet(dataset, config: TrainConfig, position: str = "ce",
                  patch_size: int | None = None, arch: TinyNetArch | None = None,
                  rng: Rng | None = None, resume: TrainState | None = None) -> TrainResult:
    """Mini-batch training on a fixed patch position.

    Deterministic given (seed, config, dataset): batch order and parameter
    init derive from the seed alone. The constrained front end is
    re-projected after every optimizer step. `resume` continues a previous
    run bit-exactly (total epochs still come from `config.epochs`).
    """
    if position not in POSITIONS:
        raise DataError(f"unknown patch position {position!r}")
    train_items = dataset.items_in_split("train")
    val_items = dataset.items_in_split("validation")
    if not train_items:
        raise DataError("dataset has no train split")
    if not val_items:
        raise DataError("dataset has no validation split")

    first = train_items[0].load()
    if patch_size is None:
        patch_size = min(first.height, first.width)
    x_train, y_train = _stack_patches(train_items, position, patch_size)
    x_val, y_val = _stack_patches(val_items, position, patch_size)

    if arch is None:
        arch = TinyNetArch(num_classes=dataset.num_classes, in_channels=first.channels)
    if rng is None:
        rng = Rng(config.seed)

    if resume is not None:
        if resume.arch != arch or resume.optimizer != config.optimizer:
            raise DataError("resume state does not match the requested run")
        model = TinyNet(arch, params=resume.params, seed=resume.seed)
        opt_state = resume.opt_state
        start_epoch = resume.next_epoch
    else:
        model = TinyNet(arch, rng=rng)
        opt_state = adamax_init(model.params) if config.optimizer == "adamax" \
            else sgd_momentum_init(model.params)
        start_epoch = 0

    n = x_train.shape[0]
    history = []
    for epoch in range(start_epoch, config.epochs):
        lr = config.lr_at(epoch)
        order = rng.derive(f"epoch/{epoch}").generator.permutation(n)
        losses = []
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads, logits = model.loss_and_grads(x_train[idx], y_train[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}, step {start // config.batch_size}"
                )
            if config.optimizer == "adamax":
                model.params, opt_state = adamax_step(model.params, grads, opt_state, lr)
            else:
                model.params, opt_state = sgd_momentum_step(
                    model.params, grads, opt_state, lr, config.momentum
                )
            model.project_front(rng.derive(f"project/{epoch}/{start}"))
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == y_train[idx]).sum())
        val_scores = model.predict_scores(x_val)
        history.append({
            "epoch": epoch,
            "lr": lr,
            "loss": float(np.mean(losses)),
            "train_acc": correct / n,
            "val_acc": float((val_scores.argmax(axis=1) == y_val).mean()),
        })
    state = TrainState(
        arch=arch,
        optimizer=config.optimizer,
        params={k: v.copy() for k, v in model.params.items()},
        opt_state=opt_state,
        next_epoch=config.epochs,
        seed=model.seed,
    )
    return TrainResult(model=model, history=tuple(history), state=state)


# ---------------------------------------------------------------------------
# Checkpoint and train-state files
# ---------------------------------------------------------------------------

def _write_blocked(path, magic: bytes, header: dict, blocks, dtype: str) -> None:
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(payload)))
        fh.write(payload)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_blocked(path, magic: bytes, dtype: str):
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(blob) < 12 + hlen:
        raise FormatError(f"{path}: truncated header")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    itemsize = np.dtype(dtype).itemsize
    offset = 12 + hlen
    arrays = {}
    for block in header["blocks"]:
        shape = tuple(int(s) for s in block["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * itemsize
        if end > len(blob):
            raise FormatError(f"{path}: truncated block {block['name']!r}")
        arrays[block["name"]] = (
            np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset = end
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return header, arrays


def save_checkpoint(model: TinyNet, path) -> None:
    """Inference checkpoint: JSON header then float32 parameter blocks."""
    header = {
        "arch": model.arch.to_dict(),
        "num_classes": model.arch.num_classes,
        "seed": model.seed,
        "blocks": [
            {"name": n, "shape": list(model.params[n].shape)}
            for n in model.param_names
        ],
    }
    blocks = [(n, model.params[n]) for n in model.param_names]
    _write_blocked(path, CHECKPOINT_MAGIC, header, blocks, "<f4")


def load_checkpoint(path) -> TinyNet:
    header, arrays = _read_blocked(path, CHECKPOINT_MAGIC, "<f4")
    arch = TinyNetArch.from_dict(header["arch"])
    return TinyNet(arch, params=arrays, seed=int(header.get("seed", 0)))


def save_train_state(state: TrainState, path) -> None:
    """Resumable training state: float64 parameters plus optimizer state."""
    blocks = [(f"p.{n}", state.params[n]) for n in state.params]
    opt_meta = {"t": 0}
    if state.optimizer == "adamax":
        opt_meta["t"] = state.opt_state["t"]
        blocks += [(f"m.{n}", state.opt_state["m"][n]) for n in state.params]
        blocks += [(f"u.{n}", state.opt_state["u"][n]) for n in state.params]
    else:
        blocks += [(f"v.{n}", state.opt_state["v"][n]) for n in state.params]
    header = {
        "arch": state.arch.to_dict(),
        "optimizer": state.optimizer,
        "next_epoch": state.next_epoch,
        "seed": state.seed,
        "opt": opt_meta,
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
    }
    _write_blocked(path, TRAINSTATE_MAGIC, header, blocks, "<f8")


def load_train_state(path) -> TrainState:
    header, arrays = _read_blocked(path, TRAINSTATE_MAGIC, "<f8")
    arch = TinyNetArch.from_dict(header["arch"])
    optimizer = header["optimizer"]
    params = {n[2:]: a for n, a in arrays.items() if n.startswith("p.")}
    if optimizer == "adamax":
        opt_state = {
            "t": int(header["opt"]["t"]),
            "m": {n[2:]: a for n, a in arrays.items() if n.startswith("m.")},
            "u": {n[2:]: a for n, a in arrays.items() if n.startswith("u.")},
        }
    else:
        opt_state = {"v": {n[2:]: a for n, a in arrays.items() if n.startswith("v.")}}
    return TrainState(
        arch=arch,
        optimizer=optimizer,
        params=params,
        opt_state=opt_state,
        next_epoch=int(header["next_epoch"]),
        seed=int(header.get("seed", 0)),
    )


# ---------------------------------------------------------------------------
# Prediction fusion and classifier interfaces
# ---------------------------------------------------------------------------

def fuse_predictions(scores, rule: str = "score_sum") -> int:
    """Combine per-sub-model score vectors into one class index.

    score_sum: argmax of the per-class sums. majority: modal argmax of the
    individual vectors. Ties break toward the lowest class index.
    """
    vecs = [np.asarray(s, dtype=np.float64) for s in scores]
    if not vecs:
        raise DataError("cannot fuse an empty score list")
    k = vecs[0].shape[0]
    if any(v.shape != (k,) for v in vecs):
        raise DataError("score vectors must share one length")
    if rule == "score_sum":
        return int(np.argmax(np.sum(vecs, axis=0)))
    if rule == "majority":
        votes = [int(np.argmax(v)) for v in vecs]
        return int(np.argmax(np.bincount(votes, minlength=k)))
    raise DataError(f"unknown fusion rule {rule!r}")


class Classifier(abc.ABC):
    """Produces per-class scores for an image; higher means more likely.

    `predict` applies the classifier's bound preprocessing; the `_prepared`
    variants take inputs already in the model's input domain (used when
    scoring average images built from preprocessed members).
    """

    def __init__(self, name: str, num_classes: int, preprocess=None):
        self.name = name
        self.num_classes = num_classes
        self.preprocess = preprocess

    def predict(self, image: Image) -> np.ndarray:
        if self.preprocess is not None:
            image = self.preprocess(image)
        return self.predict_prepared(image)

    def predict_prepared(self, image: Image) -> np.ndarray:
        return self.predict_prepared_batch([image])[0]

    @abc.abstractmethod
    def predict_prepared_batch(self, images) -> np.ndarray:
        """Score a list of images, returning an (N, num_classes) array."""


class FusedTinyNetClassifier(Classifier):
    """One TinyNet per patch position, outputs fused across positions."""

    def __init__(self, models: dict[str, TinyNet], patch_size: int,
                 fusion: str = "score_sum", preprocess=None, name: str = "tinynet"):
        if not models:
            raise DataError("need at least one positioned model")
        if fusion not in FUSION_RULES:
            raise DataError(f"unknown fusion rule {fusion!r}")
        k = next(iter(models.values())).arch.num_classes
        super().__init__(name, k, preprocess)
        self.models = dict(models)
        self.patch_size = patch_size
        self.fusion = fusion

    def predict_prepared_batch(self, images) -> np.ndarray:
        images = list(images)
        per_position = []
        for position, model in self.models.items():
            stack = np.stack([
                extract_crop(im, position, self.patch_size).data.transpose(2, 0, 1)
                for im in images
            ])
            per_position.append(model.predict_scores(stack))
        stacked = np.stack(per_position)  # (P, N, K)
        if self.fusion == "score_sum":
            return stacked.sum(axis=0)
        votes = stacked.argmax(axis=2)  # (P, N)
        out = np.zeros((len(images), self.num_classes))
        for i in range(len(images)):
            out[i] = np.bincount(votes[:, i], minlength=self.num_classes)
        return out


class ExternalClassifier(Classifier):
    """Black-box model bound through the file-exchange adapter protocol.

    For every batch the tool writes AVGI rasters plus a manifest (one raster
    path per line) and invokes `<command> --manifest <path> --out <csv>`.
    The adapter must write `index,score_0,...,score_{K-1}` rows in manifest
    order and exit 0.
    """

    def __init__(self, command, num_classes: int, preprocess=None,
                 name: str = "external"):
        command = tuple(str(c) for c in command)
        if not command:
            raise DataError("external classifier needs a command")
        if num_classes < 2:
            raise DataError("external classifier needs num_classes >= 2")
        super().__init__(name, num_classes, preprocess)
        self.command = command

    def predict_prepared_batch(self, images) -> np.ndarray:
        images = list(images)
        with tempfile.TemporaryDirectory(prefix="ageaudit_adapter_") as td:
            tdir = Path(td)
            paths = []
            for i, im in enumerate(images):
                p = tdir / f"batch_{i:05d}.avgi"
                save_float_raster(im, p)
                paths.append(p)
            manifest = tdir / "batch_manifest.txt"
            manifest.write_text("".join(f"{p}\n" for p in paths))
            out_csv = tdir / "scores.csv"
            argv = list(self.command) + ["--manifest", str(manifest), "--out", str(out_csv)]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True)
            except OSError as exc:
                raise AdapterError(f"cannot invoke adapter {argv[0]!r}: {exc}") from None
            if proc.returncode != 0:
                raise AdapterError(
                    f"adapter exited with status {proc.returncode}", stderr=proc.stderr
                )
            return self._parse_scores(out_csv, len(images), proc.stderr)

    def _parse_scores(self, out_csv: Path, expected_rows: int, stderr: str) -> np.ndarray:
        expected_header = ["index"] + [f"score_{i}" for i in range(self.num_classes)]
        try:
            with open(out_csv, newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise AdapterError(f"adapter wrote no scores file: {exc}", stderr=stderr) from None
        if not rows or rows[0] != expected_header:
            raise AdapterError(
                f"bad scores header {rows[0] if rows else None!r}", stderr=stderr
            )
        body = rows[1:]
        if len(body) != expected_rows:
            raise AdapterError(
                f"adapter returned {len(body)} rows, expected {expected_rows}",
                stderr=stderr,
            )
        scores = np.zeros((expected_rows, self.num_classes))
        for i, rec in enumerate(body):
            if len(rec) != self.num_classes + 1 or int(rec[0]) != i:
                raise AdapterError(f"malformed scores row {i}: {rec}", stderr=stderr)
            scores[i] = [float(v) for v in rec[1:]]
        if not np.all(np.isfinite(scores)):
            raise AdapterError("adapter returned non-finite scores", stderr=stderr)
        return scores


def external_classifier(command, num_classes: int, preprocess=None) -> ExternalClassifier:
    """Bind an external model through the adapter protocol."""
    return ExternalClassifier(command, num_classes, preprocess)


# ---------------------------------------------------------------------------
# Model specification and fitting
# ---------------------------------------------------------------------------

VARIANTS = ("raw", "residual", "constrained", "fixed_bank")


@dataclass(frozen=True)
class ModelSpec:
    """Recipe for building (and training, if applicable) a classifier."""

    kind: str = "tinynet"  # tinynet | external
    variant: str = "constrained"
    patch: PatchSpec = field(default_factory=PatchSpec)
    fusion: str = "score_sum"
    train: TrainConfig = field(default_factory=TrainConfig)
    front_kernels: int = 4
    front_size: int = 5
    body_channels: tuple[int, int] = (8, 16)
    command: tuple[str, ...] = ()
    num_classes: int | None = None
    preprocess: str = "auto"  # auto | none | residual

    def __post_init__(self):
        if self.kind not in ("tinynet", "external"):
            raise DataError(f"unknown model kind {self.kind!r}")
        if self.kind == "tinynet" and self.variant not in VARIANTS:
            raise DataError(f"unknown tinynet variant {self.variant!r}")
        if self.fusion not in FUSION_RULES:
            raise DataError(f"unknown fusion rule {self.fusion!r}")
        if self.preprocess not in ("auto", "none", "residual"):
            raise DataError(f"unknown preprocess {self.preprocess!r}")
        if self.kind == "external":
            if not self.command:
                raise DataError("external model spec needs a command")
            if self.num_classes is None:
                raise DataError("external model spec needs num_classes")
        object.__setattr__(self, "command", tuple(str(c) for c in self.command))
        object.__setattr__(self, "body_channels", tuple(self.body_channels))

    def resolve_preprocess(self):
        """The transform applied to raw inputs everywhere (or None)."""
        mode = self.preprocess
        if mode == "auto":
            mode = "residual" if (self.kind == "tinynet" and self.variant == "residual") else "none"
        return residual_transform if mode == "residual" else None

    def name_or_default(self) -> str:
        return "external" if self.kind == "external" else f"tinynet-{self.variant}"

    def front_end(self) -> str:
        if self.variant in ("raw", "residual"):
            return "raw"
        return self.variant


@dataclass(frozen=True)
class FitResult:
    classifier: Classifier
    train_results: dict[str, TrainResult]


def fit_classifier(dataset, spec: ModelSpec, rng: Rng) -> FitResult:
    """Build the classifier a spec describes, training one net per position.

    The dataset must already be in the model's input domain: callers apply
    `spec.resolve_preprocess()` to raw images before fitting. The returned
    classifier still carries the preprocess so `predict` accepts raw images.
    """
    prep = spec.resolve_preprocess()
    if spec.kind == "external":
        clf = ExternalClassifier(
            spec.command, spec.num_classes, preprocess=prep,
            name=spec.name_or_default(),
        )
        return FitResult(clf, {})
    first = dataset.items[0].load()
    arch = TinyNetArch(
        num_classes=dataset.num_classes,
        in_channels=first.channels,
        front_end=spec.front_end(),
        front_kernels=spec.front_kernels,
        front_size=spec.front_size,
        body_channels=spec.body_channels,
    )
    results = {}
    models = {}
    for position in spec.patch.positions:
        res = train_tinynet(
            dataset, spec.train, position=position, patch_size=spec.patch.size,
            arch=arch, rng=rng.derive(f"train/{position}"),
        )
        results[position] = res
        models[position] = res.model
    clf = FusedTinyNetClassifier(
        models, spec.patch.size, fusion=spec.fusion, preprocess=prep,
        name=spec.name_or_default(),
    )
    return FitResult(clf, results)
