"""Network assembly, training loop, and evaluation.

Builds the four-stage orientation network (or its plain-CNN control) from a
landmark bank, trains it with plain SGD under the halving learning-rate
schedule, and reports error rates on held-out, optionally rotated, digit
data.  Everything is deterministic given the build and training seeds.
"""

import struct
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import LabeledImages, rotate_dataset
from .layers import (
    Dropout,
    Flatten,
    Layer,
    Linear,
    MaxPool2,
    Modulator,
    OcnConv,
    OrientPool,
    PlainConv,
    ReLU,
    Replicate,
    build_modulator,
    sgd_step,
    softmax_cross_entropy,
)
from .linalg import NumericalError
from .solver import LandmarkBank

N_CLASSES = 10
CHECKPOINT_MAGIC = b"OCNM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture knobs for one four-stage network."""

    stage_widths: Tuple[int, int, int, int] = (10, 20, 40, 80)
    kernel_size: int = 3
    n_orient: int = 4
    n_scale: int = 1
    use_ocn: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if len(self.stage_widths) != 4 or any(w < 1 for w in self.stage_widths):
            raise ValueError(f"need 4 positive stage widths, got {self.stage_widths}")
        if self.kernel_size not in (3, 5, 7):
            raise ValueError(f"kernel size must be 3, 5 or 7, got {self.kernel_size}")
        if self.n_orient < 1 or self.n_scale < 1:
            raise ValueError("orientation and scale counts must be positive")


@dataclass(frozen=True)
class TrainConfig:
    """The training protocol: SGD, halving schedule, fixed shuffle seed."""

    batch_size: int = 128
    weight_decay: float = 0.00005
    lr: float = 0.001
    lr_halving_period_epochs: int = 10
    epochs: int = 10  # desk-scale default; the full protocol runs 50
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.lr_halving_period_epochs < 1:
            raise ValueError("batch size and halving period must be positive")
        if self.lr <= 0.0 or self.weight_decay < 0.0:
            raise ValueError("lr must be positive and weight decay non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.5 ** (epoch // self.lr_halving_period_epochs)


@dataclass
class EvalReport:
    error_rate: float
    per_class_errors: List[float]
    wall_time_s: float
    param_count: int


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_error: Optional[float]
    lr: float
    seconds: float
    # per-batch losses in shuffle order; train_loss is their mean
    batch_losses: List[float] = field(default_factory=list)


class Network:
    """An ordered layer stack with a softmax/cross-entropy head."""

    def __init__(self, layers: Sequence[Layer], config: NetworkConfig):
        self.layers = list(layers)
        self.config = config

    def set_train_mode(self, on: bool) -> None:
        for layer in self.layers:
            layer.train_mode = on

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Class predictions for (count, 28, 28) images; no dropout."""
        self.set_train_mode(False)
        out = []
        for start in range(0, images.shape[0], batch_size):
            x = images[start : start + batch_size][:, None]
            out.append(np.argmax(self.forward(x), axis=1))
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def parameter_arrays(self) -> List[np.ndarray]:
        arrays = []
        for layer in self.layers:
            arrays.extend(layer.params())
        return arrays


def _assemble(nc: NetworkConfig, modulator: Optional[Modulator], seed: int) -> Network:
    rng = np.random.default_rng(seed)
    layers: List[Layer] = []
    c_prev = 1
    if nc.use_ocn:
        if modulator is None:
            raise ValueError("an orientation network needs a modulator")
        # grayscale input is replicated across the orientation axis, so every
        # stage sees N' = U input orientation channels
        layers.append(Replicate(nc.n_orient))
        for width in nc.stage_widths:
            layers.append(OcnConv(c_prev, width, nc.n_orient, modulator, rng))
            layers.append(ReLU())
            layers.append(MaxPool2())
            c_prev = width
        layers.append(OrientPool(modulator.n_orient))
    else:
        for width in nc.stage_widths:
            layers.append(PlainConv(c_prev, width, nc.kernel_size, rng))
            layers.append(ReLU())
            layers.append(MaxPool2())
            c_prev = width
    layers.append(Flatten())
    layers.append(Dropout(np.random.default_rng(seed + 1), rate=0.5))
    layers.append(Linear(nc.stage_widths[-1], N_CLASSES, rng))
    return Network(layers, nc)


def build_network(
    nc: NetworkConfig, bank: Optional[LandmarkBank] = None, seed: int = 0
) -> Network:
    """Assemble the Fig.-2-style stack: 4 conv stages, each with ReLU and
    2x2 max-pool, an orientation max-pool head for the OCN variant, then
    dropout and a linear classifier."""
    modulator = None
    if nc.use_ocn:
        if bank is None:
            raise ValueError("an orientation network needs a landmark bank")
        if bank.spec.kernel_size != nc.kernel_size:
            raise ValueError(
                f"bank kernels are {bank.spec.kernel_size}x{bank.spec.kernel_size}, "
                f"network wants {nc.kernel_size}x{nc.kernel_size}"
            )
        modulator = build_modulator(bank, nc.n_orient)
    return _assemble(nc, modulator, seed)


def analytic_param_count(nc: NetworkConfig) -> int:
    """Closed-form learnable-scalar count; independent of U for conv stages
    because only the learned filters are stored."""
    count = 0
    c_prev = 1
    k2 = nc.kernel_size**2
    for width in nc.stage_widths:
        n_in = nc.n_orient if nc.use_ocn else 1
        count += width * c_prev * n_in * k2
        c_prev = width
    count += nc.stage_widths[-1] * N_CLASSES + N_CLASSES
    return count


# ---------------------------------------------------------------------------
# training


def train(
    network: Network,
    data: LabeledImages,
    tc: TrainConfig,
    eval_data: Optional[LabeledImages] = None,
) -> List[EpochRecord]:
    """SGD training under the halving schedule; returns per-epoch records.

    Shuffle order is fixed by tc.seed.  Only declared layer parameters are
    updated (for orientation layers that is the learned filters alone).
    A non-finite loss aborts with a diagnostic rather than training on.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    rng = np.random.default_rng(tc.seed)
    history: List[EpochRecord] = []
    trainable = [layer for layer in network.layers if layer.params()]
    for epoch in range(tc.epochs):
        t0 = time.perf_counter()
        lr = tc.lr_at(epoch)
        network.set_train_mode(True)
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), tc.batch_size):
            idx = order[start : start + tc.batch_size]
            x = data.images[idx][:, None]
            logits = network.forward(x)
            loss, grad = softmax_cross_entropy(logits, data.labels[idx])
            if not np.isfinite(loss):
                raise NumericalError(
                    f"loss diverged ({loss}) at epoch {epoch}, step {start // tc.batch_size}"
                )
            network.backward(grad)
            for layer in trainable:
                sgd_step(layer, lr, tc.weight_decay)
            losses.append(loss)
        test_error = None
        if eval_data is not None:
            test_error = evaluate(network, eval_data).error_rate
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                test_error=test_error,
                lr=lr,
                seconds=time.perf_counter() - t0,
                batch_losses=[float(l) for l in losses],
            )
        )
    return history


def evaluate(
    network: Network,
    data: LabeledImages,
    rotation_degrees: Optional[Sequence[float]] = None,
    seed: int = 0,
) -> EvalReport:
    """Error rate on data; optionally each image is first rotated by a
    seeded uniform choice from rotation_degrees."""
    t0 = time.perf_counter()
    if rotation_degrees is not None:
        data = rotate_dataset(data, rotation_degrees, seed)
    preds = network.predict(data.images)
    wrong = preds != data.labels
    per_class = []
    for cls in range(N_CLASSES):
        mask = data.labels == cls
        per_class.append(100.0 * float(wrong[mask].mean()) if mask.any() else 0.0)
    return EvalReport(
        error_rate=100.0 * float(wrong.mean()),
        per_class_errors=per_class,
        wall_time_s=time.perf_counter() - t0,
        param_count=network.n_params,
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(network: Network, path) -> None:
    """Versioned binary checkpoint: config, modulator stack, parameters."""
    nc = network.config
    stacks = [
        layer.modulator.lgf_stack
        for layer in network.layers
        if isinstance(layer, OcnConv)
    ]
    # all OCN stages share one modulator; store it once (or none for CNN)
    stack = stacks[0] if stacks else np.empty((0, 0, 0))
    arrays = [stack] + network.parameter_arrays()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        fh.write(
            struct.pack(
                "<4IIIIB",
                *nc.stage_widths,
                nc.kernel_size,
                nc.n_orient,
                nc.n_scale,
                1 if nc.use_ocn else 0,
            )
        )
        fh.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (0,))))
            fh.write(arr.tobytes())


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed."""


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path) -> Network:
    """Rebuild a network (architecture, modulator, weights) from disk."""
    with open(path, "rb") as fh:
        magic, version = struct.unpack("<4sI", _read_exact(fh, 8))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        w0, w1, w2, w3, kernel, n_orient, n_scale, use_ocn = struct.unpack(
            "<4IIIIB", _read_exact(fh, struct.calcsize("<4IIIIB"))
        )
        nc = NetworkConfig(
            stage_widths=(w0, w1, w2, w3),
            kernel_size=kernel,
            n_orient=n_orient,
            n_scale=n_scale,
            use_ocn=bool(use_ocn),
        )
        (n_arrays,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = []
        for _ in range(n_arrays):
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{max(ndim, 1)}I", _read_exact(fh, 4 * max(ndim, 1)))
            shape = shape[:ndim] if ndim else ()
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 0
            arr = np.frombuffer(_read_exact(fh, size * 8), dtype="<f8").reshape(shape)
            arrays.append(arr.copy())
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
    stack, params = arrays[0], arrays[1:]
    modulator = Modulator(stack) if nc.use_ocn else None
    network = _assemble(nc, modulator, seed=0)
    targets = network.parameter_arrays()
    if len(targets) != len(params):
        raise CheckpointError(
            f"checkpoint holds {len(params)} arrays, network needs {len(targets)}"
        )
    for target, value in zip(targets, params):
        if target.shape != value.shape:
            raise CheckpointError(
                f"shape mismatch: checkpoint {value.shape} vs network {target.shape}"
            )
        target[...] = value
    return network
