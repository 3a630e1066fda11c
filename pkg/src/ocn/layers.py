"""Network layers with exact hand-derived gradients.

The centerpiece is the orientation-modulated convolution: a learned filter
bank of shape (C_out, C_in, N', W, W) is elementwise-multiplied by a stack
of U fixed orientation kernels (the modulator), yielding C_out*U effective
output channels while only the learned filters are stored and updated.
Supporting layers (plain conv, ReLU, 2x2 max-pool, linear, dropout,
softmax/cross-entropy) follow the standard definitions.

Conventions
-----------
* Activations are float64 arrays of shape (batch, channels, H, W); an
  orientation axis is always flattened into the channel axis, channel-major:
  channel index = c * n_orient + n.
* "Convolution" is cross-correlation (no kernel flip), stride 1, zero
  padding (W-1)//2, so conv layers preserve spatial dims and pooling does
  all downsampling.
* Layers cache what backward needs during forward; a single instance must
  not run two overlapping forward passes.
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from .solver import LandmarkBank


def _check_activations(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"{name} must be (batch, channels, H, W), got ndim={x.ndim}")
    return x


# ---------------------------------------------------------------------------
# convolution core (im2col)


def _im2col(x: np.ndarray, w: int, pad: int) -> np.ndarray:
    """Extract all w*w patches of the padded input.

    Returns (batch, C*w*w, H_out*W_out) where H_out = H, W_out = W for the
    default pad = (w-1)//2.
    """
    b, c, h, wd = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (w, w), axis=(2, 3))
    # (b, c, H_out, W_out, w, w) -> (b, c, w, w, H_out*W_out)
    hh, ww = windows.shape[2], windows.shape[3]
    patches = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * w * w, hh * ww)
    return np.ascontiguousarray(patches)


def _col2im(cols: np.ndarray, shape: Tuple[int, int, int, int], w: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back onto the input."""
    b, c, h, wd = shape
    hh, ww = h + 2 * pad - w + 1, wd + 2 * pad - w + 1
    grid = cols.reshape(b, c, w, w, hh, ww)
    out = np.zeros((b, c, h + 2 * pad, wd + 2 * pad))
    for dy in range(w):
        for dx in range(w):
            out[:, :, dy : dy + hh, dx : dx + ww] += grid[:, :, dy, dx]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + wd]
    return out


def conv2d_forward(x: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Stride-1 same-padded cross-correlation.

    weights is (C_out, C_in, W, W) with odd W.  Returns (output, patches);
    patches feed conv2d_backward.
    """
    x = _check_activations(x)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ValueError(f"weights must be (C_out, C_in, W, W), got {weights.shape}")
    w = weights.shape[2]
    if w % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {w}")
    if weights.shape[1] != x.shape[1]:
        raise ValueError(
            f"weights expect {weights.shape[1]} input channels, input has {x.shape[1]}"
        )
    patches = _im2col(x, w, (w - 1) // 2)
    wmat = weights.reshape(weights.shape[0], -1)
    out = wmat @ patches  # (b, C_out, H*W) via broadcasting
    return out.reshape(x.shape[0], weights.shape[0], x.shape[2], x.shape[3]), patches


def conv2d_backward(
    grad_out: np.ndarray,
    patches: np.ndarray,
    weights: np.ndarray,
    in_shape: Tuple[int, int, int, int],
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of a conv2d_forward call: (grad_input, grad_weights)."""
    grad_out = _check_activations(grad_out, "grad_out")
    b, c_out, h, wd = grad_out.shape
    gmat = grad_out.reshape(b, c_out, h * wd)
    grad_w = np.tensordot(gmat, patches, axes=([0, 2], [0, 2])).reshape(weights.shape)
    wmat = weights.reshape(c_out, -1)
    grad_cols = wmat.T @ gmat
    w = weights.shape[2]
    grad_x = _col2im(grad_cols, in_shape, w, (w - 1) // 2)
    return grad_x, grad_w


# ---------------------------------------------------------------------------
# modulator


class Modulator:
    """A fixed stack of orientation kernels that gates learned filters.

    lgf_stack has shape (U, W, W); slice u modulates every learned filter
    when producing the u-th output orientation channel.  The stack is data,
    not parameters: it is never updated during training.
    """

    def __init__(self, lgf_stack: np.ndarray):
        stack = np.ascontiguousarray(lgf_stack, dtype=np.float64)
        if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
            raise ValueError(f"lgf_stack must be (U, W, W), got {stack.shape}")
        if stack.shape[0] < 1:
            raise ValueError("modulator needs at least one orientation slice")
        if stack.shape[1] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {stack.shape[1]}")
        if not np.isfinite(stack).all():
            raise ValueError("lgf_stack contains NaN or Inf entries")
        self.lgf_stack = stack

    @property
    def n_orient(self) -> int:
        return self.lgf_stack.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.lgf_stack.shape[1]

    @staticmethod
    def all_ones(n_orient: int, kernel_size: int) -> "Modulator":
        """Identity modulation: every slice is 1, so modulated = learned."""
        return Modulator(np.ones((n_orient, kernel_size, kernel_size)))


def _circular_angle_distance(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def build_modulator(
    bank: LandmarkBank,
    n_orient: int,
    v: Optional[int] = None,
    w: Optional[int] = None,
) -> Modulator:
    """Reconstruct n_orient oriented kernels from a landmark bank.

    For each target orientation u*180/n_orient degrees the nearest bank
    column (by circular angle distance, ties to the lowest index) is
    reconstructed as landmarks @ z_col and scaled to unit max-absolute
    value, decoupling filter energy from the learning rate.
    """
    if n_orient < 1:
        raise ValueError(f"n_orient must be >= 1, got {n_orient}")
    size = bank.spec.kernel_size
    if w is not None and w != size:
        raise ValueError(f"bank kernels are {size}x{size}, layer wants {w}x{w}")
    if v is not None and v != bank.scale_index:
        raise ValueError(f"bank holds scale {bank.scale_index}, not {v}")
    angles = np.asarray(bank.angles)
    slices = np.empty((n_orient, size, size))
    for u in range(n_orient):
        target = u * 180.0 / n_orient
        dists = [_circular_angle_distance(a, target) for a in angles]
        j = int(np.argmin(dists))
        kernel = (bank.landmarks @ bank.coefficients[:, j]).reshape(size, size)
        peak = np.abs(kernel).max()
        if peak == 0.0:
            raise ValueError(f"reconstructed kernel at {target:g} degrees is zero")
        slices[u] = kernel / peak
    return Modulator(slices)


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Minimal layer protocol: forward/backward plus parameter access."""

    train_mode: bool = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> List[np.ndarray]:
        return []

    def param_grads(self) -> List[np.ndarray]:
        return []

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())


def _uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class PlainConv(Layer):
    """Ordinary stride-1 same-padded convolution without bias."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng: np.random.Generator):
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ValueError(f"kernel size must be odd and positive, got {kernel_size}")
        self.weights = _uniform_init(
            rng, (c_out, c_in, kernel_size, kernel_size), c_in * kernel_size**2
        )
        self.grad_weights = np.zeros_like(self.weights)
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _check_activations(x)
        out, patches = conv2d_forward(x, self.weights)
        self._cache = (x.shape, patches)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        in_shape, patches = self._cache
        grad_x, self.grad_weights = conv2d_backward(
            grad_out, patches, self.weights, in_shape
        )
        return grad_x

    def params(self) -> List[np.ndarray]:
        return [self.weights]

    def param_grads(self) -> List[np.ndarray]:
        return [self.grad_weights]


class OcnConv(Layer):
    """Orientation convolution: learned filters gated by a fixed modulator.

    The learned tensor has shape (C_out, C_in, N', W, W) where N' is the
    input orientation count.  The modulator contributes U slices; effective
    filters are learned * slice(u), giving an output of C_out*U channels
    from C_in*N' input channels.  Only the learned tensor is a parameter,
    so the learnable count is independent of U.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        n_orient_in: int,
        modulator: Modulator,
        rng: np.random.Generator,
    ):
        w = modulator.kernel_size
        self.modulator = modulator
        self.learned = _uniform_init(
            rng, (c_out, c_in, n_orient_in, w, w), c_in * n_orient_in * w**2
        )
        self.grad_learned = np.zeros_like(self.learned)
        self._cache = None

    @property
    def n_orient_out(self) -> int:
        return self.modulator.n_orient

    def modulated_filters(self) -> np.ndarray:
        """Effective filters, shape (C_out, U, C_in, N', W, W)."""
        c_out, c_in, n_in, w, _ = self.learned.shape
        return self.learned[:, None] * self.modulator.lgf_stack[None, :, None, None]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _check_activations(x)
        c_out, c_in, n_in, w, _ = self.learned.shape
        if x.shape[1] != c_in * n_in:
            raise ValueError(
                f"layer expects {c_in}*{n_in}={c_in * n_in} channels, input has {x.shape[1]}"
            )
        u = self.n_orient_out
        flat = self.modulated_filters().reshape(c_out * u, c_in * n_in, w, w)
        out, patches = conv2d_forward(x, flat)
        self._cache = (x.shape, patches, flat)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        in_shape, patches, flat = self._cache
        c_out, c_in, n_in, w, _ = self.learned.shape
        u = self.n_orient_out
        grad_x, grad_flat = conv2d_backward(grad_out, patches, flat, in_shape)
        grad_mod = grad_flat.reshape(c_out, u, c_in, n_in, w, w)
        # chain through the elementwise modulation: sum the per-orientation
        # filter gradients, each gated by its own slice
        self.grad_learned = np.einsum(
            "iucnxy,uxy->icnxy", grad_mod, self.modulator.lgf_stack
        )
        return grad_x

    def params(self) -> List[np.ndarray]:
        return [self.learned]

    def param_grads(self) -> List[np.ndarray]:
        return [self.grad_learned]


class ReLU(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return np.where(self._mask, grad_out, 0.0)


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped.

    Ties go to the first position in row-major window order.
    """

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _check_activations(x)
        b, c, h, w = x.shape
        hh, ww = h // 2, w // 2
        if hh < 1 or ww < 1:
            raise ValueError(f"input {h}x{w} too small for 2x2 pooling")
        tiles = (
            x[:, :, : 2 * hh, : 2 * ww]
            .reshape(b, c, hh, 2, ww, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, hh, ww, 4)
        )
        self._argmax = np.argmax(tiles, axis=4)
        self._in_shape = x.shape
        return np.take_along_axis(tiles, self._argmax[..., None], axis=4)[..., 0]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        b, c, h, w = self._in_shape
        hh, ww = h // 2, w // 2
        tiles = np.zeros((b, c, hh, ww, 4))
        np.put_along_axis(tiles, self._argmax[..., None], grad_out[..., None], axis=4)
        grad = np.zeros(self._in_shape)
        grad[:, :, : 2 * hh, : 2 * ww] = (
            tiles.reshape(b, c, hh, ww, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, 2 * hh, 2 * ww)
        )
        return grad


class Replicate(Layer):
    """Repeat each channel n times, creating the orientation axis.

    (batch, C, H, W) -> (batch, C*n, H, W) with channel-major layout, so a
    grayscale image becomes N' identical orientation channels for the first
    orientation conv.  Backward sums gradients over the replicas.
    """

    def __init__(self, n: int):
        if n < 1:
            raise ValueError(f"replication factor must be >= 1, got {n}")
        self.n = n

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _check_activations(x)
        return np.repeat(x, self.n, axis=1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        b, cn, h, w = grad_out.shape
        return grad_out.reshape(b, cn // self.n, self.n, h, w).sum(axis=2)


class OrientPool(Layer):
    """Max over the U orientation channels of each filter (network head)."""

    def __init__(self, n_orient: int):
        if n_orient < 1:
            raise ValueError(f"n_orient must be >= 1, got {n_orient}")
        self.n_orient = n_orient

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = _check_activations(x)
        b, cu, h, w = x.shape
        if cu % self.n_orient:
            raise ValueError(f"{cu} channels not divisible by U={self.n_orient}")
        groups = x.reshape(b, cu // self.n_orient, self.n_orient, h, w)
        self._argmax = np.argmax(groups, axis=2)
        self._in_shape = x.shape
        return np.take_along_axis(groups, self._argmax[:, :, None], axis=2)[:, :, 0]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        b, cu, h, w = self._in_shape
        groups = np.zeros((b, cu // self.n_orient, self.n_orient, h, w))
        np.put_along_axis(groups, self._argmax[:, :, None], grad_out[:, :, None], axis=2)
        return groups.reshape(self._in_shape)


class Flatten(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out.reshape(self._in_shape)


class Dropout(Layer):
    """Inverted dropout; identity when train_mode is off."""

    def __init__(self, rng: np.random.Generator, rate: float = 0.5):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if not self.train_mode or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return grad_out
        return grad_out * self._mask


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weights = _uniform_init(rng, (n_in, n_out), n_in)
        self.bias = np.zeros(n_out)
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weights.shape[0]:
            raise ValueError(
                f"expected (batch, {self.weights.shape[0]}), got {x.shape}"
            )
        self._x = x
        return x @ self.weights + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward called before forward")
        self.grad_weights = self._x.T @ grad_out
        self.grad_bias = grad_out.sum(axis=0)
        return grad_out @ self.weights.T

    def params(self) -> List[np.ndarray]:
        return [self.weights, self.bias]

    def param_grads(self) -> List[np.ndarray]:
        return [self.grad_weights, self.grad_bias]


# ---------------------------------------------------------------------------
# loss and update


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) vs integer labels, and its
    gradient wrt the logits.  Stabilized by max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (batch, classes), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("labels out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    b = logits.shape[0]
    loss = float((log_z - shifted[np.arange(b), labels]).mean())
    grad = np.exp(shifted) / np.exp(log_z)[:, None]
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def sgd_step(layer: Layer, lr: float, weight_decay: float = 0.0) -> None:
    """In-place SGD update from the layer's cached gradients.

    w <- w - lr * (grad + weight_decay * w).  Only declared parameters move;
    modulators and caches are untouched.
    """
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if weight_decay < 0.0:
        raise ValueError(f"weight decay must be non-negative, got {weight_decay}")
    for p, g in zip(layer.params(), layer.param_grads()):
        p -= lr * (g + weight_decay * p)
