"""Digit dataset handling: IDX files, rotation, stratified subsets.

Readers follow the published IDX layout (big-endian, magic-typed headers);
pixels are scaled to [0, 1].  Rotation is bilinear about the image center
with zero fill, which is what the rotated-evaluation protocol uses to
synthesize orientation-shifted test sets.  A small procedural digit
renderer provides a stand-in corpus for environments without the real
files.
"""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
# refuse headers pretending to need more than ~1 GB of pixels
MAX_ELEMENTS = 2**30

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


class IdxFormatError(ValueError):
    """Raised when an IDX file is malformed (magic, dims, or payload)."""


def _open_for_read(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def read_idx_images(path) -> np.ndarray:
    """Read an IDX image file into (count, rows, cols) float64 in [0, 1]."""
    with _open_for_read(path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16))
        if magic != IMAGES_MAGIC:
            raise IdxFormatError(f"bad image magic 0x{magic:08x}")
        total = count * rows * cols
        if total > MAX_ELEMENTS:
            raise IdxFormatError(f"header declares {total} pixels; refusing")
        raw = np.frombuffer(_read_exact(fh, total), dtype=np.uint8)
        if fh.read(1):
            raise IdxFormatError("trailing bytes after image payload")
    return raw.reshape(count, rows, cols).astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    """Read an IDX label file into a (count,) int64 array."""
    with _open_for_read(path) as fh:
        magic, count = struct.unpack(">II", _read_exact(fh, 8))
        if magic != LABELS_MAGIC:
            raise IdxFormatError(f"bad label magic 0x{magic:08x}")
        if count > MAX_ELEMENTS:
            raise IdxFormatError(f"header declares {count} labels; refusing")
        raw = np.frombuffer(_read_exact(fh, count), dtype=np.uint8)
        if fh.read(1):
            raise IdxFormatError("trailing bytes after label payload")
    return raw.astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write uint8 images (count, rows, cols) in IDX layout."""
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise ValueError("images must be uint8 with shape (count, rows, cols)")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    """Write labels (count,) of small non-negative ints in IDX layout."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.min() < 0 or labels.max() > 255:
        raise ValueError("labels must be a 1-D array of bytes")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


@dataclass
class LabeledImages:
    """Normalized 28x28 digit images with labels in [0, 10)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3 or self.images.shape[1:] != (28, 28):
            raise ValueError(f"images must be (count, 28, 28), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"{self.labels.shape[0]} labels for {self.images.shape[0]} images"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise ValueError("labels outside [0, 10)")

    def __len__(self) -> int:
        return self.images.shape[0]


def _resolve(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name}[.gz] not found under {data_dir}")


def load_dataset(data_dir, train: bool = True) -> LabeledImages:
    """Load the standard-named train or test split from a directory."""
    data_dir = Path(data_dir)
    img_name, lbl_name = (
        (TRAIN_IMAGES, TRAIN_LABELS) if train else (TEST_IMAGES, TEST_LABELS)
    )
    images = read_idx_images(_resolve(data_dir, img_name))
    if images.shape[1:] != (28, 28):
        raise IdxFormatError(f"expected 28x28 images, got {images.shape[1:]}")
    labels = read_idx_labels(_resolve(data_dir, lbl_name))
    return LabeledImages(images=images, labels=labels)


# ---------------------------------------------------------------------------
# rotation


def rotate_image(img: np.ndarray, angle_degrees: float) -> np.ndarray:
    """Rotate by angle_degrees about the image center.

    Bilinear resampling, zero fill outside the source frame.  Quarter-turn
    angles reduce to (near-)exact index permutations because the center
    (N-1)/2 maps the pixel grid onto itself.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    theta = np.deg2rad(angle_degrees % 360.0)
    if theta == 0.0:
        return img.copy()
    h, w = img.shape
    mr, mc = (h - 1) / 2.0, (w - 1) / 2.0
    r, c = np.mgrid[0:h, 0:w]
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_r = mr + (r - mr) * cos_t + (c - mc) * sin_t
    src_c = mc - (r - mr) * sin_t + (c - mc) * cos_t

    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0

    out = np.zeros_like(img)
    for dr, dc, weight in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr, cc = r0 + dr, c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        out[valid] += weight[valid] * img[rr[valid], cc[valid]]
    return out


def rotate_dataset(
    data: LabeledImages,
    angles: Optional[Sequence[float]],
    seed: int,
) -> LabeledImages:
    """Rotate every image by a seeded random angle.

    angles=None draws uniformly from [0, 360); otherwise each image gets a
    uniform choice from the given list (so [0] is a no-op evaluation).
    """
    rng = np.random.default_rng(seed)
    n = len(data)
    if angles is None:
        drawn = rng.uniform(0.0, 360.0, size=n)
    else:
        pool = np.asarray(list(angles), dtype=np.float64)
        if pool.size == 0:
            raise ValueError("angle list must not be empty")
        drawn = pool[rng.integers(0, pool.size, size=n)]
    rotated = np.stack([rotate_image(im, a) for im, a in zip(data.images, drawn)])
    return LabeledImages(images=np.clip(rotated, 0.0, 1.0), labels=data.labels.copy())


# ---------------------------------------------------------------------------
# subsetting


def subset(data: LabeledImages, n: int, seed: int) -> LabeledImages:
    """Seeded class-stratified sample of n images, original order preserved.

    Per-class quotas are proportional with largest-remainder rounding
    (ties to the lower class id), so balanced data yields exactly balanced
    subsets.
    """
    total = len(data)
    if n < 0 or n > total:
        raise ValueError(f"cannot take {n} of {total} samples")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(data.labels, return_counts=True)
    quotas = n * counts / total
    alloc = np.floor(quotas).astype(np.int64)
    remainders = quotas - alloc
    leftover = n - int(alloc.sum())
    if leftover:
        order = sorted(range(len(classes)), key=lambda i: (-remainders[i], classes[i]))
        for i in order[:leftover]:
            alloc[i] += 1
    keep = []
    for cls, k in zip(classes, alloc):
        idx = np.flatnonzero(data.labels == cls)
        keep.append(rng.choice(idx, size=k, replace=False))
    chosen = np.sort(np.concatenate(keep))
    return LabeledImages(images=data.images[chosen].copy(), labels=data.labels[chosen].copy())


# ---------------------------------------------------------------------------
# procedural digits (stand-in corpus)

# seven-segment endpoints in unit coordinates (x right, y down)
_SEGMENTS = {
    "a": ((0.30, 0.20), (0.70, 0.20)),
    "b": ((0.70, 0.20), (0.70, 0.50)),
    "c": ((0.70, 0.50), (0.70, 0.80)),
    "d": ((0.30, 0.80), (0.70, 0.80)),
    "e": ((0.30, 0.50), (0.30, 0.80)),
    "f": ((0.30, 0.20), (0.30, 0.50)),
    "g": ((0.30, 0.50), (0.70, 0.50)),
}
_DIGIT_SEGMENTS = (
    "abcdef",  # 0
    "bc",      # 1
    "abged",   # 2
    "abgcd",   # 3
    "fgbc",    # 4
    "afgcd",   # 5
    "afgecd",  # 6
    "abc",     # 7
    "abcdefg", # 8
    "abcdfg",  # 9
)


def _render_digit(
    digit: int,
    size: int,
    shift: Tuple[float, float],
    scale: float,
    angle_deg: float,
    thickness: float,
    intensity: float,
) -> np.ndarray:
    """Rasterize a seven-segment glyph with a soft-edged stroke."""
    y, x = np.mgrid[0:size, 0:size] / (size - 1.0)
    theta = np.deg2rad(angle_deg)
    cx, cy = 0.5 + shift[0], 0.5 + shift[1]
    img = np.zeros((size, size))
    for name in _DIGIT_SEGMENTS[digit]:
        (x0, y0), (x1, y1) = _SEGMENTS[name]
        pts = np.array([[x0 - 0.5, y0 - 0.5], [x1 - 0.5, y1 - 0.5]]) * scale
        rot = np.array(
            [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        )
        (ax, ay), (bx, by) = pts @ rot.T + [cx, cy]
        # distance from every pixel to the segment
        vx, vy = bx - ax, by - ay
        denom = vx * vx + vy * vy
        t = np.clip(((x - ax) * vx + (y - ay) * vy) / max(denom, 1e-12), 0.0, 1.0)
        dist = np.hypot(x - (ax + t * vx), y - (ay + t * vy))
        img = np.maximum(img, np.clip((thickness - dist) / thickness * 2.0, 0.0, 1.0))
    return np.clip(img * intensity, 0.0, 1.0)


def synthesize_digits(n: int, seed: int, size: int = 28) -> LabeledImages:
    """Procedural digit corpus with seeded pose and stroke variation.

    Labels cycle 0..9 (balanced to the extent n allows); each glyph is
    jittered in position, scale, tilt, stroke width, and brightness so
    classifiers cannot rely on fixed pixel templates.
    """
    if n < 1:
        raise ValueError(f"need at least 1 sample, got {n}")
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        digit = i % 10
        labels[i] = digit
        images[i] = _render_digit(
            digit,
            size,
            shift=(rng.uniform(-0.06, 0.06), rng.uniform(-0.06, 0.06)),
            scale=rng.uniform(0.85, 1.1),
            angle_deg=rng.uniform(-12.0, 12.0),
            thickness=rng.uniform(0.055, 0.08),
            intensity=rng.uniform(0.75, 1.0),
        )
    # quantize like the on-disk format so IDX round-trips are exact
    images = np.round(images * 255.0) / 255.0
    return LabeledImages(images=images, labels=labels)


def write_dataset(data: LabeledImages, data_dir, train: bool = True) -> None:
    """Write a LabeledImages split under the standard IDX file names."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    img_name, lbl_name = (
        (TRAIN_IMAGES, TRAIN_LABELS) if train else (TEST_IMAGES, TEST_LABELS)
    )
    quantized = np.round(data.images * 255.0).astype(np.uint8)
    write_idx_images(data_dir / img_name, quantized)
    write_idx_labels(data_dir / lbl_name, data.labels)
