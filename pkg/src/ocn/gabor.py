"""Oriented Gabor filter bank generation and the flattened filter matrix.

A bank is sampled from the complex Gabor family

    g(z) = (k^2 / sigma^2) * exp(-k^2 |z|^2 / (2 sigma^2)) * (e^{i k.z} - e^{-sigma^2/2})

evaluated on a centered integer grid, with wave vector magnitude
``k_v = (pi/2) / sqrt(2)^(v-1)`` at scale v and direction set by the
orientation angle.  By default the real (even-symmetric) part is used; the
imaginary part is available behind a flag.  The subtracted constant removes
the DC response in the continuous domain.

Filters at several orientations are flattened column-wise into the matrix
consumed by the landmark factorization solver.
"""

import io
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .linalg import as_matrix

DEFAULT_SIGMA = 2.0 * np.pi

BANK_MAGIC = b"LGFB"
BANK_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIII")  # magic, version, rows, cols, W, n_orient, n_scale, scale_index


class BankFormatError(ValueError):
    """Malformed bank file: bad magic, truncation, or inconsistent sizes."""


@dataclass(frozen=True)
class GaborBankSpec:
    """Parameters of an oriented filter bank.

    ``n_orient`` is the orientation count of the modulation lattice (angle
    u*180/n_orient for index u), ``n_scale`` the number of frequency scales,
    ``orientation_step`` the sampling interval in degrees used when a bank
    is sampled finer than the lattice.
    """

    n_orient: int
    n_scale: int
    kernel_size: int
    sigma: float = DEFAULT_SIGMA
    orientation_step: float = 5.0

    def __post_init__(self):
        if self.n_orient < 1:
            raise ValueError(f"n_orient must be positive, got {self.n_orient}")
        if self.n_scale < 1:
            raise ValueError(f"n_scale must be positive, got {self.n_scale}")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError(
                f"kernel_size must be odd and >= 3, got {self.kernel_size}"
            )
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.orientation_step <= 0:
            raise ValueError(
                f"orientation_step must be positive, got {self.orientation_step}"
            )
        if self.n_orient * self.orientation_step > 360.0:
            raise ValueError("n_orient * orientation_step must not exceed 360 degrees")


def wave_number(v: int, n_scale: Optional[int] = None) -> float:
    """Wave vector magnitude k_v = (pi/2) / sqrt(2)^(v-1) for scale v >= 1."""
    if v < 1 or (n_scale is not None and v > n_scale):
        raise ValueError(f"scale index {v} out of range")
    return (np.pi / 2.0) / np.sqrt(2.0) ** (v - 1)


def gabor_kernel_at(
    spec: GaborBankSpec,
    angle_deg: float,
    v: int,
    imaginary: bool = False,
    frequency: Optional[float] = None,
) -> np.ndarray:
    """Evaluate the Gabor kernel at a continuous orientation angle (degrees).

    ``frequency`` overrides the scale law k_v when given (so any central
    frequency convention can be expressed directly).  Returns a W x W array;
    row index is y, column index is x, both centered.
    """
    if frequency is None:
        k = wave_number(v, spec.n_scale)
    else:
        if frequency <= 0:
            raise ValueError(f"frequency must be positive, got {frequency}")
        k = float(frequency)
    half = (spec.kernel_size - 1) // 2
    y, x = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    phi = np.deg2rad(angle_deg)
    envelope = (k * k / spec.sigma**2) * np.exp(
        -(k * k) * (x * x + y * y) / (2.0 * spec.sigma**2)
    )
    phase = k * (x * np.cos(phi) + y * np.sin(phi))
    if imaginary:
        carrier = np.sin(phase)
    else:
        carrier = np.cos(phase) - np.exp(-(spec.sigma**2) / 2.0)
    return envelope * carrier


def gabor_kernel(
    spec: GaborBankSpec, u: int, v: int, imaginary: bool = False
) -> np.ndarray:
    """Kernel at orientation index u (angle u*180/n_orient degrees), scale v."""
    if not 0 <= u < spec.n_orient:
        raise ValueError(f"orientation index {u} out of range [0, {spec.n_orient})")
    return gabor_kernel_at(spec, u * 180.0 / spec.n_orient, v, imaginary=imaginary)


@dataclass
class FilterMatrix:
    """Flattened oriented filters: column j is the kernel at angles[j].

    ``x`` is W^2 x n.  ``angles`` is None for matrices restored from disk
    (the bank file format does not persist the angle list).
    """

    x: np.ndarray
    spec: GaborBankSpec
    scale_index: int
    angles: Optional[tuple] = field(default=None)

    def __post_init__(self):
        self.x = as_matrix(self.x)
        if self.x.shape[0] != self.spec.kernel_size**2:
            raise ValueError(
                f"filter matrix has {self.x.shape[0]} rows, expected "
                f"kernel_size^2 = {self.spec.kernel_size ** 2}"
            )
        if not np.abs(self.x).max(axis=0).all():
            raise ValueError("filter matrix contains an all-zero column")


def default_angles(spec: GaborBankSpec, full_circle: bool = False) -> tuple:
    """Uniform angle lattice at spec.orientation_step over [0, 180) degrees.

    The real part has period 180 degrees in orientation; pass
    ``full_circle=True`` for the [0, 360) range.
    """
    stop = 360.0 if full_circle else 180.0
    return tuple(np.arange(0.0, stop, spec.orientation_step, dtype=np.float64))


def build_filter_matrix(
    spec: GaborBankSpec,
    v: int,
    angles: Sequence[float],
    imaginary: bool = False,
) -> FilterMatrix:
    """Stack kernels at the given angles (degrees) as flattened columns."""
    angles = tuple(float(a) for a in angles)
    if not angles:
        raise ValueError("angle list must not be empty")
    for a in angles:
        if not 0.0 <= a < 360.0:
            raise ValueError(f"angle {a} outside [0, 360)")
    if len(set(angles)) != len(angles):
        raise ValueError("duplicate angles in bank")
    cols = [
        gabor_kernel_at(spec, a, v, imaginary=imaginary).ravel(order="C")
        for a in angles
    ]
    x = np.column_stack(cols)
    return FilterMatrix(x=x, spec=spec, scale_index=v, angles=angles)


def write_section(fh, x: np.ndarray, spec: GaborBankSpec, scale_index: int) -> None:
    """Write one headered float64 matrix section (shared by bank and
    landmark files)."""
    rows, cols = x.shape
    if rows * cols >= 2**29:  # payload length must fit the u32 header fields
        raise BankFormatError(f"matrix of shape {x.shape} too large for format")
    fh.write(
        _HEADER.pack(
            BANK_MAGIC,
            BANK_FORMAT_VERSION,
            rows,
            cols,
            spec.kernel_size,
            spec.n_orient,
            spec.n_scale,
            scale_index,
        )
    )
    fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())


def read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise BankFormatError(f"truncated bank file (wanted {n} bytes, got {len(buf)})")
    return buf


def read_section(fh):
    """Read one matrix section; returns (x, spec, scale_index)."""
    magic, version, rows, cols, w, n_orient, n_scale, scale_index = _HEADER.unpack(
        read_exact(fh, _HEADER.size)
    )
    if magic != BANK_MAGIC:
        raise BankFormatError(f"bad magic {magic!r}, expected {BANK_MAGIC!r}")
    if version != BANK_FORMAT_VERSION:
        raise BankFormatError(f"unsupported bank format version {version}")
    if rows != w * w:
        raise BankFormatError(f"rows {rows} does not match kernel size {w}")
    if rows * cols >= 2**29:
        raise BankFormatError("header dimensions overflow sane payload size")
    payload = read_exact(fh, rows * cols * 8)
    x = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
    # sigma and the angle lattice are not persisted by the format; restore
    # defaults consistent with a uniform [0, 180) sampling.
    spec = GaborBankSpec(
        n_orient=n_orient,
        n_scale=n_scale,
        kernel_size=w,
        sigma=DEFAULT_SIGMA,
        orientation_step=180.0 / max(n_orient, 1),
    )
    return x, spec, scale_index


def serialize_bank(fm: FilterMatrix, path) -> None:
    """Write a bank file (magic LGFB, fixed little-endian layout)."""
    buf = io.BytesIO()
    write_section(buf, fm.x, fm.spec, fm.scale_index)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def deserialize_bank(path) -> FilterMatrix:
    """Read a bank file written by serialize_bank; payload is bit-exact."""
    with open(path, "rb") as fh:
        x, spec, scale_index = read_section(fh)
        if fh.read(1):
            raise BankFormatError("trailing bytes after bank payload")
    return FilterMatrix(x=x, spec=spec, scale_index=scale_index, angles=None)
