"""Landmark factorization of an oriented filter bank.

Given the flattened bank X (W^2 x n), alternately minimizes

    ||X - U V||_F^2 + lam*||U||_* + mu*||V||_* + gamma*||Z||_1 + rho*||V - Y Z||_F^2

over U (m x p), V (p x n), Y (p x q), Z (q x n).  The products U.Y are the
q landmark filters; Z holds the sparse coefficients reconstructing every
oriented filter from them.  Y is refit exactly by ridge least squares each
sweep; U and V take one singular-value-thresholding proximal-gradient step
each; Z takes one iterative soft-shrinkage step.  All steps use Lipschitz
step sizes, so the objective never increases.

Also provides the retained-energy ratio D used to score a factorization,
a block-diagonality diagnostic for coefficient matrices over labeled
column groups, and a deterministic hyperparameter sweep.
"""

import concurrent.futures
import csv
import io
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import gabor
from .gabor import BankFormatError, FilterMatrix, GaborBankSpec
from .linalg import (
    NumericalError,
    as_matrix,
    frobenius_norm_sq,
    nuclear_norm,
    soft_threshold,
    solve_least_squares,
    spectral_norm,
    svt,
)

# keeps proximal steps finite when a factor collapses to zero
STEP_EPS = 1e-12
# ridge on the Y refit; the gram Z Z^T is singular whenever Z loses row rank
Y_RIDGE = 1e-10
# Z starts at a small gain relative to the balanced U, V scale.  The first
# exact Y refit then lands at high gain, where the l1 threshold
# gamma/(2*rho*smax(Y)^2) is negligible against the entries of the shrinkage
# step (threshold falls off quadratically in smax(Y), entries only linearly).
# Starting Z at full scale instead puts every entry under the first threshold
# and Z = 0 -> Y = 0 is absorbing: dead rows of Z have zero gradient forever.
COEFF_INIT_GAIN = 0.03

GRID_VALUES = (0.001, 0.005, 0.01, 0.05, 0.1, 0.5)

MatrixLike = Union[np.ndarray, FilterMatrix]


def _data(x: MatrixLike) -> np.ndarray:
    if isinstance(x, FilterMatrix):
        return x.x
    return as_matrix(x)


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters of the factorization.

    q is the landmark count; p the inner rank (defaults to 2q at fit time,
    clipped to the data dimensions).  lam/mu weight the nuclear norms of
    U/V, gamma the l1 norm of Z, rho the coupling ||V - YZ||_F^2.
    """

    q: int
    p: Optional[int] = None
    lam: float = 0.01
    mu: float = 0.005
    gamma: float = 0.005
    rho: float = 0.005
    max_iters: int = 500
    rel_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.q < 1:
            raise ValueError(f"q must be positive, got {self.q}")
        if self.p is not None and self.p < self.q:
            raise ValueError(f"p ({self.p}) must be >= q ({self.q})")
        for name in ("lam", "mu", "gamma", "rho"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be positive, got {self.max_iters}")
        if not 0.0 < self.rel_tol < 1.0:
            raise ValueError(f"rel_tol must lie in (0, 1), got {self.rel_tol}")

    def resolved_p(self, m: int, n: int) -> int:
        p = 2 * self.q if self.p is None else self.p
        if not self.q <= p <= min(m, n):
            raise ValueError(
                f"need q <= p <= min(m, n); got q={self.q}, p={p}, "
                f"data shape {(m, n)}"
            )
        return p


@dataclass
class FactorizationState:
    u: np.ndarray  # m x p
    v: np.ndarray  # p x n
    y: np.ndarray  # p x q
    z: np.ndarray  # q x n
    objective_history: List[float] = field(default_factory=list)
    iters_run: int = 0


def _check_shapes(xm: np.ndarray, s: FactorizationState) -> None:
    m, n = xm.shape
    p = s.u.shape[1]
    q = s.y.shape[1]
    if s.u.shape != (m, p) or s.v.shape != (p, n):
        raise ValueError(f"U {s.u.shape} / V {s.v.shape} do not factor X {xm.shape}")
    if s.y.shape != (p, q) or s.z.shape != (q, n):
        raise ValueError(f"Y {s.y.shape} / Z {s.z.shape} do not factor V {s.v.shape}")


def objective(x: MatrixLike, s: FactorizationState, cfg: SolverConfig) -> float:
    """Value of the full composite objective at the current factors."""
    xm = _data(x)
    _check_shapes(xm, s)
    return (
        frobenius_norm_sq(xm - s.u @ s.v)
        + cfg.lam * nuclear_norm(s.u)
        + cfg.mu * nuclear_norm(s.v)
        + cfg.gamma * float(np.abs(s.z).sum())
        + cfg.rho * frobenius_norm_sq(s.v - s.y @ s.z)
    )


def _guarded_objective(
    xm: np.ndarray, s: FactorizationState, cfg: SolverConfig, where: str
) -> float:
    # shapes were validated on entry to fit(), so a ValueError here means
    # NaN/Inf appeared in an intermediate product
    try:
        f = objective(xm, s, cfg)
    except ValueError as exc:
        raise NumericalError(f"objective non-finite at {where}: {exc}") from exc
    if not np.isfinite(f):
        raise NumericalError(f"objective non-finite ({f}) at {where}")
    return f


def update_y(s: FactorizationState, cfg: SolverConfig) -> np.ndarray:
    """Exact minimizer of ||V - YZ||_F^2 over Y (ridge-stabilized)."""
    return solve_least_squares(s.z, s.v, ridge=Y_RIDGE)


def update_u(x: MatrixLike, s: FactorizationState, cfg: SolverConfig) -> np.ndarray:
    """One proximal-gradient step on ||X - UV||_F^2 + lam*||U||_*."""
    xm = _data(x)
    t = 1.0 / (2.0 * spectral_norm(s.v) ** 2 + STEP_EPS)
    grad = 2.0 * (s.u @ s.v - xm) @ s.v.T
    return svt(s.u - t * grad, cfg.lam * t)


def update_v(x: MatrixLike, s: FactorizationState, cfg: SolverConfig) -> np.ndarray:
    """One proximal-gradient step on
    ||X - UV||_F^2 + mu*||V||_* + rho*||V - YZ||_F^2."""
    xm = _data(x)
    t = 1.0 / (2.0 * spectral_norm(s.u) ** 2 + 2.0 * cfg.rho)
    grad = 2.0 * s.u.T @ (s.u @ s.v - xm) + 2.0 * cfg.rho * (s.v - s.y @ s.z)
    return svt(s.v - t * grad, cfg.mu * t)


def update_z(s: FactorizationState, cfg: SolverConfig) -> np.ndarray:
    """One soft-shrinkage step on gamma*||Z||_1 + rho*||V - YZ||_F^2."""
    t = 1.0 / (2.0 * cfg.rho * spectral_norm(s.y) ** 2 + STEP_EPS)
    grad = 2.0 * cfg.rho * s.y.T @ (s.y @ s.z - s.v)
    return soft_threshold(s.z - t * grad, cfg.gamma * t)


def _raw_initial_state(m: int, n: int, p: int, q: int, seed: int) -> FactorizationState:
    rng = np.random.default_rng(seed)

    def init(rows, cols):
        return rng.uniform(-0.5, 0.5, size=(rows, cols)) / np.sqrt(max(rows, cols))

    return FactorizationState(
        u=init(m, p), v=init(p, n), y=init(p, q), z=init(q, n)
    )


def initial_factors(
    x: MatrixLike, cfg: SolverConfig
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """The seeded starting point fit() uses: uniform draws rescaled so the
    initial product U.V carries the data's Frobenius norm, with Z at
    COEFF_INIT_GAIN of that scale (see the constant's comment)."""
    xm = _data(x)
    m, n = xm.shape
    p = cfg.resolved_p(m, n)
    s = _raw_initial_state(m, n, p, cfg.q, cfg.seed)
    alpha = np.sqrt(
        np.sqrt(frobenius_norm_sq(xm)) / max(np.linalg.norm(s.u @ s.v), 1e-300)
    )
    return s.u * alpha, s.v * alpha, s.y * alpha, s.z * (alpha * COEFF_INIT_GAIN)


def fit(
    x: MatrixLike,
    cfg: SolverConfig,
    init: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = None,
) -> FactorizationState:
    """Run the alternating minimization from a seeded (or given) start.

    Each outer iteration refits Y, then steps U, V, Z in that order.  Stops
    when the relative objective change drops below cfg.rel_tol or after
    cfg.max_iters iterations.  objective_history[0] is the value at the
    initial point; one entry is appended per iteration.

    ``init`` overrides the seeded initialization with explicit (U, V, Y, Z)
    factors — used e.g. to verify permutation equivariance.
    """
    xm = _data(x)
    m, n = xm.shape
    p = cfg.resolved_p(m, n)
    q = cfg.q
    if init is None:
        u0, v0, y0, z0 = initial_factors(xm, cfg)
        s = FactorizationState(u=u0, v=v0, y=y0, z=z0)
    else:
        u0, v0, y0, z0 = (as_matrix(a).copy() for a in init)
        s = FactorizationState(u=u0, v=v0, y=y0, z=z0)
        _check_shapes(xm, s)
        if s.u.shape[1] != p or s.y.shape[1] != q:
            raise ValueError("explicit init does not match configured p, q")

    f_prev = _guarded_objective(xm, s, cfg, "the initial point")
    s.objective_history = [f_prev]
    s.iters_run = 0
    for it in range(1, cfg.max_iters + 1):
        s.y = update_y(s, cfg)
        s.u = update_u(xm, s, cfg)
        s.v = update_v(xm, s, cfg)
        s.z = update_z(s, cfg)
        f = _guarded_objective(xm, s, cfg, f"iteration {it}")
        s.objective_history.append(f)
        s.iters_run = it
        if abs(f - f_prev) / max(f_prev, 1e-12) < cfg.rel_tol:
            break
        f_prev = f
    return s


def approximation_degree(
    x: MatrixLike, s: FactorizationState, through_uv: bool = False
) -> float:
    """Retained energy D = ||Xhat||_F^2 / ||X||_F^2.

    Xhat reconstructs through the landmarks (U.Y.Z); pass through_uv=True
    to score the unconstrained two-factor reconstruction U.V instead.
    """
    xm = _data(x)
    denom = frobenius_norm_sq(xm)
    if denom == 0.0:
        raise ValueError("approximation degree undefined for zero-norm input")
    xhat = s.u @ s.v if through_uv else s.u @ s.y @ s.z
    return frobenius_norm_sq(xhat) / denom


def block_diagonality_score(z: np.ndarray, labels: Sequence[int]) -> float:
    """Fraction of the L1 mass of Z lying in its dominant blocks.

    ``labels`` assigns each column of Z to a group.  Each row is assigned
    to the group where most of its absolute mass falls (ties go to the
    lowest-valued label); the score is the fraction of total |Z| mass
    inside the assigned row/column blocks.  1.0 means perfectly block
    diagonal under some row permutation.
    """
    z = as_matrix(z)
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != z.shape[1]:
        raise ValueError(
            f"labels length {labels.shape} does not match {z.shape[1]} columns"
        )
    total = np.abs(z).sum()
    if total == 0.0:
        raise ValueError("block diagonality undefined for an all-zero matrix")
    groups = np.unique(labels)  # sorted, so argmax tie-break favors low labels
    mass = np.column_stack([np.abs(z[:, labels == g]).sum(axis=1) for g in groups])
    assigned = np.argmax(mass, axis=1)
    inside = mass[np.arange(z.shape[0]), assigned].sum()
    return float(inside / total)


# ---------------------------------------------------------------------------
# hyperparameter sweep


@dataclass
class SweepRow:
    rho: float
    mu: float
    gamma: float
    lam: float
    d: Optional[float] = None
    iters: Optional[int] = None
    objective: Optional[float] = None
    error: Optional[str] = None


def default_grid() -> List[Tuple[float, float, float, float]]:
    """Tied grid: rho = mu = gamma swept jointly against lam; 36 tuples."""
    return [(a, a, a, lam) for a in GRID_VALUES for lam in GRID_VALUES]


def _sweep_one(
    x: np.ndarray, params: Tuple[float, float, float, float], cfg: SolverConfig
) -> SweepRow:
    rho, mu, gamma, lam = (float(v) for v in params)
    row = SweepRow(rho=rho, mu=mu, gamma=gamma, lam=lam)
    try:
        run_cfg = SolverConfig(
            q=cfg.q,
            p=cfg.p,
            lam=lam,
            mu=mu,
            gamma=gamma,
            rho=rho,
            max_iters=cfg.max_iters,
            rel_tol=cfg.rel_tol,
            seed=cfg.seed,
        )
        state = fit(x, run_cfg)
        row.d = approximation_degree(x, state)
        row.iters = state.iters_run
        row.objective = state.objective_history[-1]
    except (ValueError, NumericalError) as exc:
        row.error = str(exc)
    return row


def parameter_sweep(
    x: MatrixLike,
    grid: Sequence[Tuple[float, float, float, float]],
    cfg: SolverConfig,
    jobs: int = 1,
) -> List[SweepRow]:
    """Fit once per (rho, mu, gamma, lam) tuple, all from cfg's seed.

    Rows come back sorted by D descending; rows whose fit raised carry the
    message in .error and sort to the end.  Results are deterministic
    regardless of ``jobs``.
    """
    if not grid:
        raise ValueError("sweep grid must not be empty")
    xm = _data(x)
    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda t: _sweep_one(xm, t, cfg), grid))
    else:
        rows = [_sweep_one(xm, t, cfg) for t in grid]
    return sorted(rows, key=lambda r: -np.inf if r.d is None else r.d, reverse=True)


SWEEP_CSV_HEADER = ("rho", "mu", "gamma", "lambda", "D", "iters", "objective", "error")


def sweep_to_csv(rows: Sequence[SweepRow], path) -> None:
    """Write sweep results.

    Failed rows leave D/iters/objective empty and carry the failure message
    in the trailing ``error`` column; successful rows leave it blank.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_HEADER)
        for r in rows:
            if r.error is None:
                writer.writerow(
                    [
                        repr(r.rho),
                        repr(r.mu),
                        repr(r.gamma),
                        repr(r.lam),
                        repr(r.d),
                        r.iters,
                        repr(r.objective),
                        "",
                    ]
                )
            else:
                writer.writerow(
                    [repr(r.rho), repr(r.mu), repr(r.gamma), repr(r.lam), "", "", "", r.error]
                )


# ---------------------------------------------------------------------------
# landmark bank


@dataclass
class LandmarkBank:
    """The distilled bank: q landmark filters plus mixing coefficients.

    landmarks is W^2 x q (columns are flattened filters), coefficients is
    q x n; landmarks @ coefficients approximates the source filter matrix.
    angles[j] is the orientation (degrees) of source column j.
    """

    landmarks: np.ndarray
    coefficients: np.ndarray
    spec: GaborBankSpec
    angles: Tuple[float, ...]
    scale_index: int = 1

    def __post_init__(self):
        self.landmarks = as_matrix(self.landmarks)
        self.coefficients = as_matrix(self.coefficients)
        if self.landmarks.shape[1] != self.coefficients.shape[0]:
            raise ValueError(
                f"landmarks {self.landmarks.shape} and coefficients "
                f"{self.coefficients.shape} do not chain"
            )
        if self.landmarks.shape[0] != self.spec.kernel_size**2:
            raise ValueError("landmark rows do not match kernel_size^2")
        if len(self.angles) != self.coefficients.shape[1]:
            raise ValueError("angle list does not match coefficient columns")

    @property
    def q(self) -> int:
        return self.landmarks.shape[1]

    def reconstruction(self) -> np.ndarray:
        return self.landmarks @ self.coefficients


def make_landmark_bank(fm: FilterMatrix, s: FactorizationState) -> LandmarkBank:
    """Package a fitted factorization as U.Y landmarks plus Z coefficients."""
    if fm.angles is not None:
        angles = tuple(fm.angles)
    else:
        # banks restored from disk drop the angle list; rebuild the uniform
        # [0, 180) lattice the format documents from the column count
        n = fm.x.shape[1]
        angles = tuple(i * 180.0 / n for i in range(n))
    return LandmarkBank(
        landmarks=s.u @ s.y,
        coefficients=s.z,
        spec=fm.spec,
        angles=angles,
        scale_index=fm.scale_index,
    )


_Z_HEADER = struct.Struct("<4sIII")  # magic, z rows, z cols, n angles
Z_SECTION_MAGIC = b"LGFZ"


def write_landmark_bank(bank: LandmarkBank, path) -> None:
    """Landmark file = one bank section (the landmarks) + a Z section."""
    q, n = bank.coefficients.shape
    buf = io.BytesIO()
    gabor.write_section(buf, bank.landmarks, bank.spec, bank.scale_index)
    buf.write(_Z_HEADER.pack(Z_SECTION_MAGIC, q, n, len(bank.angles)))
    buf.write(np.ascontiguousarray(bank.coefficients, dtype="<f8").tobytes())
    buf.write(np.asarray(bank.angles, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_landmark_bank(path) -> LandmarkBank:
    with open(path, "rb") as fh:
        landmarks, spec, scale_index = gabor.read_section(fh)
        magic, q, n, n_angles = _Z_HEADER.unpack(gabor.read_exact(fh, _Z_HEADER.size))
        if magic != Z_SECTION_MAGIC:
            raise BankFormatError(
                f"bad coefficient section magic {magic!r}, expected {Z_SECTION_MAGIC!r}"
            )
        if q != landmarks.shape[1]:
            raise BankFormatError(
                f"coefficient rows {q} do not match {landmarks.shape[1]} landmarks"
            )
        if n_angles != n:
            raise BankFormatError(f"{n_angles} angles for {n} coefficient columns")
        z = np.frombuffer(gabor.read_exact(fh, q * n * 8), dtype="<f8").reshape(q, n)
        angles = np.frombuffer(gabor.read_exact(fh, n_angles * 8), dtype="<f8")
        if fh.read(1):
            raise BankFormatError("trailing bytes after landmark payload")
    return LandmarkBank(
        landmarks=landmarks,
        coefficients=z.copy(),
        spec=spec,
        angles=tuple(float(a) for a in angles),
        scale_index=scale_index,
    )
