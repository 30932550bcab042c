"""Closed-form least-squares learning of convolution kernels.

Two estimators share the same normal-equation machinery:

* unconstrained: every kernel element is free, ridge-regularised by first
  differences of the kernel image;
* constrained: the kernel is the thin-ray centreline of each leg spread
  laterally by a per-depth filter (the *profile*); only the profile is
  learned.

All samples are stacked, so the Gram matrix ``S^T S`` is accumulated over
samples rather than materialising the tall stacked matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg.blas import dsyrk

from .convolution import ForwardModel, Kernel, build_slowness_toeplitz, kernel_grid
from .geometry import ImagingGrid, PairSchedule, SteeringPair, tx_leg

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-8


class SingularSystemError(np.linalg.LinAlgError):
    """The (regularised) normal equations have no unique solution."""


@dataclass
class TrainingSample:
    slowness: np.ndarray          # relative slowness, (nz, nx)
    delays: np.ndarray            # (P, nz, nx), schedule order
    schedule: PairSchedule
    masks: np.ndarray | None = None  # (P, nz, nx) bool, True = valid

    def __post_init__(self):
        self.slowness = np.asarray(self.slowness, dtype=float)
        self.delays = np.asarray(self.delays, dtype=float)
        expected = (len(self.schedule),) + self.slowness.shape
        if self.delays.shape != expected:
            raise ValueError(f"delays shape {self.delays.shape}, expected {expected}")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=bool)
            if self.masks.shape != expected:
                raise ValueError(f"mask shape {self.masks.shape}, expected {expected}")

    def pair_index(self, pair: SteeringPair) -> int:
        try:
            return self.schedule.pairs.index(pair)
        except ValueError:
            raise KeyError(f"pair {pair.as_tuple()} not in sample schedule") from None

    def rows(self, p: int) -> np.ndarray | None:
        """Flat indices of the valid measurements of pair ``p`` (None = all)."""
        if self.masks is None:
            return None
        return np.flatnonzero(self.masks[p].ravel())


@dataclass(frozen=True)
class RegularizerSpec:
    """Ridge weights and difference-operator settings.

    With ``relative=True`` the weights are multiplied by the largest
    absolute entry of the data Gram matrix, making defaults scale-free.
    """
    lambda_k: float = 1e-3
    lambda_f: float = 1e-3
    relative: bool = True
    pin_weight: float = 1e3
    lateral_weight: float = 1.0
    axial_weight: float = 1.0

    def __post_init__(self):
        if min(self.lambda_k, self.lambda_f, self.pin_weight,
               self.lateral_weight, self.axial_weight) < 0:
            raise ValueError("regularisation weights must be non-negative")


# ---------------------------------------------------------------- operators

def _first_differences(n: int) -> sp.csr_matrix:
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr")


def kernel_difference_operator(kernel_dims, lateral_weight=1.0, axial_weight=1.0) -> sp.csr_matrix:
    """Axial then lateral first differences of a row-major ``kz x kx`` image."""
    kz, kx = kernel_dims
    blocks = []
    if kz > 1:
        blocks.append(axial_weight * sp.kron(_first_differences(kz), sp.identity(kx)))
    if kx > 1:
        blocks.append(lateral_weight * sp.kron(sp.identity(kz), _first_differences(kx)))
    return sp.vstack(blocks, format="csr")


def profile_difference_operator(nz: int, n_c: int, lateral_weight=1.0, axial_weight=1.0,
                                pin_weight=1e3) -> sp.csr_matrix:
    """Regulariser for a ``(2 nz, n_c)`` profile matrix, vectorised row-major.

    Rows: lateral differences within each filter, axial differences between
    consecutive depths of the same leg, and weighted pins on the first and
    last filter taps.
    """
    n_rows = 2 * nz
    blocks = []
    if n_c > 1:
        blocks.append(lateral_weight * sp.kron(sp.identity(n_rows), _first_differences(n_c)))
    if nz > 1:
        per_leg = sp.kron(_first_differences(nz), sp.identity(n_c))
        blocks.append(axial_weight * sp.block_diag([per_leg, per_leg]))
    if pin_weight > 0:
        ends = sp.csr_matrix(([1.0, 1.0], ([0, 1], [0, n_c - 1])), shape=(2, n_c))
        blocks.append(pin_weight * sp.kron(sp.identity(n_rows), ends))
    return sp.vstack(blocks, format="csr")


@dataclass(frozen=True)
class PathBasis:
    matrix: sp.csr_matrix        # (kz*kx, 2*nz*n_c)
    legs: np.ndarray             # (2, kz, kx) signed centreline legs
    n_c: int
    kernel_dims: tuple[int, int]
    pair: SteeringPair
    grid: ImagingGrid

    @property
    def n_params(self) -> int:
        return self.matrix.shape[1]


def build_path_basis(grid: ImagingGrid, pair: SteeringPair, n_c: int, kernel_dims) -> PathBasis:
    """Matrix ``G`` mapping a profile to a kernel by rowwise lateral convolution.

    The two halves of the profile act on the ``theta1`` leg (positive) and
    the ``theta2`` leg (negative) of the differential path; their shared
    receive segment cancels and is not part of the basis.
    """
    if n_c < 1 or n_c % 2 != 1:
        raise ValueError(f"profile length must be odd and >= 1, got {n_c}")
    kz, kx = kernel_dims
    kgrid = kernel_grid(grid, kernel_dims)
    anchor = ((kx - 1) // 2, kz - 1)
    legs = np.stack([tx_leg(kgrid, pair.theta1_deg, anchor),
                     -tx_leg(kgrid, pair.theta2_deg, anchor)])
    half = (n_c - 1) // 2
    rows, cols, vals = [], [], []
    for leg in range(2):
        for r in range(kz):
            nzc = np.flatnonzero(legs[leg, r])
            if nzc.size == 0:
                continue
            for j in range(n_c):
                shifted = nzc + j - half
                ok = (shifted >= 0) & (shifted < kx)
                rows.append(r * kx + shifted[ok])
                cols.append(np.full(ok.sum(), (leg * kz + r) * n_c + j))
                vals.append(legs[leg, r, nzc[ok]])
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    g = sp.csr_matrix((vals, (rows, cols)), shape=(kz * kx, 2 * kz * n_c))
    return PathBasis(g, legs, n_c, (kz, kx), pair, grid)


@dataclass(frozen=True)
class ProfileMatrix:
    values: np.ndarray   # (2 nz, n_c); rows [0, nz) theta1 leg, [nz, 2 nz) theta2 leg
    pair: SteeringPair

    @property
    def n_c(self) -> int:
        return self.values.shape[1]


def kernel_from_profile(basis: PathBasis, profile) -> Kernel:
    f = profile.values if isinstance(profile, ProfileMatrix) else np.asarray(profile, dtype=float)
    if f.size != basis.n_params:
        raise ValueError(f"profile has {f.size} entries, basis expects {basis.n_params}")
    k = basis.matrix @ f.ravel()
    return Kernel(k.reshape(basis.kernel_dims), basis.pair, basis.grid)


# --------------------------------------------------------- normal equations

@dataclass
class NormalSystem:
    """Accumulated ``A^T A``, ``A^T b`` and ``b^T b`` of a stacked design."""
    gram: np.ndarray
    rhs: np.ndarray
    bb: float
    n_rows: int


def _accumulate_gram(gram, a):
    # upper triangle only; symmetrised by the caller. a.T of a C-ordered
    # array is Fortran-ordered, so BLAS reads it without a copy.
    return dsyrk(1.0, np.ascontiguousarray(a).T, beta=1.0, c=gram, trans=0, lower=0,
                 overwrite_c=1)


def _symmetrize(upper):
    return np.triu(upper) + np.triu(upper, 1).T


def slowness_normal_system(samples, p: int, kernel_dims, share_gram: np.ndarray | None = None
                           ) -> NormalSystem:
    """``S^T S`` and ``S^T t_p`` over all samples with masked rows removed."""
    n = kernel_dims[0] * kernel_dims[1]
    gram = np.zeros((n, n), order="F") if share_gram is None else None
    rhs = np.zeros(n)
    bb = 0.0
    n_rows = 0
    for smp in samples:
        s_mat = build_slowness_toeplitz(smp.slowness, kernel_dims)
        t = smp.delays[p].ravel()
        idx = smp.rows(p)
        if idx is not None:
            s_mat, t = s_mat[idx], t[idx]
        if gram is not None and len(t):
            gram = _accumulate_gram(gram, s_mat)
        rhs += s_mat.T @ t
        bb += float(t @ t)
        n_rows += len(t)
    gram = _symmetrize(gram) if gram is not None else share_gram
    return NormalSystem(gram, rhs, bb, n_rows)


def shared_slowness_gram(samples, kernel_dims) -> np.ndarray:
    """``S^T S`` over all unmasked samples; identical for every pair."""
    n = kernel_dims[0] * kernel_dims[1]
    gram = np.zeros((n, n), order="F")
    for smp in samples:
        gram = _accumulate_gram(gram, build_slowness_toeplitz(smp.slowness, kernel_dims))
    return _symmetrize(gram)


def solve_regularized(system: NormalSystem, reg_op: sp.spmatrix | None, lam: float,
                      relative: bool = True) -> tuple[np.ndarray, float]:
    """Solve ``(A^T A + lam D^T D) x = A^T b`` and certify the residual.

    Returns the solution and the effective (absolute) weight used.
    """
    gram, rhs = system.gram, system.rhs
    n = gram.shape[0]
    scale = float(np.abs(gram).max()) if gram.size else 0.0
    lam_eff = lam * scale if relative else lam
    m = gram.copy()
    if reg_op is not None and lam_eff > 0:
        m += lam_eff * (reg_op.T @ reg_op).toarray()
    unregularized = not (reg_op is not None and lam_eff > 0)

    if not np.any(rhs) and not unregularized:
        return np.zeros(n), lam_eff

    if unregularized and system.n_rows < n:
        raise SingularSystemError(
            f"rank deficient: {system.n_rows} measurements for {n} unknowns and no regularisation")
    try:
        factor = sla.cho_factor(m, lower=False, check_finite=True)
    except np.linalg.LinAlgError:
        if unregularized:
            raise SingularSystemError("normal matrix is singular and no regularisation is set") from None
        jitter = 1e-12 * np.trace(m) / n
        log.warning("Cholesky failed; retrying with diagonal jitter %.3g", jitter)
        try:
            factor = sla.cho_factor(m + jitter * np.eye(n), lower=False)
        except np.linalg.LinAlgError:
            raise SingularSystemError("normal matrix is singular even with jitter") from None
    if unregularized:
        d = np.abs(np.diag(factor[0]))
        if d.min() <= 1e-7 * d.max():
            raise SingularSystemError(
                f"normal matrix numerically singular (pivot ratio {d.min() / d.max():.2e}) "
                "and no regularisation is set")

    if not np.any(rhs):
        return np.zeros(n), lam_eff
    x = sla.cho_solve(factor, rhs)
    for _ in range(3):
        r = rhs - m @ x
        if np.linalg.norm(r) <= 1e-3 * RESIDUAL_TOL * np.linalg.norm(rhs):
            break
        x += sla.cho_solve(factor, r)
    res = np.linalg.norm(m @ x - rhs) / np.linalg.norm(rhs)
    if res > RESIDUAL_TOL:
        raise SingularSystemError(f"normal-equation residual {res:.2e} exceeds {RESIDUAL_TOL:g}")
    return x, lam_eff


def _checked_samples(samples, pair):
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one training sample")
    shapes = {s.slowness.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"samples disagree in grid shape: {sorted(shapes)}")
    return samples, samples[0].pair_index(pair)


def learn_kernel_unconstrained(samples, pair: SteeringPair, grid: ImagingGrid, kernel_dims,
                               reg: RegularizerSpec = RegularizerSpec(), *,
                               gram: np.ndarray | None = None) -> Kernel:
    """Ridge estimate of a free kernel from stacked samples."""
    samples, p = _checked_samples(samples, pair)
    share = gram if all(s.masks is None for s in samples) else None
    system = slowness_normal_system(samples, p, kernel_dims, share)
    d_k = kernel_difference_operator(kernel_dims, reg.lateral_weight, reg.axial_weight)
    x, _ = solve_regularized(system, d_k, reg.lambda_k, reg.relative)
    return Kernel(x.reshape(kernel_dims), pair, grid)


def learn_profile_constrained(samples, pair: SteeringPair, basis: PathBasis,
                              reg: RegularizerSpec = RegularizerSpec(), *,
                              gram: np.ndarray | None = None) -> ProfileMatrix:
    """Ridge estimate of the lateral profile of a fixed centreline path."""
    samples, p = _checked_samples(samples, pair)
    share = gram if all(s.masks is None for s in samples) else None
    base = slowness_normal_system(samples, p, basis.kernel_dims, share)
    g = basis.matrix
    gram_f = np.asarray((g.T @ (g.T @ base.gram).T))
    system = NormalSystem(gram_f, g.T @ base.rhs, base.bb, base.n_rows)
    nz = basis.kernel_dims[0]
    d_f = profile_difference_operator(nz, basis.n_c, reg.lateral_weight, reg.axial_weight,
                                      reg.pin_weight)
    x, _ = solve_regularized(system, d_f, reg.lambda_f, reg.relative)
    return ProfileMatrix(x.reshape(2 * nz, basis.n_c), pair)


# ------------------------------------------------------------------ driver

@dataclass
class PairFit:
    pair: SteeringPair
    rmse_t: float
    n_rows: int
    profile: ProfileMatrix | None = None


def training_rmse(samples, p: int, kernel: Kernel) -> tuple[float, int]:
    sq = 0.0
    n = 0
    k = kernel.values.ravel()
    for smp in samples:
        pred = build_slowness_toeplitz(smp.slowness, kernel.shape) @ k
        r = pred - smp.delays[p].ravel()
        idx = smp.rows(p)
        if idx is not None:
            r = r[idx]
        sq += float(r @ r)
        n += r.size
    return (np.sqrt(sq / n) if n else float("nan")), n


def learn_model(samples, schedule: PairSchedule, grid: ImagingGrid, kernel_dims,
                mode: str = "constrained", reg: RegularizerSpec = RegularizerSpec(),
                n_c: int = 21) -> tuple[ForwardModel, list[PairFit]]:
    """Learn one kernel per pair; returns the model and per-pair training fit."""
    if mode not in ("constrained", "unconstrained"):
        raise ValueError(f"unknown learning mode {mode!r}")
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one training sample")
    gram = None
    if all(s.masks is None for s in samples):
        gram = shared_slowness_gram(samples, kernel_dims)

    kernels, fits = [], []
    for pair in schedule:
        try:
            profile = None
            if mode == "unconstrained":
                kern = learn_kernel_unconstrained(samples, pair, grid, kernel_dims, reg, gram=gram)
            else:
                basis = build_path_basis(grid, pair, n_c, kernel_dims)
                profile = learn_profile_constrained(samples, pair, basis, reg, gram=gram)
                kern = kernel_from_profile(basis, profile)
        except (SingularSystemError, ValueError, KeyError) as exc:
            raise type(exc)(f"pair {pair.as_tuple()}: {exc}") from exc
        rmse, n = training_rmse(samples, samples[0].pair_index(pair), kern)
        log.info("pair %s: training RMSE_t %.3e s over %d rows", pair.label, rmse, n)
        kernels.append(kern)
        fits.append(PairFit(pair, rmse, n, profile))
    return ForwardModel(tuple(kernels), grid), fits
