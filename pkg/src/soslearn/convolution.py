"""Convolutional forward model.

A kernel is the differential sensitivity image of the deepest, laterally
centred point.  It is applied as a valid cross-correlation (no flip) with
the slowness map zero-padded by ``kz - 1`` rows on top and ``(kx - 1) / 2``
columns on each side, so kernel element ``(kz - 1, (kx - 1) / 2)`` lands on
the output point and everything above it on the shallower rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import ImagingGrid, PairSchedule, SteeringPair, trace_line_path


def kernel_shape(grid: ImagingGrid, max_angle_deg: float, margin: int = 0) -> tuple[int, int]:
    """Kernel dimensions covering every ray up to ``max_angle_deg`` plus ``margin`` columns per side."""
    half = math.ceil(grid.nz * grid.dz * math.tan(math.radians(max_angle_deg)) / grid.dx - 1e-9)
    return grid.nz, 2 * (half + int(margin)) + 1


@dataclass(frozen=True)
class Kernel:
    values: np.ndarray
    pair: SteeringPair
    grid: ImagingGrid

    def __post_init__(self):
        kz, kx = self.values.shape
        if kx % 2 != 1:
            raise ValueError(f"kernel width must be odd, got {kx}")
        if kz != self.grid.nz:
            raise ValueError(f"kernel height {kz} must equal grid depth {self.grid.nz}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("kernel has non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def anchor(self) -> tuple[int, int]:
        kz, kx = self.values.shape
        return kz - 1, (kx - 1) // 2


@dataclass(frozen=True)
class ForwardModel:
    kernels: tuple[Kernel, ...]
    grid: ImagingGrid

    def __post_init__(self):
        if not self.kernels:
            raise ValueError("model needs at least one kernel")
        shapes = {k.shape for k in self.kernels}
        if len(shapes) != 1:
            raise ValueError(f"kernels disagree in shape: {sorted(shapes)}")
        if any(k.grid != self.grid for k in self.kernels):
            raise ValueError("kernel grid differs from model grid")

    @property
    def schedule(self) -> PairSchedule:
        return PairSchedule(tuple(k.pair for k in self.kernels))

    @property
    def kernel_shape(self) -> tuple[int, int]:
        return self.kernels[0].shape

    def __len__(self):
        return len(self.kernels)


def _values(kernel) -> np.ndarray:
    return kernel.values if isinstance(kernel, Kernel) else np.asarray(kernel, dtype=float)


def pad_slowness(slowness: np.ndarray, kernel_dims) -> np.ndarray:
    kz, kx = kernel_dims
    if kx % 2 != 1:
        raise ValueError("kernel width must be odd")
    c = (kx - 1) // 2
    return np.pad(np.asarray(slowness, dtype=float), ((kz - 1, 0), (c, c)))


def crop_padded(padded: np.ndarray, kernel_dims) -> np.ndarray:
    kz, kx = kernel_dims
    c = (kx - 1) // 2
    return padded[kz - 1:, c:padded.shape[1] - c]


def forward_convolve(kernel, slowness: np.ndarray) -> np.ndarray:
    """Predicted delays ``t(z, x) = sum_ab k[a, b] * s_pad[z + a, x + b]``."""
    k = _values(kernel)
    s = np.asarray(slowness, dtype=float)
    if s.ndim != 2:
        raise ValueError(f"slowness map must be 2-D, got shape {s.shape}")
    if isinstance(kernel, Kernel) and s.shape != kernel.grid.shape:
        raise ValueError(f"map shape {s.shape} does not match kernel grid {kernel.grid.shape}")
    windows = sliding_window_view(pad_slowness(s, k.shape), k.shape)
    return np.tensordot(windows, k, axes=([2, 3], [0, 1]))


def build_slowness_toeplitz(slowness: np.ndarray, kernel_dims) -> np.ndarray:
    """Matrix ``S`` with ``S @ k.ravel() == forward_convolve(k, slowness).ravel()``."""
    kz, kx = kernel_dims
    s = np.asarray(slowness, dtype=float)
    windows = sliding_window_view(pad_slowness(s, (kz, kx)), (kz, kx))
    return windows.reshape(s.size, kz * kx)


def apply_model(model: ForwardModel, slowness: np.ndarray) -> np.ndarray:
    """Delays for every pair, stacked in schedule order: shape ``(P, nz, nx)``."""
    s = np.asarray(slowness, dtype=float)
    if s.shape != model.grid.shape:
        raise ValueError(f"map shape {s.shape} does not match model grid {model.grid.shape}")
    return np.stack([forward_convolve(k, s) for k in model.kernels])


def kernel_grid(grid: ImagingGrid, kernel_dims) -> ImagingGrid:
    kz, kx = kernel_dims
    if kz != grid.nz:
        raise ValueError("kernel height must equal grid depth")
    return grid.with_columns(kx)


def kernel_from_path_model(grid: ImagingGrid, pair: SteeringPair, builder=trace_line_path,
                           kernel_dims=None, **builder_kwargs) -> Kernel:
    """Package a hand-crafted path builder as a convolution kernel.

    The builder is evaluated for the mid-bottom point of a grid that has
    the image cell size and the kernel's width, so nothing is clipped.
    """
    if kernel_dims is None:
        kernel_dims = kernel_shape(grid, max(abs(pair.theta1_deg), abs(pair.theta2_deg)))
    kz, kx = kernel_dims
    kgrid = kernel_grid(grid, kernel_dims)
    path = builder(kgrid, pair, ((kx - 1) // 2, kz - 1), **builder_kwargs)
    return Kernel(path.values, pair, grid)


def model_from_path_builder(grid: ImagingGrid, schedule: PairSchedule, builder=trace_line_path,
                            kernel_dims=None, margin: int = 0, **builder_kwargs) -> ForwardModel:
    if kernel_dims is None:
        kernel_dims = kernel_shape(grid, schedule.max_abs_angle_deg, margin)
    kernels = tuple(kernel_from_path_model(grid, p, builder, kernel_dims, **builder_kwargs)
                    for p in schedule)
    return ForwardModel(kernels, grid)


def assemble_model_matrix(model: ForwardModel) -> sp.csr_matrix:
    """Explicit ``L`` of shape ``(P nz nx, nz nx)`` built by shifting and cropping each kernel.

    Row ``(p, z, x)`` holds kernel ``p`` placed with its anchor on ``(z, x)``;
    entries falling outside the field of view are dropped.
    """
    nz, nx = model.grid.shape
    kz, kx = model.kernel_shape
    c = (kx - 1) // 2
    zz, xx = np.meshgrid(np.arange(nz), np.arange(nx), indexing="ij")
    out_idx = (zz * nx + xx).ravel()
    rows, cols, vals = [], [], []
    for p, kern in enumerate(model.kernels):
        a_idx, b_idx = np.nonzero(kern.values)
        for a, b in zip(a_idx, b_idx):
            # kernel element (a, b) sees image cell (z - (kz-1) + a, x - c + b)
            zi = zz.ravel() - (kz - 1) + a
            xi = xx.ravel() - c + b
            ok = (zi >= 0) & (zi < nz) & (xi >= 0) & (xi < nx)
            rows.append(p * nz * nx + out_idx[ok])
            cols.append(zi[ok] * nx + xi[ok])
            vals.append(np.full(ok.sum(), kern.values[a, b]))
    if rows:
        rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    else:
        rows = cols = np.zeros(0, int)
        vals = np.zeros(0)
    shape = (len(model) * nz * nx, nz * nx)
    return sp.csr_matrix((vals, (rows, cols)), shape=shape)


class ModelOperator:
    """FFT-backed application of ``L`` and ``L^T`` for a whole model.

    Used inside iterative solvers where the direct sliding-window product is
    too slow; agrees with :func:`apply_model` to rounding error.
    """

    def __init__(self, model: ForwardModel):
        self.model = model
        self.nz, self.nx = model.grid.shape
        self.kz, self.kx = model.kernel_shape
        self.c = (self.kx - 1) // 2
        m = self.nz + self.kz - 1
        n = self.nx + self.kx - 1
        self.fft_shape = (scipy.fft.next_fast_len(m, real=True),
                          scipy.fft.next_fast_len(n, real=True))
        k = np.stack([kern.values for kern in model.kernels])
        self._k_hat = scipy.fft.rfft2(k, s=self.fft_shape)
        self._k2_hat = scipy.fft.rfft2(k * k, s=self.fft_shape)

    @property
    def n_pairs(self) -> int:
        return len(self.model)

    def forward(self, s: np.ndarray) -> np.ndarray:
        padded = np.zeros(self.fft_shape)
        padded[self.kz - 1:self.kz - 1 + self.nz, self.c:self.c + self.nx] = s
        s_hat = scipy.fft.rfft2(padded)
        corr = scipy.fft.irfft2(np.conj(self._k_hat) * s_hat[None], s=self.fft_shape)
        return corr[:, :self.nz, :self.nx]

    def _back(self, t: np.ndarray, k_hat: np.ndarray) -> np.ndarray:
        buf = np.zeros((t.shape[0],) + self.fft_shape)
        buf[:, :self.nz, :self.nx] = t
        conv = scipy.fft.irfft2(k_hat * scipy.fft.rfft2(buf), s=self.fft_shape).sum(axis=0)
        return conv[self.kz - 1:self.kz - 1 + self.nz, self.c:self.c + self.nx]

    def adjoint(self, t: np.ndarray) -> np.ndarray:
        return self._back(t, self._k_hat)

    def weighted_column_norms(self, w: np.ndarray) -> np.ndarray:
        """``diag(L^T diag(w) L)`` reshaped to the image grid."""
        return self._back(w, self._k2_hat)
