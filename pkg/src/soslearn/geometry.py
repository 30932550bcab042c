"""Imaging grid, steering-pair schedule and the hand-crafted path models.

Coordinates: ``x`` is lateral (columns), ``z`` is depth (rows), the
transducer sits on ``z = 0``.  A tracked point with indices ``(ix, iz)``
lives at ``x = (ix + 0.5) dx`` and ``z = iz dz``, i.e. laterally centred
in its column and on the top edge of its row, so that a point in row 0
has zero-length rays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ImagingGrid:
    width_m: float
    depth_m: float
    nx: int
    nz: int

    def __post_init__(self):
        if self.nx < 2 or self.nz < 2:
            raise ValueError(f"grid needs at least 2x2 cells, got nz={self.nz}, nx={self.nx}")
        if not (self.width_m > 0 and self.depth_m > 0):
            raise ValueError("grid extents must be positive")

    @property
    def dx(self) -> float:
        return self.width_m / self.nx

    @property
    def dz(self) -> float:
        return self.depth_m / self.nz

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nz, self.nx)

    def point_position(self, ix: int, iz: int) -> tuple[float, float]:
        return ((ix + 0.5) * self.dx, iz * self.dz)

    def with_columns(self, nx: int) -> "ImagingGrid":
        """Same cell size, different lateral cell count."""
        return ImagingGrid(nx * self.dx, self.depth_m, nx, self.nz)

    def to_dict(self) -> dict:
        return {"width_m": self.width_m, "depth_m": self.depth_m, "nx": self.nx, "nz": self.nz}

    @classmethod
    def from_dict(cls, d: dict) -> "ImagingGrid":
        return cls(float(d["width_m"]), float(d["depth_m"]), int(d["nx"]), int(d["nz"]))


@dataclass(frozen=True)
class SteeringPair:
    theta1_deg: float
    theta2_deg: float

    def __post_init__(self):
        if self.theta1_deg == self.theta2_deg:
            raise ValueError("steering pair needs two distinct angles")
        if abs(self.theta1_deg) >= 90 or abs(self.theta2_deg) >= 90:
            raise ValueError("steering angles must satisfy |theta| < 90 deg")

    @property
    def label(self) -> str:
        return f"{self.theta1_deg:+g}_{self.theta2_deg:+g}"

    def as_tuple(self) -> tuple[float, float]:
        return (self.theta1_deg, self.theta2_deg)


@dataclass(frozen=True)
class PairSchedule:
    pairs: tuple[SteeringPair, ...]

    def __post_init__(self):
        if len(self.pairs) < 1:
            raise ValueError("schedule needs at least one pair")
        if len(set(self.pairs)) != len(self.pairs):
            raise ValueError("schedule contains duplicate pairs")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @property
    def max_abs_angle_deg(self) -> float:
        return max(max(abs(p.theta1_deg), abs(p.theta2_deg)) for p in self.pairs)

    @classmethod
    def from_angles(cls, angles) -> "PairSchedule":
        return cls(tuple(SteeringPair(float(a), float(b)) for a, b in angles))

    def to_list(self) -> list[list[float]]:
        return [list(p.as_tuple()) for p in self.pairs]


def make_default_schedule() -> PairSchedule:
    """Eight plane-wave pairs, 4 deg apart within a pair, stepping by 5 deg."""
    return PairSchedule.from_angles((t, t + 4) for t in range(-20, 16, 5))


@dataclass(frozen=True)
class PathImage:
    values: np.ndarray
    grid: ImagingGrid
    pair: SteeringPair
    anchor: tuple[int, int]  # (x_index, z_index)


@dataclass(frozen=True)
class WindowConfig:
    f_number: float = 1.0
    max_half_width: float = 8.0  # cells

    def __post_init__(self):
        if self.f_number <= 0:
            raise ValueError("f_number must be positive")
        if self.max_half_width < 0:
            raise ValueError("max_half_width must be >= 0")


def segment_cell_lengths(grid: ImagingGrid, p0, p1):
    """Exact per-cell lengths of the segment ``p0 -> p1`` (Siddon traversal).

    Returns ``(rows, cols, lengths)``; the parts of the segment lying
    outside the grid are dropped.
    """
    x0, z0 = map(float, p0)
    x1, z1 = map(float, p1)
    ddx, ddz = x1 - x0, z1 - z0
    total = math.hypot(ddx, ddz)
    empty = (np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    if total == 0.0:
        return empty

    alphas = [np.array([0.0, 1.0])]
    if ddx != 0.0:
        planes = np.arange(grid.nx + 1) * grid.dx
        alphas.append((planes - x0) / ddx)
    if ddz != 0.0:
        planes = np.arange(grid.nz + 1) * grid.dz
        alphas.append((planes - z0) / ddz)
    a = np.concatenate(alphas)
    a = np.unique(a[(a >= 0.0) & (a <= 1.0)])
    if a.size < 2:
        return empty

    mid = 0.5 * (a[:-1] + a[1:])
    cols = np.floor((x0 + mid * ddx) / grid.dx).astype(int)
    rows = np.floor((z0 + mid * ddz) / grid.dz).astype(int)
    lengths = np.diff(a) * total
    keep = (cols >= 0) & (cols < grid.nx) & (rows >= 0) & (rows < grid.nz) & (lengths > 0)
    return rows[keep], cols[keep], lengths[keep]


def _rasterize(grid: ImagingGrid, p0, p1) -> np.ndarray:
    img = np.zeros(grid.shape)
    rows, cols, lengths = segment_cell_lengths(grid, p0, p1)
    np.add.at(img, (rows, cols), lengths)
    return img


def _check_point(grid: ImagingGrid, point) -> tuple[int, int]:
    ix, iz = int(point[0]), int(point[1])
    if not (0 <= ix < grid.nx and 0 <= iz < grid.nz):
        raise ValueError(f"point {tuple(point)} outside grid {grid.nz}x{grid.nx}")
    return ix, iz


def tx_leg(grid: ImagingGrid, theta_deg: float, point) -> np.ndarray:
    """Transmit ray at ``theta_deg`` from the transducer plane down to the point."""
    ix, iz = _check_point(grid, point)
    x, z = grid.point_position(ix, iz)
    origin = (x - z * math.tan(math.radians(theta_deg)), 0.0)
    return _rasterize(grid, origin, (x, z))


def rx_leg(grid: ImagingGrid, point) -> np.ndarray:
    """Vertical receive segment from the point back up to the aperture centre."""
    ix, iz = _check_point(grid, point)
    x, z = grid.point_position(ix, iz)
    return _rasterize(grid, (x, z), (x, 0.0))


def trace_line_path(grid: ImagingGrid, pair: SteeringPair, point) -> PathImage:
    """Differential thin-ray path image of one tracked point.

    The positive leg is the round trip for ``theta1``, the negative one for
    ``theta2``.  Both share the same receive segment, which therefore
    drops out of the difference exactly and is not added at all.
    """
    ix, iz = _check_point(grid, point)
    values = tx_leg(grid, pair.theta1_deg, point) - tx_leg(grid, pair.theta2_deg, point)
    return PathImage(values, grid, pair, (ix, iz))


def hann_weights(half_width: float) -> np.ndarray:
    """Unit-sum Hann taper over ``|j| < half_width`` (odd length, centred)."""
    if half_width < 1.0:
        return np.ones(1)
    n = int(math.floor(half_width))
    j = np.arange(-n, n + 1)
    w = 0.5 * (1.0 + np.cos(np.pi * j / half_width))
    return w / w.sum()


def window_half_widths(grid: ImagingGrid, cfg: WindowConfig) -> np.ndarray:
    """Half-width in cells for each row: min(z / (2 f#), w_max) at row centres."""
    z = (np.arange(grid.nz) + 0.5) * grid.dz
    return np.minimum(z / (2.0 * cfg.f_number) / grid.dx, cfg.max_half_width)


def lateral_filter_rows(image: np.ndarray, filters) -> np.ndarray:
    """Convolve row ``r`` of ``image`` with the odd-length filter ``filters[r]``."""
    out = np.zeros_like(image, dtype=float)
    nx = image.shape[1]
    for r, (row, w) in enumerate(zip(image, filters)):
        if not row.any():
            continue
        m = (len(w) - 1) // 2
        out[r] = np.convolve(row, w)[m:m + nx]
    return out


def widen_leg(leg: np.ndarray, half_widths) -> np.ndarray:
    widened = lateral_filter_rows(leg, [hann_weights(h) for h in half_widths])
    # restore row totals lost to clipping at the lateral grid edges
    orig = leg.sum(axis=1)
    got = widened.sum(axis=1)
    scale = np.ones_like(orig)
    nz = got != 0
    scale[nz] = orig[nz] / got[nz]
    return widened * scale[:, None]


def trace_window_path(grid: ImagingGrid, pair: SteeringPair, point,
                      window_cfg: WindowConfig | None = None) -> PathImage:
    """Line path with every leg row spread by a depth-dependent Hann window."""
    cfg = window_cfg or WindowConfig()
    ix, iz = _check_point(grid, point)
    h = window_half_widths(grid, cfg)
    values = (widen_leg(tx_leg(grid, pair.theta1_deg, point), h)
              - widen_leg(tx_leg(grid, pair.theta2_deg, point), h))
    return PathImage(values, grid, pair, (ix, iz))
