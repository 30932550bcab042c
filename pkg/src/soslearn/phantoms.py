"""Synthetic SoS phantoms and linear stand-in observations.

Two families: *blob* (one randomly deformed ellipse, small contrast) and
*geometric* (a circle or rectangle, contrast up to 100 m/s).  Delays are
synthesised by pushing the relative slowness through a chosen "truth"
forward model and adding white Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .convolution import ForwardModel, apply_model
from .geometry import ImagingGrid
from .inversion import BeamformingConfig, sos_to_slowness

SOS_SANITY_BAND = (1300.0, 1700.0)


@dataclass(frozen=True)
class PhantomSpec:
    family: str = "blob"                      # "blob" | "geometric"
    grid: ImagingGrid = ImagingGrid(0.040, 0.055, 32, 44)
    background_mode: str = "random"           # "constant" | "smooth" | "random"
    background_sos_range: tuple[float, float] = (1470.0, 1550.0)
    max_contrast: float | None = None         # m/s; family default when None
    min_contrast: float | None = None
    smooth_amplitude: float = 5.0             # m/s, max background variation
    ring_mm: float = 5.0
    near_field_mm: float = 5.0                # keep inclusions below this depth

    def __post_init__(self):
        if self.family not in ("blob", "geometric"):
            raise ValueError(f"unknown phantom family {self.family!r}")
        if self.background_mode not in ("constant", "smooth", "random"):
            raise ValueError(f"unknown background mode {self.background_mode!r}")
        lo, hi = self.background_sos_range
        if not lo <= hi:
            raise ValueError("background SoS range is empty")
        if self.contrast_range[1] <= 0:
            raise ValueError("max_contrast must be > 0")

    @property
    def contrast_range(self) -> tuple[float, float]:
        if self.family == "blob":
            lo, hi = 1.0, 10.0
        else:
            lo, hi = 10.0, 100.0
        lo = lo if self.min_contrast is None else self.min_contrast
        hi = hi if self.max_contrast is None else self.max_contrast
        return min(lo, hi), hi

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        d["background_sos_range"] = list(self.background_sos_range)
        return d


@dataclass
class LabeledPhantom:
    sos: np.ndarray
    inclusion_mask: np.ndarray
    background_mask: np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass
class SyntheticObservation:
    delays: np.ndarray            # (P, nz, nx) seconds
    truth_model_id: str
    noise_sigma: float
    mask: np.ndarray              # (P, nz, nx) bool


def _cell_centers(grid: ImagingGrid):
    x = (np.arange(grid.nx) + 0.5) * grid.dx
    z = (np.arange(grid.nz) + 0.5) * grid.dz
    return np.meshgrid(x, z)  # (nz, nx) each


def _background(spec: PhantomSpec, rng: np.random.Generator):
    grid = spec.grid
    c_bg = rng.uniform(*spec.background_sos_range)
    mode = spec.background_mode
    if mode == "random":
        mode = "constant" if rng.random() < 0.5 else "smooth"
    bg = np.full(grid.shape, c_bg)
    if mode == "smooth" and spec.smooth_amplitude > 0:
        xx, zz = _cell_centers(grid)
        u = 2 * xx / grid.width_m - 1
        v = 2 * zz / grid.depth_m - 1
        terms = np.stack([u, v, u * u, u * v, v * v])
        coef = rng.standard_normal(len(terms))
        pert = np.tensordot(coef, terms, axes=1)
        pert -= pert.mean()
        peak = np.abs(pert).max()
        if peak > 0:
            pert *= spec.smooth_amplitude * rng.uniform(0.5, 1.0) / peak
        bg = bg + pert
    return bg, c_bg, mode


def _contrast(spec: PhantomSpec, rng: np.random.Generator) -> float:
    lo, hi = spec.contrast_range
    return float(rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi))


def _place(rng: np.random.Generator, lo: float, hi: float) -> float:
    """Uniform in ``[lo, hi]``; the midpoint when the grid is too small for the range."""
    u = rng.random()
    return 0.5 * (lo + hi) if hi < lo else lo + (hi - lo) * u


def ring_mask(inclusion: np.ndarray, grid: ImagingGrid, ring_mm: float) -> np.ndarray:
    """Cells within ``ring_mm`` of the inclusion, excluding the inclusion itself."""
    dist = ndimage.distance_transform_edt(~inclusion, sampling=(grid.dz, grid.dx))
    return (~inclusion) & (dist <= ring_mm * 1e-3)


def _finish(spec, sos, inc, meta) -> LabeledPhantom:
    if not inc.any():
        raise RuntimeError("phantom generator produced an empty inclusion")
    lo, hi = SOS_SANITY_BAND
    if not (np.all(np.isfinite(sos)) and sos.min() >= lo and sos.max() <= hi):
        raise RuntimeError("phantom SoS outside sanity band")
    bkg = ring_mask(inc, spec.grid, spec.ring_mm)
    meta = {"spec": spec.to_dict(), **meta}
    return LabeledPhantom(sos, inc, bkg, meta)


def gen_blob_phantom(spec: PhantomSpec, seed: int) -> LabeledPhantom:
    """Background plus one ellipse whose radius is modulated by a few random harmonics."""
    if spec.family != "blob":
        raise ValueError("gen_blob_phantom needs a blob spec")
    grid = spec.grid
    rng = np.random.default_rng(seed)
    bg, c_bg, mode = _background(spec, rng)

    a = rng.uniform(3e-3, 9e-3)
    b = rng.uniform(3e-3, 9e-3)
    phi = rng.uniform(0, np.pi)
    n_harm = int(rng.integers(1, 5))
    amps = rng.uniform(0, 1, n_harm)
    amps *= rng.uniform(0.0, 0.3) / amps.sum()
    phases = rng.uniform(0, 2 * np.pi, n_harm)
    orders = np.arange(2, 2 + n_harm)

    reach = 1.3 * max(a, b)
    cx = _place(rng, reach, grid.width_m - reach)
    cz = _place(rng, spec.near_field_mm * 1e-3 + reach, grid.depth_m - reach)

    xx, zz = _cell_centers(grid)
    dx, dz = xx - cx, zz - cz
    u = np.cos(phi) * dx + np.sin(phi) * dz
    v = -np.sin(phi) * dx + np.cos(phi) * dz
    rho = np.hypot(u, v)
    psi = np.arctan2(v, u)
    r_ell = a * b / np.sqrt((b * np.cos(psi)) ** 2 + (a * np.sin(psi)) ** 2)
    mod = 1 + (amps[:, None, None] * np.cos(orders[:, None, None] * psi + phases[:, None, None])).sum(0)
    inc = rho <= r_ell * mod
    if not inc.any():
        inc[min(int(cz / grid.dz), grid.nz - 1), min(int(cx / grid.dx), grid.nx - 1)] = True

    contrast = _contrast(spec, rng)
    sos = bg + contrast * inc
    meta = {"seed": int(seed), "family": "blob", "background_sos": c_bg, "background_mode": mode,
            "contrast": contrast, "center_m": [cx, cz], "semi_axes_m": [a, b],
            "rotation_rad": phi, "harmonic_amplitudes": amps.tolist()}
    return _finish(spec, sos, inc, meta)


def gen_geometric_phantom(spec: PhantomSpec, seed: int, shape: str | None = None) -> LabeledPhantom:
    """One circular or rectangular inclusion lying fully inside the grid."""
    if spec.family != "geometric":
        raise ValueError("gen_geometric_phantom needs a geometric spec")
    grid = spec.grid
    rng = np.random.default_rng(seed)
    bg, c_bg, mode = _background(spec, rng)
    if shape is None:
        shape = "circle" if rng.random() < 28 / 32 else "rectangle"
    if shape not in ("circle", "rectangle"):
        raise ValueError(f"unknown inclusion shape {shape!r}")

    xx, zz = _cell_centers(grid)
    top = spec.near_field_mm * 1e-3
    if shape == "circle":
        r = rng.uniform(3e-3, 8e-3)
        cx = _place(rng, r, grid.width_m - r)
        cz = _place(rng, top + r, grid.depth_m - r)
        inc = (xx - cx) ** 2 + (zz - cz) ** 2 <= r * r
        geom = {"center_m": [cx, cz], "radius_m": r}
    else:
        w = rng.uniform(5e-3, 15e-3)
        h = rng.uniform(5e-3, 15e-3)
        x0 = _place(rng, 0.0, grid.width_m - w)
        z0 = _place(rng, top, grid.depth_m - h)
        inc = (xx >= x0) & (xx <= x0 + w) & (zz >= z0) & (zz <= z0 + h)
        geom = {"corner_m": [x0, z0], "size_m": [w, h]}
    if not inc.any():
        inc[int(np.clip(zz.mean() / grid.dz, 0, grid.nz - 1)), grid.nx // 2] = True

    contrast = _contrast(spec, rng)
    sos = bg + contrast * inc
    meta = {"seed": int(seed), "family": "geometric", "shape": shape, "background_sos": c_bg,
            "background_mode": mode, "contrast": contrast, **geom}
    return _finish(spec, sos, inc, meta)


def circular_inclusion_phantom(spec: PhantomSpec, center_m, radius_m: float, contrast: float,
                               background_sos: float) -> LabeledPhantom:
    """A single circular inclusion with explicit geometry on a constant background.

    Mirrors a calibration phantom whose layout is known, as opposed to the
    seeded draws of :func:`gen_geometric_phantom`.
    """
    grid = spec.grid
    if radius_m <= 0:
        raise ValueError(f"radius must be positive, got {radius_m}")
    cx, cz = (float(v) for v in center_m)
    xx, zz = _cell_centers(grid)
    inc = (xx - cx) ** 2 + (zz - cz) ** 2 <= radius_m * radius_m
    if not inc.any():
        raise ValueError("inclusion covers no cell of the grid")
    sos = np.full(grid.shape, float(background_sos)) + float(contrast) * inc
    lo, hi = SOS_SANITY_BAND
    if sos.min() < lo or sos.max() > hi:
        raise ValueError(f"SoS values leave the plausible band [{lo}, {hi}] m/s")
    meta = {"seed": None, "family": "geometric", "shape": "circle",
            "background_sos": float(background_sos), "background_mode": "constant",
            "contrast": float(contrast), "center_m": [cx, cz], "radius_m": float(radius_m)}
    return _finish(spec, sos, inc, meta)


def gen_geometric_set(spec: PhantomSpec, seed: int, n_circles: int = 28, n_rectangles: int = 4):
    """Fixed-composition set: ``n_circles`` circles followed by ``n_rectangles`` rectangles."""
    seeds = np.random.SeedSequence(seed).generate_state(n_circles + n_rectangles)
    shapes = ["circle"] * n_circles + ["rectangle"] * n_rectangles
    return [gen_geometric_phantom(spec, int(s), shape) for s, shape in zip(seeds, shapes)]


def generate_phantom(spec: PhantomSpec, seed: int) -> LabeledPhantom:
    if spec.family == "blob":
        return gen_blob_phantom(spec, seed)
    return gen_geometric_phantom(spec, seed)


def synthesize_observation(phantom: LabeledPhantom, truth_model: ForwardModel,
                           bf_cfg: BeamformingConfig = BeamformingConfig(),
                           noise_sigma: float = 0.0, seed: int = 0,
                           truth_model_id: str = "truth") -> SyntheticObservation:
    """Delays of ``truth_model`` applied to the phantom's relative slowness, plus noise."""
    if phantom.sos.shape != truth_model.grid.shape:
        raise ValueError(f"phantom grid {phantom.sos.shape} != model grid {truth_model.grid.shape}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    s = sos_to_slowness(phantom.sos, bf_cfg.c0)
    delays = apply_model(truth_model, s)
    if noise_sigma > 0:
        delays = delays + np.random.default_rng(seed).normal(0.0, noise_sigma, delays.shape)
    return SyntheticObservation(delays, truth_model_id, float(noise_sigma),
                                np.ones(delays.shape, dtype=bool))


def make_splits(n_train: int, n_val: int, n_test: int, seed: int) -> list[dict]:
    """Seeded random assignment of sample ids to train/val/test, with per-sample seeds."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if min(counts.values()) < 0:
        raise ValueError("split sizes must be non-negative")
    total = sum(counts.values())
    seq = np.random.SeedSequence(seed)
    perm_seq, sample_seq = seq.spawn(2)
    labels = np.array([k for k, v in counts.items() for _ in range(v)], dtype=object)
    order = np.random.default_rng(perm_seq).permutation(total)
    sample_seeds = sample_seq.generate_state(max(total, 1))[:total]
    return [{"id": f"sample_{i:03d}", "split": str(labels[order[i]]), "seed": int(sample_seeds[i])}
            for i in range(total)]
