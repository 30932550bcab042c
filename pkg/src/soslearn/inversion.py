"""L1-L1 total-variation speed-of-sound reconstruction.

Solves ``min_s ||L s - t||_1 + lam ||D s||_1`` over valid measurements with
smoothed iteratively reweighted least squares: each ``|u|`` is replaced by
``sqrt(u^2 + eps^2)`` and majorised by a quadratic at the current iterate,
so the smoothed objective never increases.  ``eps`` starts at a fraction
of the delay scale and is halved on a fixed cadence down to a floor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .convolution import ForwardModel, ModelOperator, assemble_model_matrix

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Measurements unusable for reconstruction."""


@dataclass(frozen=True)
class BeamformingConfig:
    c0: float = 1500.0

    def __post_init__(self):
        if not self.c0 > 0:
            raise ValueError(f"beamforming SoS must be positive, got {self.c0}")

    @property
    def sigma0(self) -> float:
        return 1.0 / self.c0


@dataclass(frozen=True)
class InversionConfig:
    lam: float = 3e-4
    kappa: float = 1.0
    max_iters: int = 40
    tolerance: float = 1e-6
    eps_rel: float = 1.0
    eps_min_rel: float = 1e-3
    eps_decay_every: int = 3
    cg_max_iters: int = 50
    cg_tol: float = 1e-10
    direct_max_unknowns: int = 800

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.eps_rel > 0 and self.eps_min_rel > 0):
            raise ValueError("smoothing epsilon must be > 0")


@dataclass
class ReconResult:
    slowness: np.ndarray
    sos: np.ndarray
    objective_trace: list[float]
    converged: bool
    iterations: int
    objective: float          # unsmoothed L1-L1 objective at the result
    eps_trace: list[float] = field(default_factory=list)


def displacements_to_delays(displacements, c0: float) -> np.ndarray:
    if not c0 > 0:
        raise ValueError(f"c0 must be positive, got {c0}")
    return np.asarray(displacements, dtype=float) / c0


def delays_to_displacements(delays, c0: float) -> np.ndarray:
    if not c0 > 0:
        raise ValueError(f"c0 must be positive, got {c0}")
    return np.asarray(delays, dtype=float) * c0


def sos_to_slowness(sos, c0: float) -> np.ndarray:
    """Relative slowness ``1/c - 1/c0``."""
    return 1.0 / np.asarray(sos, dtype=float) - 1.0 / c0


def slowness_to_sos(slowness, c0: float) -> np.ndarray:
    return 1.0 / (np.asarray(slowness, dtype=float) + 1.0 / c0)


def build_tv_operator(shape, kappa: float = 1.0) -> sp.csr_matrix:
    """First differences of a row-major ``(nz, nx)`` map: axial rows, then lateral rows times kappa."""
    if kappa <= 0:
        raise ValueError("kappa must be > 0")
    nz, nx = shape

    def diff(n):
        return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n))

    axial = sp.kron(diff(nz), sp.identity(nx))
    lateral = sp.kron(sp.identity(nz), diff(nx))
    return sp.vstack([axial, kappa * lateral], format="csr")


def apply_measurement_mask(delays, near_field_rows: int = 0, edge_cols: int = 0,
                           cc_mask=None) -> np.ndarray:
    """Validity mask (True = usable) for delay fields of shape ``(..., nz, nx)``."""
    t = np.asarray(delays)
    nz, nx = t.shape[-2:]
    if near_field_rows < 0 or edge_cols < 0:
        raise ValueError("mask margins must be non-negative")
    if near_field_rows > nz or 2 * edge_cols > nx:
        raise ValueError(f"mask margins ({near_field_rows}, {edge_cols}) exceed grid {nz}x{nx}")
    mask = np.ones(t.shape, dtype=bool)
    mask[..., :near_field_rows, :] = False
    if edge_cols:
        mask[..., :, :edge_cols] = False
        mask[..., :, nx - edge_cols:] = False
    if cc_mask is not None:
        mask &= np.broadcast_to(np.asarray(cc_mask, dtype=bool), t.shape)
    return mask


def l1_objective(model_or_op, slowness, delays, masks, lam, d_op) -> float:
    op = model_or_op if isinstance(model_or_op, ModelOperator) else ModelOperator(model_or_op)
    r = (op.forward(slowness) - delays)[masks]
    return float(np.abs(r).sum() + lam * np.abs(d_op @ slowness.ravel()).sum())


class _DenseSystem:
    def __init__(self, model, valid):
        self.l_mat = assemble_model_matrix(model).toarray()[valid.ravel()]

    def forward(self, s):
        return self.l_mat @ s

    def solve(self, w_r, t, reg, x0, cfg):
        lw = self.l_mat * w_r[:, None]
        m = self.l_mat.T @ lw + reg
        rhs = lw.T @ t
        try:
            return sla.cho_solve(sla.cho_factor(m), rhs)
        except np.linalg.LinAlgError:
            return sla.lstsq(m, rhs)[0]


class _IterativeSystem:
    def __init__(self, model, valid):
        self.op = ModelOperator(model)
        self.valid = valid
        self.shape = model.grid.shape

    def forward(self, s):
        return self.op.forward(s.reshape(self.shape))[self.valid]

    def _scatter(self, v):
        full = np.zeros(self.valid.shape)
        full[self.valid] = v
        return full

    def solve(self, w_r, t, reg, x0, cfg):
        wfull = self._scatter(w_r)
        rhs = self.op.adjoint(self._scatter(w_r * t)).ravel()
        diag = self.op.weighted_column_norms(wfull).ravel() + reg.diagonal()
        inv_diag = 1.0 / np.where(diag > 0, diag, 1.0)

        def matvec(v):
            lv = self.op.forward(v.reshape(self.shape)) * wfull
            return self.op.adjoint(lv).ravel() + reg @ v

        # preconditioned conjugate gradients, warm-started at the current iterate
        x = x0.copy()
        r = rhs - matvec(x)
        z = inv_diag * r
        p = z.copy()
        rz = r @ z
        r0 = np.linalg.norm(rhs)
        for _ in range(cfg.cg_max_iters):
            if np.linalg.norm(r) <= cfg.cg_tol * r0:
                break
            ap = matvec(p)
            pap = p @ ap
            if pap <= 0:
                break
            alpha = rz / pap
            x += alpha * p
            r -= alpha * ap
            z = inv_diag * r
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
        return x


def reconstruct(model: ForwardModel, delays, masks=None,
                bf_cfg: BeamformingConfig = BeamformingConfig(),
                inv_cfg: InversionConfig = InversionConfig()) -> ReconResult:
    """Relative slowness and SoS maps from delay fields of shape ``(P, nz, nx)``."""
    t_all = np.asarray(delays, dtype=float)
    shape = model.grid.shape
    expected = (len(model),) + shape
    if t_all.shape != expected:
        raise DataError(f"delays shape {t_all.shape} does not match model {expected}")
    valid = np.ones(expected, bool) if masks is None else np.asarray(masks, bool)
    if valid.shape != expected:
        raise DataError(f"mask shape {valid.shape} does not match model {expected}")
    if not valid.any():
        raise DataError("no valid measurements after masking")
    t = t_all[valid]
    if not np.all(np.isfinite(t)):
        raise DataError("non-finite delays among valid measurements")

    n = shape[0] * shape[1]
    d_op = build_tv_operator(shape, inv_cfg.kappa)
    lam = inv_cfg.lam
    scale = float(np.median(np.abs(t)))
    if scale == 0.0:
        scale = float(np.abs(t).max())
    s = np.zeros(n)
    if scale == 0.0:
        sos = slowness_to_sos(s.reshape(shape), bf_cfg.c0)
        return ReconResult(s.reshape(shape), sos, [0.0], True, 0, 0.0, [0.0])

    system = (_DenseSystem(model, valid) if n <= inv_cfg.direct_max_unknowns
              else _IterativeSystem(model, valid))
    eps = inv_cfg.eps_rel * scale
    eps_min = inv_cfg.eps_min_rel * scale

    def smoothed(s_vec, eps_val):
        r = system.forward(s_vec) - t
        v = lam * (d_op @ s_vec)
        return float(np.sqrt(r * r + eps_val ** 2).sum() + np.sqrt(v * v + eps_val ** 2).sum())

    trace = [smoothed(s, eps)]
    eps_trace = [eps]
    converged = False
    it = 0
    for it in range(1, inv_cfg.max_iters + 1):
        r = system.forward(s) - t
        w_r = 1.0 / np.sqrt(r * r + eps ** 2)
        v = lam * (d_op @ s)
        w_d = 1.0 / np.sqrt(v * v + eps ** 2)
        reg = (lam ** 2) * (d_op.T @ sp.diags(w_d) @ d_op)
        s_new = system.solve(w_r, t, reg, s, inv_cfg)

        f_same = smoothed(s_new, eps)
        if f_same > trace[-1]:
            # inexact inner solve overshot the majoriser; keep the old iterate
            s_new, f_same = s, trace[-1]
        rel_change = (trace[-1] - f_same) / max(trace[-1], np.finfo(float).tiny)
        s = s_new
        at_floor = eps <= eps_min
        if it % inv_cfg.eps_decay_every == 0 and not at_floor:
            eps = max(0.5 * eps, eps_min)
            trace.append(smoothed(s, eps))
        else:
            trace.append(f_same)
        eps_trace.append(eps)
        if at_floor and rel_change < inv_cfg.tolerance:
            converged = True
            break

    s_map = s.reshape(shape)
    r = system.forward(s) - t
    objective = float(np.abs(r).sum() + lam * np.abs(d_op @ s).sum())
    log.info("reconstruction: %d iterations, objective %.4e, converged=%s", it, objective, converged)
    return ReconResult(s_map, slowness_to_sos(s_map, bf_cfg.c0), trace, converged, it,
                       objective, eps_trace)
