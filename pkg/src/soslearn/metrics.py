"""Reconstruction and forward-model metrics, and paired model comparisons."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .convolution import ForwardModel, apply_model
from .inversion import (BeamformingConfig, InversionConfig, reconstruct, sos_to_slowness)

log = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 25


def rmse_sos(truth, recon) -> float:
    truth = np.asarray(truth, dtype=float)
    recon = np.asarray(recon, dtype=float)
    if truth.shape != recon.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {recon.shape}")
    return float(np.sqrt(np.mean((recon - truth) ** 2)))


def rmse_delay(model: ForwardModel, slowness, delays, masks=None) -> float:
    """RMS of ``L s - t`` over the valid measurements."""
    pred = apply_model(model, slowness)
    t = np.asarray(delays, dtype=float)
    if t.shape != pred.shape:
        raise ValueError(f"delays shape {t.shape} does not match model output {pred.shape}")
    r = pred - t
    if masks is not None:
        r = r[np.asarray(masks, dtype=bool)]
    if r.size == 0:
        raise ValueError("no valid measurements")
    return float(np.sqrt(np.mean(r ** 2)))


def delta_sos(recon, inclusion_mask, background_mask) -> float:
    """Absolute difference of the median SoS inside the inclusion and in the background."""
    recon = np.asarray(recon, dtype=float)
    inc = np.asarray(inclusion_mask, dtype=bool)
    bkg = np.asarray(background_mask, dtype=bool)
    if not inc.any() or not bkg.any():
        raise ValueError("inclusion and background masks must be non-empty")
    if np.any(inc & bkg):
        raise ValueError("inclusion and background masks overlap")
    return float(abs(np.median(recon[inc]) - np.median(recon[bkg])))


def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """Paired two-sided Wilcoxon test; exact null distribution up to 25 pairs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = b - a
    if d.size == 0 or not np.any(d != 0):
        return 0.0, 1.0
    method = "exact" if d.size <= EXACT_WILCOXON_MAX_N else "approx"
    res = stats.wilcoxon(a, b, method=method, zero_method="wilcox")
    return float(res.statistic), float(res.pvalue)


def paired_improvement(baseline, candidate, higher_is_better: bool) -> dict:
    """Median-based improvement of ``candidate`` over ``baseline``.

    ``improvement_pct`` is relative to the baseline median; ``symmetric_pct``
    uses the mean of both medians, so swapping the arguments negates it.
    Positive values mean the candidate is better.
    """
    ma = float(np.median(baseline))
    mb = float(np.median(candidate))
    sign = 1.0 if higher_is_better else -1.0
    diff = sign * (mb - ma)
    rel = 100.0 * diff / abs(ma) if ma != 0 else (0.0 if diff == 0 else float("inf"))
    denom = 0.5 * (abs(ma) + abs(mb))
    sym = 100.0 * diff / denom if denom > 0 else 0.0
    stat, p = wilcoxon_signed_rank(baseline, candidate)
    return {"median_baseline": ma, "median_candidate": mb, "improvement_pct": rel,
            "symmetric_pct": sym, "wilcoxon_statistic": stat, "p_value": p,
            "n": int(np.size(baseline))}


@dataclass
class EvalCase:
    sample_id: str
    sos: np.ndarray
    inclusion_mask: np.ndarray
    background_mask: np.ndarray
    delays: np.ndarray
    masks: np.ndarray | None = None


@dataclass
class EvalReport:
    model_id: str
    dataset_id: str
    rows: list[dict] = field(default_factory=list)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=float)

    @property
    def rmse_t(self) -> float:
        return float(np.median(self.column("rmse_t")))

    @property
    def rmse_c(self) -> float:
        return float(np.median(self.column("rmse_c")))

    @property
    def delta_sos(self) -> float:
        return float(np.median(self.column("delta_sos")))

    def summary(self) -> dict:
        return {"model_id": self.model_id, "dataset_id": self.dataset_id, "n": len(self.rows),
                "median_rmse_t": self.rmse_t, "median_rmse_c": self.rmse_c,
                "median_delta_sos": self.delta_sos}


METRICS = (("rmse_t", False), ("rmse_c", False), ("delta_sos", True))


def evaluate_model(model: ForwardModel, cases, bf_cfg: BeamformingConfig = BeamformingConfig(),
                   inv_cfg: InversionConfig = InversionConfig(), model_id: str = "model",
                   dataset_id: str = "",
                   keep_recons: dict | None = None) -> EvalReport:
    """Reconstruct every case with ``model`` and tabulate the three metrics.

    RMSE_t measures the forward model itself: predicted delays from the
    ground-truth slowness against the observed delays.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("empty evaluation set")
    report = EvalReport(model_id, dataset_id)
    for case in cases:
        try:
            res = reconstruct(model, case.delays, case.masks, bf_cfg, inv_cfg)
            s_true = sos_to_slowness(case.sos, bf_cfg.c0)
            row = {"sample_id": case.sample_id,
                   "rmse_t": rmse_delay(model, s_true, case.delays, case.masks),
                   "rmse_c": rmse_sos(case.sos, res.sos),
                   "delta_sos": delta_sos(res.sos, case.inclusion_mask, case.background_mask),
                   "iterations": res.iterations,
                   "converged": bool(res.converged)}
        except Exception as exc:
            raise type(exc)(f"{dataset_id}/{case.sample_id}: {exc}") from exc
        report.rows.append(row)
        if keep_recons is not None:
            keep_recons[(model_id, case.sample_id)] = res
        log.info("%s %s: rmse_c=%.3f delta_sos=%.3f", model_id, case.sample_id,
                 row["rmse_c"], row["delta_sos"])
    return report


def compare_reports(baseline: EvalReport, candidate: EvalReport) -> dict:
    if [r["sample_id"] for r in baseline.rows] != [r["sample_id"] for r in candidate.rows]:
        raise ValueError("reports cover different samples")
    return {key: paired_improvement(baseline.column(key), candidate.column(key), hib)
            for key, hib in METRICS}


def compare_models(models: dict, cases, bf_cfg: BeamformingConfig = BeamformingConfig(),
                   inv_cfg: InversionConfig = InversionConfig(), dataset_id: str = "",
                   baseline: str | None = None) -> tuple[dict, dict]:
    """Evaluate every model and compare each against ``baseline`` (default: the first).

    Returns ``(reports, comparisons)`` keyed by model id.
    """
    if len(models) < 2:
        raise ValueError("need at least two models to compare")
    cases = list(cases)
    reports = {mid: evaluate_model(m, cases, bf_cfg, inv_cfg, mid, dataset_id)
               for mid, m in models.items()}
    base = baseline or next(iter(models))
    comparisons = {mid: compare_reports(reports[base], rep)
                   for mid, rep in reports.items() if mid != base}
    return reports, comparisons
