"""Reconstruction reports: fields, error metrics and residual norms."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field_grid import Field, Grid, ScalarField, norm, save_field


# wall-clock timings differ between identical runs
TIMING_METRICS = ("runtime",)


@dataclass
class ReconReport:
    """Outcome of one reconstruction.

    ``metrics`` holds floats (``nan`` marks a metric that could not be
    evaluated, with the reason in ``failed``).
    """

    method: str
    alpha: float
    grid: Grid
    sigma: np.ndarray
    log_sigma: np.ndarray
    fields: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    failed: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add_errors(self, sigma_true: np.ndarray, mask: np.ndarray | None = None) -> None:
        """Error metrics against a known conductivity, optionally restricted to ``mask``."""
        g = self.grid
        log_true = np.log(sigma_true)
        err = self.log_sigma - log_true
        sel = np.ones(g.shape, bool) if mask is None else mask
        linf = float(np.max(np.abs(err[sel]))) if np.any(sel) else math.nan
        scale = float(np.max(np.abs(log_true)))
        self.metrics["err_logsigma_Linf"] = linf
        self.metrics["err_logsigma_rel"] = linf / scale if scale > 0 else linf
        self.metrics["err_logsigma_W1inf"] = norm(ScalarField(g, err), "W1inf") if mask is None else linf
        if self.alpha != 0:
            e = self.sigma ** (-2 * self.alpha) - sigma_true ** (-2 * self.alpha)
        else:
            e = err
        self.metrics["err_sigma_H1"] = norm(ScalarField(g, e), "H1")
        if mask is not None:
            self.meta["error_mask_fraction"] = float(np.mean(sel))

    def mark_failed(self, metric: str, reason: str) -> None:
        self.metrics[metric] = math.nan
        self.failed[metric] = reason

    def summary(self) -> dict:
        return {"method": self.method, "alpha": self.alpha, "cells": self.grid.cells,
                "metrics": _jsonable(self.metrics), "failed": self.failed, "meta": _jsonable(self.meta)}

    def reproducible_summary(self) -> dict:
        """``summary`` without wall-clock timings; identical configs give identical output."""
        out = self.summary()
        out["metrics"] = {k: v for k, v in out["metrics"].items() if k not in TIMING_METRICS}
        return out

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_field(ScalarField(self.grid, self.sigma, name="sigma"), directory / "sigma")
        for name, f in self.fields.items():
            if isinstance(f, Field):
                save_field(f, directory / name)
        (directory / "report.json").write_text(json.dumps(self.summary(), indent=2))
        return directory


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (complex, np.complexfloating)):
        return [_jsonable(obj.real), _jsonable(obj.imag)]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj
