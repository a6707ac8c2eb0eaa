"""Marginal fidelity metrics for synthetic versus real tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KL_SMOOTHING = 1e-10


class MetricError(ValueError):
    pass


def _column(values, name):
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise MetricError(f"{name} column is empty")
    return arr


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov D: ``sup_t |F_a(t) - F_b(t)|``."""
    a = np.sort(_column(a, "first"))
    b = np.sort(_column(b, "second"))
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def inverted_ks(real_col, synth_col) -> float:
    """``1 - D``; 1 means the empirical CDFs coincide."""
    return 1.0 - ks_distance(real_col, synth_col)


def continuous_kl(real_col, synth_col, bins: int = 100, smoothing: float = KL_SMOOTHING) -> float:
    """Histogram estimate of ``KL(synthetic || real)`` in nats.

    Both samples are binned over their shared range; empty bins receive
    ``smoothing`` mass before renormalizing.
    """
    real = _column(real_col, "real")
    synth = _column(synth_col, "synthetic")
    if bins < 2:
        raise MetricError("bins must be at least 2")
    lo = min(real.min(), synth.min())
    hi = max(real.max(), synth.max())
    if hi <= lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(synth, bins=edges)[0] / synth.size + smoothing
    q = np.histogram(real, bins=edges)[0] / real.size + smoothing
    p /= p.sum()
    q /= q.sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


@dataclass
class FidelityReport:
    columns: tuple[str, ...]
    inverted_ks: tuple[float, ...]
    kl: tuple[float, ...]
    n_real: int
    n_synthetic: int

    @property
    def mean_inverted_ks(self) -> float:
        return float(np.mean(self.inverted_ks))

    @property
    def mean_kl(self) -> float:
        return float(np.mean(self.kl))

    def as_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "inverted_ks": [round(v, 6) for v in self.inverted_ks],
            "kl": [round(v, 6) for v in self.kl],
            "mean_inverted_ks": round(self.mean_inverted_ks, 6),
            "mean_kl": round(self.mean_kl, 6),
            "n_real": self.n_real,
            "n_synthetic": self.n_synthetic,
        }


def fidelity_report(real_table, synth_table, columns=None, bins: int = 100) -> FidelityReport:
    """Per-column inverted KS and KL for two tables with matching columns."""
    real = np.asarray(real_table, dtype=np.float64)
    synth = np.asarray(synth_table, dtype=np.float64)
    if real.ndim == 1:
        real, synth = real[:, None], synth.reshape(-1, 1)
    if real.shape[1] != synth.shape[1]:
        raise MetricError(f"column counts differ: {real.shape[1]} vs {synth.shape[1]}")
    columns = tuple(columns) if columns is not None else tuple(f"c{j}" for j in range(real.shape[1]))
    ks = tuple(inverted_ks(real[:, j], synth[:, j]) for j in range(real.shape[1]))
    kl = tuple(continuous_kl(real[:, j], synth[:, j], bins) for j in range(real.shape[1]))
    return FidelityReport(columns, ks, kl, len(real), len(synth))
