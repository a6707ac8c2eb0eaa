"""Matching estimators used as comparison baselines.

Propensity-score nearest-neighbour and kernel matching, and coarsened exact
matching (CEM). Each produces a :class:`MatchResult` whose sparse weight
matrix maps treated rows to control rows; :func:`att_from_matches` turns
it into an ATT estimate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .att import AttEstimate, mean_and_std_err
from .cate import build_grid, resolve_bounds
from .datasets import ObservationalDataset


class FitError(RuntimeError):
    pass


class MatchError(RuntimeError):
    pass


@dataclass
class PropensityModel:
    intercept: float
    coef: np.ndarray
    log_likelihood: float
    iterations: int
    cov: np.ndarray | None = field(default=None, repr=False)

    def linear_predictor(self, x) -> np.ndarray:
        return self.intercept + np.asarray(x, dtype=np.float64) @ self.coef

    def predict(self, x) -> np.ndarray:
        eta = np.clip(self.linear_predictor(x), -700, 700)
        p = 1.0 / (1.0 + np.exp(-eta))
        return np.clip(p, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)

    @property
    def std_errors(self) -> np.ndarray:
        """Standard errors of ``[intercept, *coef]`` from the observed information."""
        return np.sqrt(np.diag(self.cov))


def fit_propensity(data: ObservationalDataset, max_iter: int = 100, tol: float = 1e-10) -> PropensityModel:
    """Maximum-likelihood logistic regression of treatment on covariates (IRLS)."""
    d = data.treatment.astype(np.float64)
    if d.min() == d.max():
        raise FitError("both treatment groups must be present")
    x = data.covariates
    # fit on standardized covariates, map coefficients back afterwards
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    design = np.column_stack([np.ones(len(x)), (x - center) / scale])
    beta = np.zeros(design.shape[1])
    beta[0] = math.log(d.mean() / (1 - d.mean()))
    prev_ll = -np.inf
    for it in range(1, max_iter + 1):
        eta = design @ beta
        p = 1.0 / (1.0 + np.exp(-np.clip(eta, -700, 700)))
        w = np.maximum(p * (1 - p), 1e-300)
        ll = float(np.sum(d * _log_sigmoid(eta) + (1 - d) * _log_sigmoid(-eta)))
        if ll > -1e-6 * len(d):
            raise FitError("perfect separation: treatment is fully predicted by the covariates")
        hess = design.T @ (design * w[:, None])
        try:
            step = np.linalg.solve(hess, design.T @ (d - p))
        except np.linalg.LinAlgError as exc:
            raise FitError(f"singular information matrix: {exc}") from exc
        beta = beta + step
        if abs(ll - prev_ll) < tol * (1 + abs(ll)) and np.max(np.abs(step)) < 1e-8:
            break
        prev_ll = ll
    else:
        raise FitError(f"IRLS did not converge in {max_iter} iterations")
    if not np.all(np.isfinite(beta)) or np.max(np.abs(beta[1:])) > 1e4:
        raise FitError("coefficients diverged (quasi-separation)")

    eta = design @ beta
    p = 1.0 / (1.0 + np.exp(-eta))
    ll = float(np.sum(d * _log_sigmoid(eta) + (1 - d) * _log_sigmoid(-eta)))
    cov_std = np.linalg.inv(design.T @ (design * (p * (1 - p))[:, None]))
    # undo the standardization: coef = b / scale, intercept = b0 - sum(b * center / scale)
    jac = np.eye(len(beta))
    jac[1:, 1:] = np.diag(1.0 / scale)
    jac[0, 1:] = -center / scale
    coef = beta[1:] / scale
    intercept = float(beta[0] - np.sum(beta[1:] * center / scale))
    return PropensityModel(intercept, coef, ll, it, jac @ cov_std @ jac.T)


def _log_sigmoid(a):
    return -np.logaddexp(0.0, -a)


@dataclass
class MatchResult:
    """Sparse ``(n_treated, n_control)`` weights; rows of unmatched treated are empty."""

    weights: sparse.csr_matrix
    treated_index: np.ndarray  # row positions of treated samples in the dataset
    control_index: np.ndarray  # row positions of control samples in the dataset
    estimator: str

    @property
    def matched(self) -> np.ndarray:
        return np.diff(self.weights.indptr) > 0

    @property
    def n_unmatched_treated(self) -> int:
        return int((~self.matched).sum())

    @property
    def n_controls_used(self) -> int:
        return int(np.unique(self.weights.indices).size)

    @property
    def n_unmatched_control(self) -> int:
        return len(self.control_index) - self.n_controls_used

    def matches(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Control dataset rows and weights matched to the ``i``-th treated sample."""
        lo, hi = self.weights.indptr[i], self.weights.indptr[i + 1]
        return self.control_index[self.weights.indices[lo:hi]], self.weights.data[lo:hi]

    def write_csv(self, path) -> None:
        """Audit file: one row per (treated, control) pair with its weight."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["treated_row", "control_row", "weight"])
            for i, t in enumerate(self.treated_index):
                rows, wts = self.matches(i)
                for c, wt in zip(rows, wts):
                    w.writerow([int(t), int(c), repr(float(wt))])


def _split(data: ObservationalDataset, scores=None):
    t_idx = np.flatnonzero(data.treatment == 1)
    c_idx = np.flatnonzero(data.treatment == 0)
    if len(c_idx) == 0:
        raise MatchError("control group is empty")
    if len(t_idx) == 0:
        raise MatchError("treated group is empty")
    if scores is None:
        return t_idx, c_idx
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(scores) != len(data):
        raise MatchError(f"{len(scores)} scores for {len(data)} rows")
    return t_idx, c_idx, scores[t_idx], scores[c_idx]


def match_nn(scores, data: ObservationalDataset, k: int = 3, caliper: float | None = None) -> MatchResult:
    """``k`` nearest controls by score for each treated sample, with replacement.

    Ties go to the lowest control index. Treated samples whose nearest
    control is farther than ``caliper`` stay unmatched.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    t_idx, c_idx, st, sc = _split(data, scores)
    k_eff = min(k, len(c_idx))
    rows, cols, vals = [], [], []
    for i, s in enumerate(st):
        dist = np.abs(sc - s)
        kth = np.partition(dist, k_eff - 1)[k_eff - 1]
        cand = np.flatnonzero(dist <= kth)
        chosen = cand[np.lexsort((cand, dist[cand]))][:k_eff]
        if caliper is not None and dist[chosen[0]] > caliper:
            continue
        chosen = chosen if caliper is None else chosen[dist[chosen] <= caliper]
        rows.extend([i] * len(chosen))
        cols.extend(chosen)
        vals.extend([1.0 / len(chosen)] * len(chosen))
    w = sparse.csr_matrix((vals, (rows, cols)), shape=(len(t_idx), len(c_idx)))
    return MatchResult(w, t_idx, c_idx, "nn")


def epanechnikov(u):
    u = np.asarray(u, dtype=np.float64)
    return np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)


def silverman_bandwidth(values) -> float:
    """``0.9 * min(sd, IQR / 1.34) * n^(-1/5)``."""
    v = np.asarray(values, dtype=np.float64)
    sd = v.std(ddof=1)
    iqr = np.subtract(*np.percentile(v, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    if spread <= 0:
        return 1.0
    return float(0.9 * spread * len(v) ** (-0.2))


def match_kernel(scores, data: ObservationalDataset, bandwidth: float | None = None) -> MatchResult:
    """Epanechnikov weights over all controls by score distance.

    ``bandwidth=None`` applies Silverman's rule to the pooled scores.
    ``math.inf`` weights every control equally.
    """
    t_idx, c_idx, st, sc = _split(data, scores)
    if bandwidth is None:
        bandwidth = silverman_bandwidth(np.concatenate([st, sc]))
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    order = np.argsort(sc, kind="stable")
    sorted_sc = sc[order]
    indptr = [0]
    cols, vals = [], []
    for s in st:
        if math.isinf(bandwidth):
            sel = order
            wts = np.ones(len(order))
        else:
            lo = np.searchsorted(sorted_sc, s - bandwidth, side="right")
            hi = np.searchsorted(sorted_sc, s + bandwidth, side="left")
            sel = np.sort(order[lo:hi])
            wts = epanechnikov((sc[sel] - s) / bandwidth)
            keep = wts > 0
            sel, wts = sel[keep], wts[keep]
        total = wts.sum()
        if total > 0:
            cols.append(sel)
            vals.append(wts / total)
        indptr.append(indptr[-1] + (len(sel) if total > 0 else 0))
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    w = sparse.csr_matrix((vals, cols, np.asarray(indptr)), shape=(len(t_idx), len(c_idx)))
    return MatchResult(w, t_idx, c_idx, "kernel")


def sturges_bins(n: int) -> int:
    return int(math.ceil(math.log2(max(n, 1)) + 1))


def match_cem(data: ObservationalDataset, bins_per_dim=None) -> MatchResult:
    """Coarsened exact matching on the equal-sized cube grid.

    Strata holding both groups are kept. Within a stratum ``s`` every treated
    sample is matched to all of its controls with equal weight, which is the
    standard CEM control weight ``(m1_s / m0_s) * (M0 / M1)`` after
    normalizing per treated sample.
    """
    t_idx, c_idx = _split(data)
    if bins_per_dim is None:
        bins_per_dim = sturges_bins(len(data))
    bins = np.broadcast_to(np.asarray(bins_per_dim, dtype=np.int64), (data.q,))
    if (bins < 1).any():
        raise ValueError("bins_per_dim must be >= 1")
    ctrl, trt = data.subset(c_idx), data.subset(t_idx)
    lo, hi = resolve_bounds(ctrl.covariates, trt.covariates, "pooled")
    grid = build_grid(ctrl, trt, bins, (lo, hi), min_count=1).grid
    tid, _ = grid.cube_ids(trt.covariates)
    cid, _ = grid.cube_ids(ctrl.covariates)
    common = np.intersect1d(tid, cid)
    if len(common) == 0:
        raise MatchError("no stratum contains both treated and control samples")
    c_order = np.argsort(cid, kind="stable")
    c_sorted = cid[c_order]
    indptr = [0]
    cols, vals = [], []
    for key in tid:
        lo_i = np.searchsorted(c_sorted, key, side="left")
        hi_i = np.searchsorted(c_sorted, key, side="right")
        members = c_order[lo_i:hi_i]
        if len(members):
            cols.append(members)
            vals.append(np.full(len(members), 1.0 / len(members)))
        indptr.append(indptr[-1] + len(members))
    w = sparse.csr_matrix(
        (np.concatenate(vals), np.concatenate(cols), np.asarray(indptr)), shape=(len(t_idx), len(c_idx))
    )
    return MatchResult(w, t_idx, c_idx, "cem")


def att_from_matches(result: MatchResult, data: ObservationalDataset) -> AttEstimate:
    """Mean over matched treated of ``y1 - sum(w * y0)``."""
    matched = result.matched
    if not matched.any():
        raise MatchError("no treated sample was matched")
    y1 = data.outcomes[result.treated_index]
    y0 = data.outcomes[result.control_index]
    counterfactual = result.weights @ y0
    diffs = (y1 - counterfactual)[matched]
    att, se = mean_and_std_err(diffs)
    return AttEstimate(
        att, se, int(matched.sum()), result.n_unmatched_treated,
        estimator={"nn": "psm-nn", "kernel": "psm-kernel", "cem": "cem"}.get(result.estimator, result.estimator),
        n_control_used=result.n_controls_used,
    )


def psm_nn_att(data: ObservationalDataset, k: int = 3, caliper=None) -> tuple[AttEstimate, MatchResult]:
    scores = fit_propensity(data).predict(data.covariates)
    m = match_nn(scores, data, k, caliper)
    return att_from_matches(m, data), m


def psm_kernel_att(data: ObservationalDataset, bandwidth=None) -> tuple[AttEstimate, MatchResult]:
    scores = fit_propensity(data).predict(data.covariates)
    m = match_kernel(scores, data, bandwidth)
    return att_from_matches(m, data), m


def cem_att(data: ObservationalDataset, bins_per_dim=None) -> tuple[AttEstimate, MatchResult]:
    m = match_cem(data, bins_per_dim)
    return att_from_matches(m, data), m
