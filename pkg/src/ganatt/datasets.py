"""Observational datasets, benchmark generators, noise augmentation and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Invalid benchmark or augmentation parameters."""


class DataError(ValueError):
    """Malformed or unusable data."""


class ParseError(DataError):
    """A CSV file could not be parsed; carries the offending location."""

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class ObservationalDataset:
    """Covariates ``x`` (n, q), outcomes ``y`` (n,) and treatment flags ``d`` (n,)."""

    covariates: np.ndarray
    outcomes: np.ndarray
    treatment: np.ndarray
    column_names: tuple[str, ...] = ()
    outcome_name: str = "y"
    treatment_name: str = "d"

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.outcomes, dtype=np.float64).reshape(-1)
        d = np.asarray(self.treatment).reshape(-1)
        if x.ndim != 2:
            raise DataError("covariates must be a 2-D array")
        if not (len(x) == len(y) == len(d)):
            raise DataError(f"row counts differ: covariates {len(x)}, outcomes {len(y)}, treatment {len(d)}")
        if d.size and not np.isin(d, (0, 1)).all():
            raise DataError("treatment values must be 0 or 1")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise DataError("covariates and outcomes must be finite")
        names = tuple(self.column_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError(f"{len(names)} column names for {x.shape[1]} covariates")
        for arr in (x, y):
            arr.setflags(write=False)
        d = d.astype(np.int8)
        d.setflags(write=False)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "treatment", d)
        object.__setattr__(self, "column_names", names)

    def __len__(self):
        return len(self.outcomes)

    @property
    def q(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    @property
    def n_control(self) -> int:
        return len(self) - self.n_treated

    def group(self, d: int) -> "ObservationalDataset":
        return self.subset(self.treatment == d)

    def subset(self, mask_or_index) -> "ObservationalDataset":
        return ObservationalDataset(
            self.covariates[mask_or_index],
            self.outcomes[mask_or_index],
            self.treatment[mask_or_index],
            self.column_names,
            self.outcome_name,
            self.treatment_name,
        )

    @staticmethod
    def concat(parts) -> "ObservationalDataset":
        parts = list(parts)
        first = parts[0]
        return ObservationalDataset(
            np.vstack([p.covariates for p in parts]),
            np.concatenate([p.outcomes for p in parts]),
            np.concatenate([p.treatment for p in parts]),
            first.column_names,
            first.outcome_name,
            first.treatment_name,
        )


# ---------------------------------------------------------------------------
# benchmarks


@dataclass
class LinearBenchmarkSpec:
    """``y = alpha + beta * x + gamma * d + eps`` with ``x_d ~ N(mu_d, sigma_xd**2)``.

    ``sigma_x0``, ``sigma_x1`` and ``sigma_eps`` are standard deviations.
    The ATT of this process is ``gamma``.
    """

    alpha: float = 0.0
    beta: float = 1.5
    gamma: float = 1.0
    mu0: float = 0.0
    mu1: float = 1.0
    sigma_x0: float = 1.0
    sigma_x1: float = 2.0
    sigma_eps: float = 0.1
    n0: int = 50_000
    n1: int = 50_000
    seed: int = 0

    kind = "linear"

    def validate(self):
        if self.n0 <= 0 or self.n1 <= 0:
            raise ConfigError(f"group sizes must be positive, got n0={self.n0}, n1={self.n1}")
        if min(self.sigma_x0, self.sigma_x1, self.sigma_eps) <= 0:
            raise ConfigError("sigma_x0, sigma_x1 and sigma_eps must be positive")

    def conditional_mean(self, x, d):
        return self.alpha + self.beta * np.asarray(x).reshape(-1) + self.gamma * np.asarray(d)

    def true_att(self) -> float:
        return float(self.gamma)


def _tanh_half(u):
    # (1 - e^-u) / (1 + e^-u)
    return np.tanh(0.5 * u)


@dataclass
class NonlinearBenchmarkSpec:
    """Two-dimensional benchmark with covariate-dependent effect.

    ``y0 = alpha * (1 - e^{-W.x}) / (1 + e^{-W.x}) + eps``,
    ``y1 = beta * (1 - e^{-W.x}) / (1 + e^{-W.x}) + t(x) + eps``, with
    ``t(x) = gamma * exp(-|x|^2 / (2 sigma))`` and ``x_d ~ N(mu_d, Sigma Sigma^T)``.

    ``W``, ``Sigma`` and ``mu1`` are random in the original design; use
    :meth:`draw` to realize them from a seed.
    """

    W: np.ndarray
    Sigma: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray = field(default_factory=lambda: np.zeros(2))
    alpha: float = 5.0
    beta: float = 5.0
    gamma: float = 1.5
    sigma: float = 4.0
    sigma_eps: float = 0.1
    n0: int = 100_000
    n1: int = 100_000
    seed: int = 0

    kind = "nonlinear"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64).reshape(2)
        self.Sigma = np.asarray(self.Sigma, dtype=np.float64).reshape(2, 2)
        self.mu0 = np.asarray(self.mu0, dtype=np.float64).reshape(2)
        self.mu1 = np.asarray(self.mu1, dtype=np.float64).reshape(2)

    @classmethod
    def draw(cls, draw_seed: int = 7, **params) -> "NonlinearBenchmarkSpec":
        """Realize ``W ~ U(-1,1)^2``, ``Sigma ~ U(-1,1)^{2x2}``, ``mu1 ~ U(-1,1)^2``."""
        rng = np.random.default_rng(draw_seed)
        W = rng.uniform(-1, 1, size=2)
        Sigma = rng.uniform(-1, 1, size=(2, 2))
        mu1 = rng.uniform(-1, 1, size=2)
        params.setdefault("seed", draw_seed)
        return cls(W=W, Sigma=Sigma, mu1=mu1, **params)

    def validate(self):
        if self.n0 <= 0 or self.n1 <= 0:
            raise ConfigError(f"group sizes must be positive, got n0={self.n0}, n1={self.n1}")
        if self.sigma_eps <= 0 or self.sigma <= 0:
            raise ConfigError("sigma and sigma_eps must be positive")
        if np.array_equal(self.mu0, self.mu1):
            raise ConfigError("mu0 must differ from mu1 to keep selection bias")
        if not np.isfinite(self.W).all() or not np.isfinite(self.Sigma).all():
            raise ConfigError("W and Sigma must be finite")

    def effect(self, x) -> np.ndarray:
        """The preset CATE ``t(x)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.gamma * np.exp(-np.sum(x * x, axis=1) / (2.0 * self.sigma))

    def conditional_mean(self, x, d):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = np.asarray(d)
        s = _tanh_half(x @ self.W)
        return np.where(d == 1, self.beta * s + self.effect(x), self.alpha * s)

    def sample_covariates(self, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
        mu = self.mu1 if d == 1 else self.mu0
        return mu + rng.standard_normal((n, 2)) @ self.Sigma.T


def generate_linear(spec: LinearBenchmarkSpec) -> ObservationalDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    x0 = rng.normal(spec.mu0, spec.sigma_x0, size=spec.n0)
    x1 = rng.normal(spec.mu1, spec.sigma_x1, size=spec.n1)
    x = np.concatenate([x0, x1])
    d = np.concatenate([np.zeros(spec.n0, np.int8), np.ones(spec.n1, np.int8)])
    y = spec.conditional_mean(x, d) + rng.normal(0.0, spec.sigma_eps, size=len(x))
    return ObservationalDataset(x[:, None], y, d, ("x",))


def generate_nonlinear(spec: NonlinearBenchmarkSpec) -> ObservationalDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    x0 = spec.sample_covariates(spec.n0, 0, rng)
    x1 = spec.sample_covariates(spec.n1, 1, rng)
    x = np.vstack([x0, x1])
    d = np.concatenate([np.zeros(spec.n0, np.int8), np.ones(spec.n1, np.int8)])
    y = spec.conditional_mean(x, d) + rng.normal(0.0, spec.sigma_eps, size=len(x))
    return ObservationalDataset(x, y, d, ("x1", "x2"))


def monte_carlo_ground_truth(
    spec: NonlinearBenchmarkSpec, n_draws: int = 10_000_000, seed: int | None = None, chunk: int = 1_000_000
) -> tuple[float, float]:
    """Mean of ``t(x1)`` over the treated covariate law and its standard error."""
    if n_draws < 1_000_000:
        raise ConfigError("n_draws must be at least 1e6")
    rng = np.random.default_rng(spec.seed + 1_000_003 if seed is None else seed)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_draws:
        m = min(chunk, n_draws - done)
        t = spec.effect(spec.sample_covariates(m, 1, rng))
        total += t.sum()
        total_sq += (t * t).sum()
        done += m
    mean = total / n_draws
    var = max(total_sq / n_draws - mean * mean, 0.0) * n_draws / (n_draws - 1)
    return float(mean), float(math.sqrt(var / n_draws))


# ---------------------------------------------------------------------------
# augmentation


def augment_with_noise(
    data: ObservationalDataset, factor: int, noise_sigma=None, seed: int = 0
) -> ObservationalDataset:
    """Replicate every row ``factor`` times, jittering all but the original copy.

    Gaussian noise is added to covariates and outcome. ``noise_sigma`` may be
    a scalar, a per-column vector over ``[covariates..., outcome]``, or
    ``None`` for 0.1 times each column's sample standard deviation.
    """
    if len(data) == 0:
        raise DataError("cannot augment an empty dataset")
    if factor < 1:
        raise ConfigError("factor must be at least 1")
    table = np.column_stack([data.covariates, data.outcomes])
    if noise_sigma is None:
        scale = 0.1 * table.std(axis=0, ddof=1) if len(data) > 1 else np.zeros(table.shape[1])
    else:
        scale = np.broadcast_to(np.asarray(noise_sigma, dtype=np.float64), (table.shape[1],))
        if (scale < 0).any():
            raise ConfigError("noise_sigma must be non-negative")
    if factor == 1:
        return data
    rng = np.random.default_rng(seed)
    copies = np.repeat(table[None], factor - 1, axis=0)
    copies = copies + rng.standard_normal(copies.shape) * scale
    out = np.vstack([table, copies.reshape(-1, table.shape[1])])
    d = np.tile(data.treatment, factor)
    return ObservationalDataset(
        out[:, :-1], out[:, -1], d, data.column_names, data.outcome_name, data.treatment_name
    )


# ---------------------------------------------------------------------------
# CSV


@dataclass
class LoadReport:
    rows_read: int = 0
    rows_kept: int = 0
    dropped_missing_outcome: int = 0
    dropped_missing_treatment: int = 0
    dropped_missing_covariates: int = 0
    imputed_cells: int = 0
    imputed_by_column: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


_MISSING = {"", "na", "nan", "null", "none"}


def _parse_cell(text, row, column):
    if text.strip().lower() in _MISSING:
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r}", row=row, column=column) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value {text!r}", row=row, column=column)
    return value


def load_csv(
    path,
    outcome: str = "y",
    treatment: str = "d",
    covariates=None,
    impute_threshold: float = 0.04,
    return_report: bool = False,
):
    """Read a comma-separated file with a header row into a dataset.

    Rows with a missing outcome or treatment are dropped. A missing covariate
    cell is replaced by its column mean when that column's missing fraction
    is at most ``impute_threshold``; otherwise rows missing that column are
    dropped. ``covariates=None`` takes every other column.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file, header row required") from None
        for name in (outcome, treatment):
            if name not in header:
                raise ParseError(f"unknown column {name!r}: not in header", row=1, column=name)
        if covariates is None:
            covariates = [h for h in header if h not in (outcome, treatment)]
        for name in covariates:
            if name not in header:
                raise ParseError(f"unknown column {name!r}: not in header", row=1, column=name)
        wanted = [outcome, treatment, *covariates]
        idx = [header.index(name) for name in wanted]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", row=lineno)
            values = [_parse_cell(rec[i], lineno, name) for i, name in zip(idx, wanted)]
            dval = values[1]
            if not math.isnan(dval) and dval not in (0.0, 1.0):
                raise ParseError(f"treatment must be 0 or 1, got {rec[idx[1]]!r}", row=lineno, column=treatment)
            rows.append(values)

    report = LoadReport(rows_read=len(rows))
    table = np.array(rows, dtype=np.float64).reshape(len(rows), len(wanted))
    keep = np.ones(len(table), dtype=bool)
    miss_y = np.isnan(table[:, 0])
    miss_d = np.isnan(table[:, 1]) & ~miss_y
    report.dropped_missing_outcome = int(miss_y.sum())
    report.dropped_missing_treatment = int(miss_d.sum())
    keep &= ~(miss_y | miss_d)

    x = table[:, 2:]
    n_eligible = int(keep.sum())
    drop_cov = np.zeros(len(table), dtype=bool)
    for j, name in enumerate(covariates):
        missing = np.isnan(x[:, j]) & keep
        n_missing = int(missing.sum())
        if not n_missing:
            continue
        if n_missing / max(n_eligible, 1) <= impute_threshold and (keep & ~missing).any():
            mean = x[keep & ~missing, j].mean()
            x[missing, j] = mean
            report.imputed_cells += n_missing
            report.imputed_by_column[name] = n_missing
        else:
            drop_cov |= missing
    report.dropped_missing_covariates = int(drop_cov.sum())
    keep &= ~drop_cov
    report.rows_kept = int(keep.sum())

    data = ObservationalDataset(
        x[keep], table[keep, 0], table[keep, 1].astype(np.int8), tuple(covariates), outcome, treatment
    )
    return (data, report) if return_report else data


def save_csv(data: ObservationalDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*data.column_names, data.outcome_name, data.treatment_name])
        for xi, yi, di in zip(data.covariates, data.outcomes, data.treatment):
            w.writerow([*(repr(float(v)) for v in xi), repr(float(yi)), int(di)])


# ---------------------------------------------------------------------------
# benchmark spec files: flat ``key = value`` text


def _fmt(value):
    if isinstance(value, np.ndarray):
        return ",".join(repr(float(v)) for v in value.reshape(-1))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_spec_file(spec, path, extra: dict | None = None) -> None:
    """Write a benchmark spec (including realized random draws) as key-value text."""
    lines = ["# ganatt benchmark spec", f"kind = {spec.kind}"]
    for key, value in vars(spec).items():
        lines.append(f"{key} = {_fmt(value)}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {_fmt(value)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", row=lineno)
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_spec_file(path):
    kv = read_kv_file(path)
    kind = kv.pop("kind", None)
    if kind == "linear":
        cls, floats, ints = LinearBenchmarkSpec, {
            "alpha", "beta", "gamma", "mu0", "mu1", "sigma_x0", "sigma_x1", "sigma_eps"}, {"n0", "n1", "seed"}
        params = {k: float(v) for k, v in kv.items() if k in floats}
        params.update({k: int(v) for k, v in kv.items() if k in ints})
        return cls(**params)
    if kind == "nonlinear":
        arrays = {"W": (2,), "Sigma": (2, 2), "mu0": (2,), "mu1": (2,)}
        params = {}
        for k, v in kv.items():
            if k in arrays:
                params[k] = np.array([float(s) for s in v.split(",")]).reshape(arrays[k])
            elif k in ("alpha", "beta", "gamma", "sigma", "sigma_eps"):
                params[k] = float(v)
            elif k in ("n0", "n1", "seed"):
                params[k] = int(v)
        return NonlinearBenchmarkSpec(**params)
    raise ParseError(f"unknown benchmark kind {kind!r}")
