"""ATT estimation from a cube CATE, and the end-to-end GAN-ATT pipeline."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import cate as cate_mod
from . import gan as gan_mod
from .datasets import ObservationalDataset, save_csv
from .metrics import fidelity_report

log = logging.getLogger(__name__)

# warn when more than this share of treated samples falls outside common support
DROP_WARNING_SHARE = 0.05


class EstimationError(RuntimeError):
    pass


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class AttEstimate:
    att: float
    std_err: float
    n_used: int
    n_dropped: int
    estimator: str = "gan-att"
    n_control_used: int | None = None
    # components of std_err: spread of per-sample CATEs, noise of the cube
    # means, and the noise of the real sample the generator was fit to
    std_err_evaluation: float | None = None
    std_err_synthetic: float | None = None
    std_err_data: float | None = None
    per_sample: np.ndarray | None = field(default=None, repr=False)

    def confidence_interval(self, level: float = 0.95) -> tuple[float, float]:
        """Gaussian interval ``att +/- z * std_err``."""
        z = stats.norm.ppf(0.5 + level / 2.0)
        return self.att - z * self.std_err, self.att + z * self.std_err

    def as_dict(self) -> dict:
        lo, hi = self.confidence_interval()
        out = {
            "estimator": self.estimator,
            "att": self.att,
            "std_err": self.std_err,
            "n_used": self.n_used,
            "n_dropped": self.n_dropped,
            "ci95": [lo, hi],
        }
        if self.n_control_used is not None:
            out["n_control_used"] = self.n_control_used
        if self.std_err_synthetic is not None:
            out["std_err_evaluation"] = self.std_err_evaluation
            out["std_err_synthetic"] = self.std_err_synthetic
        if self.std_err_data is not None:
            out["std_err_data"] = self.std_err_data
        return out


def mean_and_std_err(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if len(values) < 2:
        return mean, 0.0
    se = float(values.std(ddof=1) / np.sqrt(len(values)))
    # a constant sample has zero spread; suppress rounding residue
    if np.all(values == values[0]):
        se = 0.0
    return mean, se


def estimate_att(
    cate: cate_mod.CateFunction,
    treated_covariates,
    keep_samples: bool = False,
    real_data: ObservationalDataset | None = None,
) -> AttEstimate:
    """Average the CATE over treated covariate rows; unsupported rows are dropped.

    The standard error combines independent sources: the spread of the
    per-sample CATEs over the evaluation rows (``sd / sqrt(n_used)``) and the
    sampling noise of the cube means they share,
    ``sqrt(sum_c n_c^2 var_c) / n_used`` with ``n_c`` evaluation rows in cube
    ``c`` and ``var_c`` the variance of that cube's ``mean1 - mean0``.

    When ``real_data`` is given (the sample a generator was trained on), a
    third term repeats the cube-mean calculation with that sample's per-cube
    counts: a generator cannot pin down a cube's outcome means more
    precisely than the real rows in it allow. Optimization noise of the
    generator itself is not included.
    """
    values = cate.evaluate_many(treated_covariates)
    ok = ~np.isnan(values)
    n_used = int(ok.sum())
    if n_used == 0:
        raise EstimationError("no common support: no treated sample falls in a cube populated by both groups")
    att, se_eval = mean_and_std_err(values[ok])

    ids, _ = cate.grid.cube_ids(treated_covariates)
    pos, _ = cate.grid.lookup(ids[ok])
    n_c = np.bincount(pos, minlength=len(cate.grid.keys)).astype(np.float64)

    def shared_noise(var_c):
        return float(np.sqrt(np.sum(n_c * n_c * np.nan_to_num(var_c))) / n_used)

    se_synth = shared_noise(cate.cube_mean_variance())
    se_data = None
    if real_data is not None:
        counts = tuple(cate.grid.count(real_data.group(g).covariates) for g in (0, 1))
        se_data = shared_noise(cate.cube_mean_variance(counts))
    se = float(np.sqrt(se_eval**2 + se_synth**2 + (se_data or 0.0) ** 2))
    return AttEstimate(
        att, se, n_used, int(len(values) - n_used),
        std_err_evaluation=se_eval, std_err_synthetic=se_synth, std_err_data=se_data,
        per_sample=values if keep_samples else None,
    )


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class GridConfig:
    bins_per_dim: int | tuple[int, ...] | None = None
    bounds_policy: str | tuple = "pooled"
    min_count: int = cate_mod.DEFAULT_MIN_COUNT


@dataclass
class PipelineResult:
    estimate: AttEstimate
    cate: cate_mod.CateFunction
    synthetic0: ObservationalDataset
    synthetic1: ObservationalDataset
    models: dict = field(default_factory=dict)
    training_logs: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def benchmark_sampler(spec):
    """Sampler drawing directly from a benchmark's true model (bypasses the GAN)."""
    from .datasets import generate_linear, generate_nonlinear, LinearBenchmarkSpec

    def sample(group: int, n: int, seed: int) -> ObservationalDataset:
        params = {k: v for k, v in vars(spec).items()}
        params.update(n0=n, n1=n, seed=seed)
        gen = generate_linear if isinstance(spec, LinearBenchmarkSpec) else generate_nonlinear
        return gen(type(spec)(**params)).group(group)

    return sample


def _stage(name, timings):
    class _Stage:
        def __enter__(self):
            self.t0 = time.perf_counter()
            log.info("stage %s", name)

        def __exit__(self, exc_type, exc, tb):
            timings[name] = round(time.perf_counter() - self.t0, 3)
            if exc is not None and not isinstance(exc, PipelineError):
                raise PipelineError(name, exc) from exc
            return False

    return _Stage()


def _real_fidelity(real: ObservationalDataset, synth: ObservationalDataset) -> dict:
    names = [*real.column_names, real.outcome_name]
    r = np.column_stack([real.covariates, real.outcomes])
    s = np.column_stack([synth.covariates, synth.outcomes])
    return fidelity_report(r, s, names).as_dict()


def _group_summary(data: ObservationalDataset) -> dict:
    return {
        "n": len(data),
        "outcome_mean": float(data.outcomes.mean()) if len(data) else None,
        "outcome_std": float(data.outcomes.std(ddof=1)) if len(data) > 1 else None,
    }


def run_pipeline(
    real_data: ObservationalDataset,
    train_config: gan_mod.TrainConfig | None = None,
    synth_n: int = 200_000,
    grid_config: GridConfig | None = None,
    out_dir=None,
    mode: str = "merged",
    synth_seed: int | None = None,
    sampler=None,
    evaluation_covariates=None,
    training_data: ObservationalDataset | None = None,
) -> PipelineResult:
    """Train, synthesize, bin and average: the four GAN-ATT steps.

    ``mode="merged"`` trains one conditional GAN on both groups;
    ``mode="separate"`` trains one per group. ``sampler(group, n, seed)``
    replaces training and synthesis entirely (used for oracle checks).
    The ATT is averaged over ``evaluation_covariates``, by default the real
    treated rows. ``training_data`` substitutes the GAN's training set (for
    instance a noise-augmented copy) while the evaluation set stays real.
    """
    train_config = train_config or gan_mod.TrainConfig()
    grid_config = grid_config or GridConfig()
    if mode not in ("merged", "separate"):
        raise ValueError(f"unknown mode {mode!r}")
    if real_data.n_treated == 0 or real_data.n_control == 0:
        raise PipelineError("data", ValueError("real data must contain both treated and control rows"))
    if int(synth_n) != synth_n or synth_n < 1:
        raise PipelineError("data", ValueError("synth_n must be a positive integer"))
    synth_seed = train_config.seed + 1000 if synth_seed is None else synth_seed
    fit_data = real_data if training_data is None else training_data
    timings: dict = {}
    models, logs = {}, {}

    with _stage("train", timings):
        if sampler is None:
            if mode == "merged":
                models["merged"], logs["merged"] = gan_mod.train(fit_data, train_config)
            else:
                for g in (0, 1):
                    models[f"group{g}"], logs[f"group{g}"] = gan_mod.train(fit_data.group(g), train_config)

    with _stage("synthesize", timings):
        synth = []
        for g in (0, 1):
            if sampler is not None:
                synth.append(sampler(g, synth_n, synth_seed + g))
            else:
                model = models["merged"] if mode == "merged" else models[f"group{g}"]
                synth.append(gan_mod.synthesize(model, g, synth_n, seed=synth_seed + g))

    with _stage("cate", timings):
        cate = cate_mod.build_grid(
            synth[0], synth[1], grid_config.bins_per_dim, grid_config.bounds_policy, grid_config.min_count
        )

    with _stage("estimate", timings):
        x_eval = real_data.group(1).covariates if evaluation_covariates is None else evaluation_covariates
        # oracle samplers never see the real data, so only trained runs carry its noise
        estimate = estimate_att(cate, x_eval, keep_samples=True, real_data=real_data if sampler is None else None)

    warnings = []
    n_eval = estimate.n_used + estimate.n_dropped
    if estimate.n_dropped > DROP_WARNING_SHARE * n_eval:
        warnings.append(
            f"{estimate.n_dropped} of {n_eval} treated samples lack common support; raise synth_n"
        )
    n_active = int(np.count_nonzero((cate.grid.count0 > 0) | (cate.grid.count1 > 0)))
    if synth_n < grid_config.min_count * n_active:
        warnings.append(
            f"synth_n={synth_n} is below min_count x active cubes ({grid_config.min_count} x {n_active}); support is starved"
        )
    for w in warnings:
        log.warning(w)

    report = {
        "config": {
            "mode": "oracle" if sampler is not None else mode,
            "synth_n": int(synth_n),
            "synth_seed": int(synth_seed),
            "train": _jsonable(asdict(train_config)) if sampler is None else None,
            "grid": _jsonable(asdict(grid_config)),
        },
        "data": {
            "real_control": _group_summary(real_data.group(0)),
            "real_treated": _group_summary(real_data.group(1)),
            "synthetic_control": _group_summary(synth[0]),
            "synthetic_treated": _group_summary(synth[1]),
            "training_rows": len(fit_data),
        },
        "fidelity": {
            "control": _real_fidelity(real_data.group(0), synth[0]),
            "treated": _real_fidelity(real_data.group(1), synth[1]),
        },
        "grid": {
            "bins": [int(b) for b in cate.grid.bins],
            "lower": [float(v) for v in cate.grid.lower],
            "upper": [float(v) for v in cate.grid.upper],
            "nonempty_cubes": len(cate.grid.keys),
            "supported_cubes": int(cate.supported.sum()),
            "overflow": [cate.grid.overflow0, cate.grid.overflow1],
            "min_count": cate.min_count,
        },
        "training": {
            name: {
                "steps": tl.steps,
                "chosen_restart": tl.chosen_restart,
                "restart_distances": tl.restart_distances,
                "final_generator_loss": tl.generator_loss[-1] if tl.generator_loss else None,
                "final_discriminator_loss": tl.discriminator_loss[-1] if tl.discriminator_loss else None,
            }
            for name, tl in logs.items()
        },
        "estimate": estimate.as_dict(),
        "n_evaluation": n_eval,
        "warnings": warnings,
    }
    result = PipelineResult(estimate, cate, synth[0], synth[1], models, logs, report, timings)
    if out_dir is not None:
        write_artifacts(result, out_dir)
    return result


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def dump_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_artifacts(result: PipelineResult, out_dir) -> None:
    """Persist models, synthetic data, CATE surface, loss curves and the run report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, model in result.models.items():
        gan_mod.save_model(model, out / f"model_{name}.gan")
    for name, tl in result.training_logs.items():
        tl.write_csv(out / f"losses_{name}.csv")
    save_csv(result.synthetic0, out / "synthetic_control.csv")
    save_csv(result.synthetic1, out / "synthetic_treated.csv")
    cate_mod.export_cate_surface(result.cate, out / "cate_surface.csv")
    dump_report(result.report, out / "run_report.json")
    # wall-clock timings vary run to run, so they live outside the report
    dump_report(result.timings, out / "timings.json")
