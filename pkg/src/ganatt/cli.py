"""Command-line front end.

Exit codes: 0 success, 1 usage, 2 data error, 3 training error,
4 estimation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines
from .att import EstimationError, GridConfig, PipelineError, dump_report, run_pipeline
from .cate import ShapeError
from .datasets import (
    ConfigError,
    DataError,
    LinearBenchmarkSpec,
    NonlinearBenchmarkSpec,
    ObservationalDataset,
    augment_with_noise,
    generate_linear,
    generate_nonlinear,
    load_csv,
    monte_carlo_ground_truth,
    read_kv_file,
    save_csv,
    write_spec_file,
)
from .gan import ModelLoadError, TrainConfig, TrainingError, load_model, save_model, synthesize, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN, EXIT_ESTIMATE = 0, 1, 2, 3, 4

log = logging.getLogger("ganatt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


@dataclass
class RunConfig:
    """Resolved settings for one command invocation."""

    command: str
    inputs: list[Path] = field(default_factory=list)
    out: Path | None = None
    train: TrainConfig | None = None
    grid: GridConfig | None = None
    synth_n: int | None = None
    seed: int = 0
    verbosity: int = 0
    options: dict = field(default_factory=dict)

    def validate(self):
        for path in self.inputs:
            if not path.exists():
                raise FileNotFoundError(f"input not found: {path}")


# ---------------------------------------------------------------------------
# argument groups


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _widths(text):
    try:
        widths = tuple(int(t) for t in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated layer widths, got {text!r}") from None
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError("layer widths must be positive")
    return widths


def _bins(text):
    if str(text).lower() in ("auto", "none", ""):
        return None
    parts = [int(t) for t in str(text).split(",")]
    if min(parts) < 1:
        raise argparse.ArgumentTypeError("bins must be >= 1")
    return parts[0] if len(parts) == 1 else tuple(parts)


def _add_common(p):
    p.add_argument("--config", help="flat 'key = value' file; keys are long option names (dashes or underscores)")
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("-v", "--verbose", action="count", default=0, help="increase log verbosity")


def _add_data(p):
    p.add_argument("data", help="input CSV with a header row")
    p.add_argument("--outcome", default="y", help="outcome column name")
    p.add_argument("--treatment", default="d", help="treatment column name (values 0/1)")
    p.add_argument("--covariates", default=None, help="comma-separated covariate columns (default: all others)")
    p.add_argument("--impute-threshold", type=float, default=0.04,
                   help="max missing share per covariate column imputed by its mean")


def _add_train(p):
    d = TrainConfig()
    g = p.add_argument_group("GAN training")
    g.add_argument("--epochs", type=_nonneg_int, default=d.epochs, help="passes over the training data")
    g.add_argument("--batch-size", type=_positive_int, default=d.batch_size, help="minibatch size")
    g.add_argument("--noise-dim", type=_positive_int, default=d.noise_dim, help="generator noise dimension")
    g.add_argument("--generator-hidden", type=_widths, default=d.generator_hidden, help="generator hidden widths")
    g.add_argument("--discriminator-hidden", type=_widths, default=d.discriminator_hidden,
                   help="discriminator hidden widths")
    g.add_argument("--generator-lr", type=float, default=d.generator_lr, help="generator Adam learning rate")
    g.add_argument("--discriminator-lr", type=float, default=d.discriminator_lr,
                   help="discriminator Adam learning rate")
    g.add_argument("--beta1", type=float, default=d.beta1, help="Adam beta1")
    g.add_argument("--beta2", type=float, default=d.beta2, help="Adam beta2")
    g.add_argument("--d-steps", type=_positive_int, default=d.d_steps,
                   help="discriminator updates per generator update")
    g.add_argument("--ema-decay", type=float, default=d.ema_decay,
                   help="generator weight moving-average decay (0 disables)")
    g.add_argument("--restarts", type=_positive_int, default=d.restarts,
                   help="independent training runs; the best moment match is kept")
    g.add_argument("--snapshot-interval", type=_positive_int, default=d.snapshot_interval,
                   help="epochs between fidelity snapshots")
    g.add_argument("--early-stop-distance", type=float, default=None,
                   help="stop when the standardized moment distance drops below this")
    g.add_argument("--discrete-columns", default="auto",
                   help="comma-separated discrete covariates, 'auto' to detect, 'none' to disable")
    g.add_argument("--augment-treated", type=_positive_int, default=1,
                   help="replicate treated rows this many times with Gaussian jitter before training")
    g.add_argument("--augment-sigma", type=float, default=None,
                   help="jitter sd (default 0.1 x column sd)")


def _add_grid(p):
    g = p.add_argument_group("CATE grid")
    g.add_argument("--synth-n", type=_positive_int, default=200_000, help="synthetic rows per group")
    g.add_argument("--bins", type=_bins, default=None,
                   help="cubes per dimension: int, comma list, or auto (ceil(N^(1/(q+2))) capped at 64)")
    g.add_argument("--min-count", type=_positive_int, default=5, help="samples per group needed in a cube")
    g.add_argument("--mode", choices=("merged", "separate"), default="merged",
                   help="one conditional GAN, or one GAN per group")


def _add_baselines(p):
    g = p.add_argument_group("matching baselines")
    g.add_argument("--k", type=_positive_int, default=3, help="neighbours for PSM-NN")
    g.add_argument("--caliper", type=float, default=None, help="PSM-NN caliper on the score scale")
    g.add_argument("--bandwidth", type=float, default=None,
                   help="PSM-Kernel bandwidth (default Silverman's rule)")
    g.add_argument("--cem-bins", type=_bins, default=None, help="CEM bins per dimension (default Sturges)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ganatt", description="ATT estimation from conditional-GAN synthetic data.",
                     formatter_class=_Formatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate-benchmark", help="write a benchmark dataset, its spec and ground truth",
                       formatter_class=_Formatter)
    p.add_argument("--kind", choices=("linear", "nonlinear"), default="linear", help="benchmark family")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n0", type=int, default=None, help="control rows (linear 50000, nonlinear 100000)")
    p.add_argument("--n1", type=int, default=None, help="treated rows (linear 50000, nonlinear 100000)")
    p.add_argument("--alpha", type=float, default=None, help="alpha (linear 0, nonlinear 5)")
    p.add_argument("--beta", type=float, default=None, help="beta (linear 1.5, nonlinear 5)")
    p.add_argument("--gamma", type=float, default=None, help="gamma (linear 1, nonlinear 1.5)")
    p.add_argument("--sigma", type=float, default=4.0, help="nonlinear effect width")
    p.add_argument("--sigma-eps", type=float, default=0.1, help="outcome noise sd")
    p.add_argument("--mu0", type=float, default=0.0, help="linear: control covariate mean")
    p.add_argument("--mu1", type=float, default=1.0, help="linear: treated covariate mean")
    p.add_argument("--sigma-x0", type=float, default=1.0, help="linear: control covariate sd")
    p.add_argument("--sigma-x1", type=float, default=2.0, help="linear: treated covariate sd")
    p.add_argument("--draw-seed", type=int, default=5, help="nonlinear: seed realizing W, Sigma, mu1")
    p.add_argument("--mc-draws", type=int, default=10_000_000, help="nonlinear: Monte-Carlo draws for the truth")
    p.add_argument("--subsample-treated", type=int, default=None,
                   help="keep only this many randomly chosen treated rows")
    _add_common(p)

    p = sub.add_parser("train", help="train a conditional GAN on a CSV dataset", formatter_class=_Formatter)
    _add_data(p)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--losses", default=None, help="optional CSV of per-epoch losses")
    _add_train(p)
    _add_common(p)

    p = sub.add_parser("synthesize", help="draw synthetic rows from a trained model", formatter_class=_Formatter)
    p.add_argument("model", help="model file written by 'train'")
    p.add_argument("--out", required=True, help="CSV file to write")
    p.add_argument("--n", type=_positive_int, default=200_000, help="rows per group")
    p.add_argument("--group", choices=("0", "1", "both"), default="both", help="treatment group(s) to synthesize")
    _add_common(p)

    p = sub.add_parser("estimate", help="run the four-step GAN-ATT pipeline", formatter_class=_Formatter)
    _add_data(p)
    p.add_argument("--out", required=True, help="output directory for models, synthetic data and the run report")
    _add_train(p)
    _add_grid(p)
    _add_common(p)

    p = sub.add_parser("compare", help="GAN-ATT versus PSM-NN, PSM-Kernel and CEM", formatter_class=_Formatter)
    _add_data(p)
    p.add_argument("--out", required=True, help="output directory")
    _add_train(p)
    _add_grid(p)
    _add_baselines(p)
    _add_common(p)

    p = sub.add_parser("report", help="summarize a run directory", formatter_class=_Formatter)
    p.add_argument("run_dir", help="directory written by 'estimate' or 'compare'")
    p.add_argument("--out", default=None, help="also write the summary to this text file")
    _add_common(p)
    return parser


# ---------------------------------------------------------------------------
# config files


def _apply_config_file(parser, subparser, argv):
    """Re-parse with config-file values as defaults, so flags still win."""
    pre, _ = parser.parse_known_args(argv)
    if not getattr(pre, "config", None):
        return pre
    path = Path(pre.config)
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    values = read_kv_file(path)
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} in {path}")
        action = actions[dest]
        try:
            defaults[dest] = action.type(raw) if action.type else raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"bad value for {key!r} in {path}: {exc}") from None
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _train_config(args) -> TrainConfig:
    discrete = args.discrete_columns
    if discrete == "none":
        discrete = ()
    elif discrete != "auto":
        discrete = tuple(s.strip() for s in discrete.split(",") if s.strip())
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        noise_dim=args.noise_dim,
        generator_hidden=tuple(args.generator_hidden),
        discriminator_hidden=tuple(args.discriminator_hidden),
        generator_lr=args.generator_lr,
        discriminator_lr=args.discriminator_lr,
        beta1=args.beta1,
        beta2=args.beta2,
        d_steps=args.d_steps,
        ema_decay=args.ema_decay,
        seed=args.seed,
        snapshot_interval=args.snapshot_interval,
        early_stop_distance=args.early_stop_distance,
        restarts=args.restarts,
        discrete_columns=discrete,
    )


def run_config(args) -> RunConfig:
    inputs = [Path(p) for p in (getattr(args, "data", None), getattr(args, "model", None),
                                getattr(args, "run_dir", None)) if p]
    cfg = RunConfig(
        command=args.command,
        inputs=inputs,
        out=Path(args.out) if getattr(args, "out", None) else None,
        seed=args.seed,
        verbosity=args.verbose,
    )
    if hasattr(args, "epochs"):
        cfg.train = _train_config(args)
    if hasattr(args, "synth_n"):
        cfg.grid = GridConfig(bins_per_dim=args.bins, min_count=args.min_count)
        cfg.synth_n = args.synth_n
    return cfg


# ---------------------------------------------------------------------------
# commands


def _load(args) -> ObservationalDataset:
    covs = [c.strip() for c in args.covariates.split(",")] if args.covariates else None
    data, report = load_csv(args.data, args.outcome, args.treatment, covs, args.impute_threshold, return_report=True)
    if report.rows_kept != report.rows_read:
        log.warning("load report: %s", report.as_dict())
    return data


def _training_data(args, data: ObservationalDataset) -> ObservationalDataset | None:
    if args.augment_treated <= 1:
        return None
    treated = augment_with_noise(data.group(1), args.augment_treated, args.augment_sigma, seed=args.seed)
    return ObservationalDataset.concat([data.group(0), treated])


def cmd_generate_benchmark(args, cfg: RunConfig) -> int:
    out = cfg.out
    if args.kind == "linear":
        params = {k: v for k, v in (("alpha", args.alpha), ("beta", args.beta), ("gamma", args.gamma)) if v is not None}
        spec = LinearBenchmarkSpec(
            mu0=args.mu0, mu1=args.mu1, sigma_x0=args.sigma_x0, sigma_x1=args.sigma_x1, sigma_eps=args.sigma_eps,
            n0=50_000 if args.n0 is None else args.n0, n1=50_000 if args.n1 is None else args.n1,
            seed=args.seed, **params,
        )
        spec.validate()
        data = generate_linear(spec)
        truth = {"att": spec.true_att(), "att_std_err": 0.0, "method": "exact"}
    else:
        params = {k: v for k, v in (("alpha", args.alpha), ("beta", args.beta), ("gamma", args.gamma)) if v is not None}
        spec = NonlinearBenchmarkSpec.draw(
            args.draw_seed, sigma=args.sigma, sigma_eps=args.sigma_eps,
            n0=100_000 if args.n0 is None else args.n0, n1=100_000 if args.n1 is None else args.n1,
            seed=args.seed, **params,
        )
        spec.validate()
        if args.mc_draws < 1_000_000:
            raise ConfigError("--mc-draws must be at least 1000000")
        data = generate_nonlinear(spec)
        att, se = monte_carlo_ground_truth(spec, args.mc_draws)
        truth = {"att": att, "att_std_err": se, "method": f"monte-carlo ({args.mc_draws} draws)",
                 "draw_seed": args.draw_seed}
    if args.subsample_treated is not None:
        if not 1 <= args.subsample_treated <= data.n_treated:
            raise ConfigError(f"--subsample-treated must lie in [1, {data.n_treated}]")
        rng = np.random.default_rng(args.seed + 17)
        keep = rng.choice(np.flatnonzero(data.treatment == 1), args.subsample_treated, replace=False)
        data = data.subset(np.sort(np.concatenate([np.flatnonzero(data.treatment == 0), keep])))
    out.mkdir(parents=True, exist_ok=True)
    save_csv(data, out / "data.csv")
    write_spec_file(spec, out / "spec.txt", {"true_att": truth["att"], "true_att_std_err": truth["att_std_err"]})
    (out / "truth.txt").write_text("".join(f"{k} = {v}\n" for k, v in truth.items()), encoding="utf-8")
    print(f"wrote {len(data)} rows to {out / 'data.csv'}; true ATT = {truth['att']:.6f}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    data = _load(args)
    fit = _training_data(args, data) or data
    model, tlog = train(fit, cfg.train)
    save_model(model, cfg.out)
    if args.losses:
        tlog.write_csv(args.losses)
    print(f"trained {tlog.steps} generator steps (restart {tlog.chosen_restart}); model written to {cfg.out}")
    return EXIT_OK


def cmd_synthesize(args, cfg: RunConfig) -> int:
    model = load_model(args.model)
    groups = (0, 1) if args.group == "both" else (int(args.group),)
    parts = [synthesize(model, g, args.n, seed=args.seed + g) for g in groups]
    save_csv(ObservationalDataset.concat(parts), cfg.out)
    print(f"wrote {sum(len(p) for p in parts)} synthetic rows to {cfg.out}")
    return EXIT_OK


def _pipeline(args, cfg, data):
    return run_pipeline(
        data, cfg.train, cfg.synth_n, cfg.grid, out_dir=None, mode=args.mode,
        training_data=_training_data(args, data),
    )


def _echo(args, cfg) -> dict:
    return {"command": cfg.command, "data": str(args.data), "seed": cfg.seed,
            "augment_treated": args.augment_treated, "augment_sigma": args.augment_sigma}


def cmd_estimate(args, cfg: RunConfig) -> int:
    from .att import write_artifacts

    data = _load(args)
    result = _pipeline(args, cfg, data)
    result.report["run"] = _echo(args, cfg)
    write_artifacts(result, cfg.out)
    e = result.estimate
    print(f"ATT = {e.att:.6f} (std err {e.std_err:.6f}); treated used {e.n_used}, dropped {e.n_dropped}")
    for w in result.report["warnings"]:
        print(f"warning: {w}")
    return EXIT_OK


COMPARE_FIELDS = ("estimator", "att", "std_err", "treated_used", "controls_used", "error")


def _row(est=None, name=None, error=None):
    if est is None:
        return {"estimator": name, "att": "", "std_err": "", "treated_used": "", "controls_used": "", "error": error}
    return {
        "estimator": est.estimator,
        "att": repr(float(est.att)),
        "std_err": repr(float(est.std_err)),
        "treated_used": est.n_used,
        "controls_used": "" if est.n_control_used is None else est.n_control_used,
        "error": "",
    }


def format_table(rows) -> str:
    head = ("estimator", "att", "std_err", "treated used", "controls used")
    lines = [f"{head[0]:<12}{head[1]:>12}{head[2]:>12}{head[3]:>14}{head[4]:>15}"]
    for r in rows:
        if r["error"]:
            lines.append(f"{r['estimator']:<12}  failed: {r['error']}")
            continue
        att = float(r["att"])
        se = float(r["std_err"])
        ctrl = r["controls_used"] if r["controls_used"] != "" else "-"
        lines.append(f"{r['estimator']:<12}{att:>12.4f}{se:>12.4f}{r['treated_used']:>14}{ctrl:>15}")
    return "\n".join(lines)


def cmd_compare(args, cfg: RunConfig) -> int:
    from .att import write_artifacts

    data = _load(args)
    rows = []
    report = {"run": _echo(args, cfg)}
    try:
        result = _pipeline(args, cfg, data)
        result.report["run"] = report["run"]
        write_artifacts(result, cfg.out)
        rows.append(_row(result.estimate))
        report["gan_att"] = result.report["estimate"]
    except (PipelineError, EstimationError) as exc:
        log.error("GAN-ATT failed: %s", exc)
        rows.append(_row(name="gan-att", error=str(exc)))

    scores = None
    try:
        scores = baselines.fit_propensity(data).predict(data.covariates)
    except baselines.FitError as exc:
        log.error("propensity fit failed: %s", exc)
        psm_error = str(exc)
    cfg.out.mkdir(parents=True, exist_ok=True)
    for name, run in (
        ("psm-nn", lambda: baselines.match_nn(scores, data, args.k, args.caliper)),
        ("psm-kernel", lambda: baselines.match_kernel(scores, data, args.bandwidth)),
        ("cem", lambda: baselines.match_cem(data, args.cem_bins)),
    ):
        if name != "cem" and scores is None:
            rows.append(_row(name=name, error=psm_error))
            continue
        try:
            match = run()
            rows.append(_row(baselines.att_from_matches(match, data)))
            match.write_csv(cfg.out / f"matches_{name}.csv")
        except (baselines.MatchError, ValueError) as exc:
            log.error("%s failed: %s", name, exc)
            rows.append(_row(name=name, error=str(exc)))

    with (cfg.out / "comparison.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    table = format_table(rows)
    (cfg.out / "comparison.txt").write_text(table + "\n", encoding="utf-8")
    report["comparison"] = rows
    dump_report(report, cfg.out / "comparison_report.json")
    print(table)
    return EXIT_OK if not rows[0]["error"] else EXIT_ESTIMATE


def cmd_report(args, cfg: RunConfig) -> int:
    run_dir = Path(args.run_dir)
    lines = []
    rep_path = run_dir / "run_report.json"
    if rep_path.exists():
        rep = json.loads(rep_path.read_text(encoding="utf-8"))
        e = rep["estimate"]
        lines += [
            f"run directory: {run_dir}",
            f"ATT: {e['att']:.6f}  std err: {e['std_err']:.6f}  95% CI: [{e['ci95'][0]:.6f}, {e['ci95'][1]:.6f}]",
            f"treated used: {e['n_used']}  dropped: {e['n_dropped']}  (evaluation set {rep['n_evaluation']})",
            f"grid: bins {rep['grid']['bins']}, supported cubes {rep['grid']['supported_cubes']}"
            f" of {rep['grid']['nonempty_cubes']}",
        ]
        for grp in ("control", "treated"):
            f = rep["fidelity"][grp]
            lines.append(f"fidelity ({grp}): inverted KS {f['mean_inverted_ks']:.4f}, KL {f['mean_kl']:.4f}")
        lines += [f"warning: {w}" for w in rep.get("warnings", [])]
    cmp_path = run_dir / "comparison.csv"
    if cmp_path.exists():
        with cmp_path.open(newline="", encoding="utf-8") as fh:
            lines += ["", format_table(list(csv.DictReader(fh)))]
    if not lines:
        raise FileNotFoundError(f"input not found: no run_report.json or comparison.csv in {run_dir}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "generate-benchmark": cmd_generate_benchmark,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "estimate": cmd_estimate,
    "compare": cmd_compare,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(parser, _subparser(parser, args.command), argv)
    except UsageError as exc:
        print(f"ganatt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"ganatt: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    cfg = run_config(args)
    try:
        cfg.validate()
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"ganatt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataError, ModelLoadError, ShapeError) as exc:
        print(f"ganatt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PipelineError as exc:
        code = {"data": EXIT_DATA, "train": EXIT_TRAIN}.get(exc.stage, EXIT_ESTIMATE)
        print(f"ganatt: {exc}", file=sys.stderr)
        return code
    except TrainingError as exc:
        print(f"ganatt: stage 'train' failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (EstimationError, baselines.MatchError, baselines.FitError) as exc:
        print(f"ganatt: stage 'estimate' failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATE


if __name__ == "__main__":
    sys.exit(main())
