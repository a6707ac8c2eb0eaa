"""Two-dimensional nonlinear benchmark: GAN-ATT against a Monte-Carlo truth.

The random parameters W, Sigma and mu1 are realized from ``--draw-seed``.

    python3 scripts/nonlinear_benchmark.py --n 20000 --synth-n 100000
"""

import argparse

import numpy as np

from ganatt.att import GridConfig, benchmark_sampler, run_pipeline
from ganatt.datasets import NonlinearBenchmarkSpec, generate_nonlinear, monte_carlo_ground_truth
from ganatt.gan import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--draw-seed", type=int, default=5)
    p.add_argument("--n", type=int, default=20_000, help="real rows per group")
    p.add_argument("--synth-n", type=int, default=100_000)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--mc-draws", type=int, default=10_000_000, help="at least 1e6")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    args = p.parse_args()

    spec = NonlinearBenchmarkSpec.draw(args.draw_seed, n0=args.n, n1=args.n)
    np.set_printoptions(precision=4)
    print(f"W={spec.W} Sigma={spec.Sigma.ravel()} mu1={spec.mu1}")
    truth, se = monte_carlo_ground_truth(spec, args.mc_draws)
    print(f"Monte-Carlo truth {truth:.5f} +/- {se:.1e}")
    data = generate_nonlinear(spec)
    grid = GridConfig(bins_per_dim=args.bins)
    oracle = run_pipeline(data, synth_n=args.synth_n, grid_config=grid, sampler=benchmark_sampler(spec)).estimate
    gan = run_pipeline(data, TrainConfig(epochs=args.epochs, seed=args.seed), synth_n=args.synth_n,
                       grid_config=grid, out_dir=args.out).estimate
    for name, e in (("oracle", oracle), ("gan-att", gan)):
        print(f"{name:<8} att={e.att:.4f} rel err={(e.att - truth) / truth:+.4f} "
              f"std_err={e.std_err:.4f} used={e.n_used} dropped={e.n_dropped}")


if __name__ == "__main__":
    main()
