"""GAN-based estimation of the average treatment effect on the treated."""

from .att import AttEstimate, GridConfig, estimate_att, run_pipeline
from .cate import CateFunction, CubeGrid, build_grid, export_cate_surface
from .datasets import (
    LinearBenchmarkSpec,
    NonlinearBenchmarkSpec,
    ObservationalDataset,
    augment_with_noise,
    generate_linear,
    generate_nonlinear,
    load_csv,
    monte_carlo_ground_truth,
)
from .gan import GanModel, TrainConfig, load_model, save_model, synthesize, train
from .metrics import continuous_kl, inverted_ks

__version__ = "0.1.0"
