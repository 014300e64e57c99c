"""Spatio-temporal Bayesian mapping of area-level infection rates."""

from .analysis import (ClusterResult, RegionalSeries, cluster_interval,
                       elbow_select, kmeans, label_levels, region_aggregate,
                       rmse_mae, standardize_interval, week_intervals)
from .baselines import GwrFit, OlsFit, gwr_bandwidth_cv, gwr_fit, ols_fit
from .diagnostics import (ScreeningReport, SpatialWeights,
                          build_spatial_weights, ljung_box, morans_i,
                          pearson_matrix, screen_covariates, vif)
from .ingest import (AreaTable, CaseTable, CovariateTable, GridField,
                     compute_log_rates, grid_to_area_average, load_area_table,
                     load_case_table, load_covariate_table, load_grid_field,
                     log_transform_density)
from .model import (BetaSummary, FitResult, Hyper, HyperFit, PriorSpec,
                    RelativeRisk, StDataset, ar1_precision, assemble_dataset,
                    calibrate_pc_lambdas, latent_posterior,
                    log_hyper_posterior, log_marginal_likelihood,
                    optimize_hyper, relative_risks, st_precision)
from .simulate import SynthScenario, SynthTruth, draw_latent, make_synth_dataset
from .sparse import SparseCholesky
from .spde import (FemMatrices, Mesh, Projector, SpatialPrecision, build_mesh,
                   build_projector, convert_params, fem_matrices,
                   invert_params, matern_correlation, spde_precision)

__version__ = "0.1.0"
