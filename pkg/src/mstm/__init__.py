"""Multivariate spatio-temporal mixed effects model with Moran's I bases."""
from .basis import BasisCache, BasisRankError, MiBasis, basis_rows_for, mi_basis, mi_operator
from .graph import (
    AdjacencyGraph,
    EdgeListError,
    MultivariateSupport,
    block_adjacency,
    car_target_precision,
    lattice_graph,
    load_edge_list,
)
from .linalg import SymmetricEigen, column_space_projector, nearest_psd, sym_eig_sorted
from .model import (
    CovariateSpec,
    CovariateTable,
    McmcConfig,
    Model,
    ModelConfig,
    ModelError,
    ObservationTable,
    PredictionSet,
    assemble,
    bind,
    build_structure,
    contrast,
    fit,
    predict,
)
from .prior import k_star, k_star_covariance_form, w_star
from .propagator import PropagatorDegeneracyError, build_B, mi_propagator
from .sampler import Hyperparameters, PosteriorDraws, gibbs_run

__version__ = "0.1.0"
