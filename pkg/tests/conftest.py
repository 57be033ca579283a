import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def tiny_dataset(seed=1, nrow=3, ncol=3, L=2, T=3, r=4, fraction=1.0, sigma_xi2=0.05, v=0.1):
    """Small simulated dataset bound to a model; returns (model, truth, latent)."""
    from mstm.model import CovariateSpec, ModelConfig, bind
    from mstm.study import GenerativeConfig, mask_observed, observed_subset, simulate
    from mstm.graph import MultivariateSupport, lattice_graph
    from mstm.model import build_structure

    g = lattice_graph(nrow, ncol)
    sup = MultivariateSupport.full(L, T, g.ids)
    cfg = ModelConfig(r=r, covariates=CovariateSpec(terms=("variable",)))
    st = build_structure(sup, g, cfg)
    gen = GenerativeConfig(beta=(1.0, 0.5), field_variance=0.5, sigma_xi2=sigma_xi2, measurement_variance=v)
    rng = np.random.default_rng(seed)
    truth, latent = simulate(st, gen, rng)
    sup_obs = mask_observed(sup, fraction, rng) if fraction < 1 else sup
    model = bind(st, sup_obs, observed_subset(truth, sup_obs))
    return model, truth, latent
