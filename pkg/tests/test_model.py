
import numpy as np
import pytest

from conftest import tiny_dataset
from mstm.basis import BasisCache
from mstm.graph import MultivariateSupport, lattice_graph, load_edge_list
from mstm.model import (
    CovariateSpec,
    CovariateTable,
    McmcConfig,
    ModelConfig,
    ModelError,
    ObservationTable,
    assemble,
    bind,
    build_structure,
    contrast,
    fit,
    predict,
)
from mstm.study import GenerativeConfig, simulate


def test_single_variable_single_time_is_spatial_only():
    g = lattice_graph(4, 4)
    sup = MultivariateSupport.full(1, 1, g.ids)
    model = assemble(sup, g, None, config=ModelConfig(r=5))
    assert model.structure.M == [None]
    assert len(model.structure.K_star) == 1 and model.structure.K_star[0].shape == (5, 5)
    assert model.structure.W_star == [None]


def test_time_invariant_support_reuses_cache():
    g = lattice_graph(3, 3)
    T = 6
    sup = MultivariateSupport.full(2, T, g.ids)
    st = build_structure(sup, g, ModelConfig(r=4), cache=BasisCache())
    assert st.cache_stats["basis"] == (T - 1, 1)
    assert st.cache_stats["propagator"] == (T - 2, 1)
    assert st.cache_stats["prior"] == (T - 1, 1)


def test_study_dimensions():
    g = lattice_graph(10, 10)
    sup = MultivariateSupport.full(2, 20, g.ids)
    st = build_structure(sup, g, ModelConfig(r=30, covariates=CovariateSpec(terms=("variable",))))
    assert all(sup.N(t) == 200 for t in range(20))
    assert all(b.S.shape == (200, 30) for b in st.bases)
    assert st.r == 30


def test_r_capped_with_warning():
    g = load_edge_list("a b\nb c")
    sup = MultivariateSupport.full(1, 2, g.ids)
    with pytest.warns(RuntimeWarning, match="capping"):
        st = build_structure(sup, g, ModelConfig(r=10))
    assert st.r == 2


def test_r_infeasible():
    g = load_edge_list("a")
    sup = MultivariateSupport.full(1, 1, g.ids)
    with pytest.raises(ModelError, match="infeasible"):
        build_structure(sup, g, ModelConfig(r=1))


def test_observation_not_in_support():
    g = lattice_graph(2, 2)
    sup = MultivariateSupport.full(1, 1, g.ids)
    obs = ObservationTable(["1"], ["1"], ["nowhere"], [1.0], [1.0])
    with pytest.raises(ModelError, match="not a prediction cell"):
        assemble(sup, g, obs, config=ModelConfig(r=1))


def test_observation_count_mismatch():
    g = lattice_graph(2, 2)
    sup = MultivariateSupport.full(1, 1, g.ids)
    obs = ObservationTable(["1"], ["1"], ["r0c0"], [1.0], [1.0])
    with pytest.raises(ModelError, match="observed cells"):
        assemble(sup, g, obs, config=ModelConfig(r=1))


def test_rank_deficient_design_warns():
    g = lattice_graph(3, 3)
    sup = MultivariateSupport.full(1, 1, g.ids)
    spec = CovariateSpec(columns=("a", "b"))
    table = CovariateTable(("a", "b"), {("1", "1", u): np.array([1.0, 2.0]) for u in g.ids})
    with pytest.warns(RuntimeWarning, match="rank deficient"):
        build_structure(sup, g, ModelConfig(r=2, covariates=spec), table)


def test_covariate_spec_interactions():
    g = lattice_graph(1, 2)
    sup = MultivariateSupport.full(4, 1, g.ids)
    factors = {"1": {"sex": "m", "edu": "lo"}, "2": {"sex": "m", "edu": "hi"},
               "3": {"sex": "f", "edu": "lo"}, "4": {"sex": "f", "edu": "hi"}}
    spec = CovariateSpec(terms=("sex", "edu", "sex:edu"), factors=factors)
    assert spec.column_names(sup) == ["intercept", "sex=m", "edu=lo", "sex=m:edu=lo"]
    X = spec.design(sup, 0)
    by_var = {sup.variables[v]: X[k] for k, (v, _) in enumerate(sup.prediction_cells[0])}
    np.testing.assert_array_equal(by_var["1"], [1, 1, 1, 1])
    np.testing.assert_array_equal(by_var["2"], [1, 1, 0, 0])
    np.testing.assert_array_equal(by_var["3"], [1, 0, 1, 0])
    np.testing.assert_array_equal(by_var["4"], [1, 0, 0, 0])


def test_observation_table_roundtrip_and_validation():
    obs = ObservationTable(["1", "2"], ["1", "1"], ["a", "a"], [0.1, 1 / 3], [0.5, np.nan])
    back = ObservationTable.parse_csv(obs.to_csv())
    assert back.keys() == obs.keys()
    np.testing.assert_array_equal(back.value, obs.value)
    assert back.variance[0] == 0.5 and np.isnan(back.variance[1])
    with pytest.raises(ModelError, match="duplicate"):
        ObservationTable(["1", "1"], ["1", "1"], ["a", "a"], [0, 0], [1, 1])
    with pytest.raises(ModelError, match="positive"):
        ObservationTable(["1"], ["1"], ["a"], [0], [0.0])


def test_fit_stores_retained_draws_and_metadata():
    model, _, _ = tiny_dataset()
    draws = fit(model, McmcConfig(iterations=60, burn_in=10, chains=2, seed=5))
    assert [d.retained for d in draws] == [50, 50]
    assert draws[0].eta.shape == (50, model.T, model.structure.r)
    assert draws[1].metadata["chain"] == 1
    assert draws[0].metadata["deviations"]["t1_filter_update"] is True


def test_fit_is_deterministic():
    model, _, _ = tiny_dataset()
    a = fit(model, McmcConfig(iterations=40, burn_in=5, chains=1, seed=3))[0]
    b = fit(model, McmcConfig(iterations=40, burn_in=5, chains=1, seed=3))[0]
    np.testing.assert_array_equal(a.eta, b.eta)
    np.testing.assert_array_equal(a.sigma_xi2, b.sigma_xi2)


def test_empty_data_gives_prior_draws():
    g = lattice_graph(3, 3)
    sup = MultivariateSupport.full(1, 2, g.ids)
    model = assemble(sup, g, None, config=ModelConfig(r=3))
    d = fit(model, McmcConfig(iterations=4000, burn_in=0, chains=1, seed=1))[0]
    # IG(2, 1) has mean 1 and infinite variance; the median is about 0.596
    assert abs(np.median(d.sigma_xi2[:, 0]) - 0.596) < 0.05


def test_predict_decomposition_and_variances():
    model, _, _ = tiny_dataset(fraction=0.6, nrow=4, ncol=4)
    draws = fit(model, McmcConfig(iterations=400, burn_in=50, chains=2, seed=2))
    pred = predict(draws, model)
    for t in range(model.T):
        total = pred.mu_mean[t] + pred.basis_mean[t] + pred.xi_mean[t]
        assert np.max(np.abs(total - pred.post_mean[t])) <= 1e-10
        assert np.all(pred.post_var[t] >= 0)
        assert len(pred.post_mean[t]) == model.support.N(t)
    obs = np.concatenate(model.support.observed)
    var = np.concatenate(pred.post_var)
    assert np.median(var[~obs]) >= np.median(var[obs])


def test_prediction_csv_columns():
    model, _, _ = tiny_dataset()
    pred = predict(fit(model, McmcConfig(iterations=30, burn_in=5, chains=1)), model)
    lines = pred.to_csv().strip().splitlines()
    assert lines[0] == "variable,time,unit,post_mean,root_mspe,mu_mean"
    assert len(lines) - 1 == sum(model.support.N(t) for t in range(model.T))


def test_tiny_instance_tracks_data():
    # N=6 cells (3 units, 2 variables), T=3, r=2
    model, truth, _ = tiny_dataset(seed=4, nrow=1, ncol=3, L=2, T=3, r=2, sigma_xi2=0.05, v=0.1)
    draws = fit(model, McmcConfig(iterations=3000, burn_in=500, chains=1, seed=4))
    pred = predict(draws, model)
    z = {k: val for k, val in zip(truth.keys(), truth.value)}
    sup = model.support
    inside = []
    for t in range(model.T):
        for k, (v, u) in enumerate(sup.prediction_cells[t]):
            key = (sup.variables[v], sup.times[t], sup.unit_ids[u])
            inside.append(abs(pred.post_mean[t][k] - z[key]) <= 2 * np.sqrt(pred.post_var[t][k]))
    assert np.mean(inside) >= 0.95


def test_contrast_examples():
    model, _, _ = tiny_dataset()
    draws = fit(model, McmcConfig(iterations=100, burn_in=10, chains=1))
    s = contrast(draws, model, {("1", "1", "r0c0"): 1.0})
    mu = draws[0].beta @ model.structure.X[0][0]
    assert s.mean == pytest.approx(mu.mean())
    zero = contrast(draws, model, {("1", "1", "r0c0"): 1.0, ("1", "2", "r0c0"): -1.0})
    assert abs(zero.mean) < 1e-12 and zero.variance < 1e-20
    with pytest.raises(ModelError):
        contrast(draws, model, {})
    with pytest.raises(ModelError):
        contrast(draws, model, {("9", "1", "r0c0"): 1.0})


def test_contrast_invariant_to_basis_shift():
    model, truth, _ = tiny_dataset(seed=7, nrow=4, ncol=4, T=2)
    st = model.structure
    shift = np.concatenate([st.bases[t].S @ np.full(st.r, 3.0) for t in range(model.T)])
    # observations are listed in support order, matching the stacked basis rows
    shifted = bind(st, model.support, truth.replace(value=truth.value + shift))
    w = {("2", "1", "r0c0"): 1.0, ("1", "1", "r0c0"): -1.0}
    mc = McmcConfig(iterations=3000, burn_in=300, chains=1, seed=8)
    a = contrast(fit(model, mc), model, w)
    b = contrast(fit(shifted, mc), shifted, w)
    assert abs(a.mean - b.mean) < 4 * np.sqrt(a.variance / 300 + b.variance / 300)


def test_contrast_gap_coverage():
    """Known mean gap of 0.5 between two variables is covered in at least 90 of 100 fits."""
    g = lattice_graph(3, 3)
    sup = MultivariateSupport.full(2, 2, g.ids)
    st = build_structure(sup, g, ModelConfig(r=3, covariates=CovariateSpec(terms=("variable",))))
    gen = GenerativeConfig(beta=(1.0, 0.5), field_variance=0.2, sigma_xi2=0.05, measurement_variance=0.2)
    w = {("2", "1", "r0c0"): 1.0, ("1", "1", "r0c0"): -1.0}
    covered = 0
    for rep in range(100):
        truth, _ = simulate(st, gen, np.random.default_rng(1000 + rep))
        model = bind(st, sup, truth)
        s = contrast(fit(model, McmcConfig(iterations=400, burn_in=100, chains=1, seed=rep)), model, w)
        covered += s.lower <= 0.5 <= s.upper
    assert covered >= 90
