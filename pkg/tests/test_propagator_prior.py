import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mstm.basis import mi_basis
from mstm.graph import lattice_graph
from mstm.prior import k_star, k_star_covariance_form, k_star_multi, w_star
from mstm.propagator import PropagatorDegeneracyError, build_B, mi_propagator
from oracles import frobenius_objective, random_restart_min, random_spd


def test_build_B_blocks(rng):
    S = np.linalg.qr(rng.standard_normal((6, 3)))[0]
    np.testing.assert_array_equal(build_B(S, np.zeros((6, 0))), np.eye(3))
    X = rng.standard_normal((6, 2))
    B = build_B(S, X)
    np.testing.assert_allclose(B[:, :2], S.T @ X)
    np.testing.assert_array_equal(B[:, 2:], np.eye(3))


def test_mi_basis_gives_identity_propagator():
    A = lattice_graph(4, 4).adjacency_matrix()
    X = np.column_stack([np.ones(16), np.arange(16.0)])
    S = mi_basis(X, A, 6).S
    B = build_B(S, X)
    np.testing.assert_allclose(B[:, :2], 0, atol=1e-10)
    np.testing.assert_array_equal(mi_propagator(B), np.eye(6))


def test_reduced_two_by_two_swaps():
    B = np.hstack([np.array([[1.0], [0.0]]), np.eye(2)])
    np.testing.assert_allclose(mi_propagator(B), [[0, 1], [1, 0]], atol=1e-15)


def test_paper_literal_degenerate(rng):
    B = np.hstack([rng.standard_normal((3, 2)), np.eye(3)])
    with pytest.raises(PropagatorDegeneracyError, match="identically zero"):
        mi_propagator(B, "paper_literal")


def test_unknown_mode():
    with pytest.raises(ValueError):
        mi_propagator(np.eye(2), "other")


@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(1, 3))
def test_reduced_properties(seed, r, p):
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((r, min(p, r - 1)))
    M = mi_propagator(np.hstack([C, np.eye(r)]))
    assert np.linalg.norm(M.T @ M - np.eye(r)) <= 1e-8
    k = r - np.linalg.matrix_rank(C)
    assert np.max(np.abs(M[:, :k].T @ C)) <= 1e-8


def test_k_star_recovers_c0(rng):
    S = np.linalg.qr(rng.standard_normal((8, 3)))[0]
    C0 = random_spd(3, rng)
    P = S @ np.linalg.inv(C0) @ S.T
    np.testing.assert_allclose(k_star(S, P), C0, atol=1e-8)


def test_k_star_pd_core(rng):
    S = np.linalg.qr(rng.standard_normal((8, 3)))[0]
    P = random_spd(8, rng)
    np.testing.assert_allclose(k_star(S, P), np.linalg.inv(S.T @ P @ S), atol=1e-10)


def test_k_star_random_restart_oracle(rng):
    S = np.linalg.qr(rng.standard_normal((8, 3)))[0]
    A = rng.standard_normal((8, 8))
    P = A + A.T
    closed = frobenius_objective(P, S, k_star(S, P))
    assert closed <= random_restart_min(P, S, rng, restarts=50) + 1e-6


def test_k_star_floor_when_core_vanishes():
    S = np.eye(2)[:, :1]
    K, floored = k_star_multi([S], [-np.eye(2)])
    assert floored == 1
    np.testing.assert_allclose(K, [[1e8]])


def test_k_star_multi_matches_single(rng):
    S = np.linalg.qr(rng.standard_normal((6, 2)))[0]
    P = random_spd(6, rng)
    np.testing.assert_allclose(k_star_multi([S, S, S], [P, P, P])[0], k_star(S, P), atol=1e-12)


def test_covariance_form_examples(rng):
    P = rng.standard_normal((4, 4))
    P = P + P.T
    from mstm.linalg import nearest_psd
    np.testing.assert_allclose(k_star_covariance_form(np.eye(4), P), nearest_psd(P), atol=1e-12)
    np.testing.assert_allclose(k_star_covariance_form(np.eye(2)[:, :1], np.diag([1.0, -1.0])), [[1.0]])


def test_w_star_examples(rng):
    K = random_spd(3, rng)
    W, lifted = w_star(K, random_spd(3, rng), np.zeros((3, 3)))
    np.testing.assert_allclose(W, K)
    assert not lifted
    W, lifted = w_star(K, K, np.eye(3))
    np.testing.assert_allclose(W, 0, atol=1e-12)
    assert not lifted
    W, lifted = w_star(np.eye(2), 2 * np.eye(2), np.eye(2))
    np.testing.assert_allclose(W, 0)
    assert lifted


@given(st.integers(0, 2**32 - 1))
def test_lift_flag_iff_indefinite(seed):
    rng = np.random.default_rng(seed)
    K1, K2 = random_spd(3, rng), random_spd(3, rng)
    M = rng.standard_normal((3, 3)) * 0.5
    raw = K1 - M @ K2 @ M.T
    W, lifted = w_star(K1, K2, M)
    vals = np.linalg.eigvalsh(0.5 * (raw + raw.T))
    assert lifted == bool(vals[0] < -1e-10 * np.max(np.abs(vals)))
    assert np.linalg.eigvalsh(W)[0] >= -1e-10 * np.max(np.abs(vals))
