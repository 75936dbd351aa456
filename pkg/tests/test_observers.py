from lskkf.errors import ConfigError, ShapeError
from lskkf.linop import IdentityOperator, SparseOperator, combine, from_matrix, to_dense
from lskkf.model import NoiseConfig, assemble_system, input_matrix, linear_system, phantom_config, simulate_truth
from lskkf.observers import (
    EnkfState,
    LuenbergerState,
    current_estimate,
    design_luenberger_gain,
    enkf_step,
    init_enkf,
    init_lskkf,
    init_luenberger,
    init_romkf,
    kernel_factor,
    lskkf_step,
    luenberger_step,
    romkf_step,
    step,
)
from lskkf.oracle import kf_step_dense, riccati_steady_state

import numpy as np
import pytest

U = np.array([1.0, -0.5])


# LSK-KF =======================================================================
def test_lskkf_with_zero_factor_is_pure_prediction(random_system):
    model, mats = random_system(10, 4, seed=1)
    x0 = np.arange(10.0)
    st = init_lskkf(model, combine("scale", [IdentityOperator(10)], 0.0), x0=x0)
    st = lskkf_step(st, model, U, np.full(4, 100.0))
    np.testing.assert_allclose(st.x_hat, mats["A"] @ x0 + mats["B"] @ U)


def test_lskkf_zero_innovation_keeps_prediction(random_system):
    model, mats = random_system(10, 4, seed=2)
    x0 = np.linspace(-1.0, 1.0, 10)
    x_bar = model.A.apply(x0) + model.B @ U
    st = init_lskkf(model, IdentityOperator(10), x0=x0)
    st = lskkf_step(st, model, U, model.C.apply(x_bar))
    np.testing.assert_allclose(st.x_hat, x_bar, atol=1e-14)
    assert st.last_report.iterations == 0


def test_lskkf_matches_steady_state_kalman_update(random_system):
    model, mats = random_system(30, 12, seed=3)
    P_inf = riccati_steady_state(mats["A"], mats["C"], mats["Q"], mats["r"]).P_inf
    L = np.linalg.cholesky(P_inf)
    st = init_lskkf(model, from_matrix(L), x0=np.zeros(30), cg_tol=1e-12, cg_max_iter=300)
    x_hat = np.zeros(30)
    rng = np.random.default_rng(4)
    C, R = mats["C"], mats["R"]
    gain = P_inf @ C.T @ np.linalg.inv(C @ P_inf @ C.T + R)
    for _ in range(5):
        y = rng.standard_normal(12)
        st = lskkf_step(st, model, U, y)
        x_bar = mats["A"] @ x_hat + mats["B"] @ U
        x_hat = x_bar + gain @ (y - C @ x_bar)
        assert np.linalg.norm(st.x_hat - x_hat) <= 1e-6 * np.linalg.norm(x_hat)
        assert st.last_report.converged


def test_lskkf_matches_steady_state_kalman_on_two_material_rod():
    model = assemble_system(phantom_config((100,)), noise=NoiseConfig())
    assert len(set(model.material.labels.tolist())) == 2
    A, C, LQ = to_dense(model.A), to_dense(model.C), to_dense(model.L_Q)
    sol = riccati_steady_state(A, C, LQ @ LQ.T, model.r_diag)
    w, V = np.linalg.eigh(sol.P_inf)
    L = V * np.sqrt(np.clip(w, 0.0, None))
    steps = 20
    traj = simulate_truth(model, input_matrix(steps), steps, seed=21)
    st = init_lskkf(model, from_matrix(L), cg_tol=1e-10, cg_max_iter=1000)
    x_hat = np.zeros(model.n_x)
    for k in range(steps):
        st = lskkf_step(st, model, traj.inputs[k], traj.outputs[k])
        x_bar = A @ x_hat + model.B @ traj.inputs[k]
        x_hat = x_bar + sol.K_inf @ (traj.outputs[k] - C @ x_bar)
        assert np.linalg.norm(st.x_hat - x_hat) <= 1e-6 * np.linalg.norm(x_hat), f"step {k}"


def test_lskkf_warm_start_reuses_previous_solution(small_model):
    L = kernel_factor(small_model, "masked_gaussian", 0.5, 0.0075)
    cold = init_lskkf(small_model, L, cg_tol=1e-10)
    warm = init_lskkf(small_model, L, cg_tol=1e-10, warm_start=True)
    y = np.ones(small_model.n_y)
    for _ in range(3):
        cold = lskkf_step(cold, small_model, U, y)
        warm = lskkf_step(warm, small_model, U, y)
    np.testing.assert_allclose(warm.x_hat, cold.x_hat, rtol=1e-7, atol=1e-8)


def test_lskkf_rejects_mismatched_factor_and_measurement(small_model):
    with pytest.raises(ShapeError):
        init_lskkf(small_model, IdentityOperator(small_model.n_x + 1))
    st = init_lskkf(small_model, IdentityOperator(small_model.n_x))
    with pytest.raises(ShapeError):
        lskkf_step(st, small_model, U, np.zeros(small_model.n_y + 1))


def test_kernel_factor_kinds(small_model):
    ident = kernel_factor(small_model, "identity", 2.0)
    np.testing.assert_allclose(ident.apply(np.ones(small_model.n_x)), 2.0)
    masked = kernel_factor(small_model, "masked_gaussian", 1.0, 0.005)
    assert masked.kind == "masked_kernel"
    with pytest.raises(ConfigError):
        kernel_factor(small_model, "masked_gaussian", 1.0, None)
    with pytest.raises(ConfigError):
        kernel_factor(small_model, "matern", 1.0, 0.005)


# EnKF =========================================================================
def test_enkf_without_spread_skips_update(random_system):
    _, mats = random_system(6, 3, seed=5)
    model = linear_system(mats["A"], mats["B"], mats["C"], np.zeros((6, 6)), mats["r"])
    x0 = np.ones(6)
    st = init_enkf(model, 4, seed=1, x0=x0)
    st = enkf_step(st, model, U, np.full(3, 50.0))
    assert st.collapsed
    expected = mats["A"] @ x0 + mats["B"] @ U
    for j in range(4):
        np.testing.assert_allclose(st.ensemble[:, j], expected)


def test_enkf_large_ensemble_tracks_kalman_update(random_system):
    model, mats = random_system(20, 10, seed=6)
    y = np.linspace(-1.0, 1.0, 10)
    x_kf, _ = kf_step_dense(np.zeros(20), mats["Q"], mats["A"], mats["B"], mats["C"], mats["Q"], mats["R"], U, y)
    estimates = []
    for seed in range(20):
        st = enkf_step(init_enkf(model, 500, seed=seed), model, U, y)
        estimates.append(current_estimate(st))
    estimates = np.array(estimates)
    mean = estimates.mean(axis=0)
    sem = estimates.std(axis=0, ddof=1) / np.sqrt(len(estimates))
    assert np.all(np.abs(mean - x_kf) <= 3.0 * sem.max() + 0.01), "ensemble mean drifted from the Kalman update"


def test_enkf_error_shrinks_with_ensemble_size(random_system):
    model, mats = random_system(20, 10, seed=6)
    y = np.linspace(-1.0, 1.0, 10)
    x_kf, _ = kf_step_dense(np.zeros(20), mats["Q"], mats["A"], mats["B"], mats["C"], mats["Q"], mats["R"], U, y)
    medians = []
    for members in (10, 50, 250):
        errors = [
            np.linalg.norm(current_estimate(enkf_step(init_enkf(model, members, seed=seed), model, U, y)) - x_kf)
            for seed in range(50)
        ]
        medians.append(float(np.median(errors)))
    assert medians[0] > medians[1] > medians[2], f"median errors {medians}"


def test_enkf_result_independent_of_thread_count(random_system):
    model, _ = random_system(12, 5, seed=7)
    y = np.ones(5)
    single = init_enkf(model, 16, seed=3, threads=1)
    multi = init_enkf(model, 16, seed=3, threads=4)
    for _ in range(3):
        single = enkf_step(single, model, U, y)
        multi = enkf_step(multi, model, U, y)
    np.testing.assert_allclose(multi.ensemble, single.ensemble, rtol=1e-13, atol=1e-13)


def test_enkf_literal_mode_runs(random_system):
    model, _ = random_system(8, 4, seed=8)
    st = init_enkf(model, 10, seed=2, mode="literal")
    st = enkf_step(st, model, U, np.ones(4))
    assert st.ensemble.shape == (8, 10)
    assert np.all(np.isfinite(current_estimate(st)))


def test_enkf_validation(random_system):
    model, _ = random_system(4, 2, seed=9)
    with pytest.raises(ConfigError):
        init_enkf(model, 1, seed=0)
    with pytest.raises(ConfigError):
        init_enkf(model, 5, seed=0, mode="square-root")


# ROM-KF =======================================================================
def test_romkf_with_identity_basis_equals_dense_kf(random_system):
    model, mats = random_system(15, 6, seed=10)
    st = init_romkf(model, np.eye(15), p0_scale=1.0)
    x_hat, P = np.zeros(15), mats["Q"].copy()
    rng = np.random.default_rng(11)
    for _ in range(4):
        y = rng.standard_normal(6)
        st = romkf_step(st, U, y)
        x_hat, P = kf_step_dense(x_hat, P, mats["A"], mats["B"], mats["C"], mats["Q"], mats["R"], U, y)
        assert np.linalg.norm(current_estimate(st) - x_hat) <= 1e-10 * max(1.0, np.linalg.norm(x_hat))
        np.testing.assert_allclose(st.P, P, rtol=1e-9, atol=1e-12)


def test_romkf_zero_innovation_keeps_prediction(random_system):
    model, mats = random_system(10, 4, seed=12)
    V = np.linalg.qr(np.random.default_rng(13).standard_normal((10, 3)))[0]
    st = init_romkf(model, V)
    z_bar = st.rom.A_r @ st.z_hat + st.rom.B_r @ U
    st = romkf_step(st, U, st.rom.C_r @ z_bar)
    np.testing.assert_allclose(st.z_hat, z_bar, atol=1e-13)


def test_romkf_without_noise_regularizes_and_ignores_huge_r(random_system):
    _, mats = random_system(8, 3, seed=14)
    model = linear_system(mats["A"], mats["B"], mats["C"], np.zeros((8, 8)), np.full(3, 1e30))
    st = init_romkf(model, np.eye(8))
    st = romkf_step(st, U, np.full(3, 5.0))
    assert st.regularized
    np.testing.assert_allclose(st.z_hat, st.rom.B_r @ U, atol=1e-12)


def test_romkf_zero_state_gives_zero_field(small_model):
    V = np.linalg.qr(np.random.default_rng(15).standard_normal((small_model.n_x, 4)))[0]
    st = init_romkf(small_model, V)
    assert np.all(current_estimate(st) == 0.0)


# Luenberger ===================================================================
def test_luenberger_zero_gain_is_pure_prediction(random_system):
    model, mats = random_system(6, 3, seed=16)
    st = init_luenberger(model, gain=np.zeros(3), x0=np.ones(6))
    st = luenberger_step(st, model, U, np.full(3, 9.0))
    np.testing.assert_allclose(st.x_hat, mats["A"] @ np.ones(6) + mats["B"] @ U)


def test_luenberger_full_trust_copies_measurement():
    n = 5
    model = linear_system(0.5 * np.eye(n), np.zeros((n, 2)), np.eye(n), np.eye(n), np.ones(n))
    st = init_luenberger(model, gain=np.ones(n))
    y = np.arange(1.0, 6.0)
    np.testing.assert_allclose(luenberger_step(st, model, U, y).x_hat, y)


def test_luenberger_update_leaves_unmeasured_states_at_prediction(random_system):
    model, mats = random_system(8, 3, seed=19)
    measured = np.flatnonzero(mats["C"].any(axis=0))
    unmeasured = np.setdiff1d(np.arange(8), measured)
    x0 = np.linspace(0.0, 3.5, 8)
    st = init_luenberger(model, gain=np.full(3, 0.5), x0=x0)
    st = luenberger_step(st, model, U, np.full(3, 40.0))
    x_bar = model.A.apply(x0) + model.B @ U
    np.testing.assert_array_equal(st.x_hat[unmeasured], x_bar[unmeasured])
    assert np.all(st.x_hat[measured] != x_bar[measured])


def test_luenberger_gain_design():
    zero = design_luenberger_gain(np.ones(4), SparseOperator(np.zeros((6, 6))), n_samples=50)
    assert np.all(zero == 0.0)
    gain = design_luenberger_gain(np.ones(1), IdentityOperator(200), n_samples=500, seed=3)
    d = gain[0] / (1.0 - gain[0])
    assert d == pytest.approx(1.0, rel=0.1), "mean squared entry of white noise is one"
    half = design_luenberger_gain(np.array([d]), IdentityOperator(200), n_samples=500, seed=3)
    assert half[0] == pytest.approx(0.5, rel=1e-12)
    with pytest.raises(ConfigError):
        design_luenberger_gain(np.ones(1), IdentityOperator(3), n_samples=1)


def test_luenberger_default_gain_shape(small_model):
    st = init_luenberger(small_model, n_samples=20)
    assert st.gain.shape == (small_model.n_y,)
    assert np.all((st.gain > 0.0) & (st.gain < 1.0))


# common interface =============================================================
def test_current_estimate_of_ensembles():
    rng = np.random.default_rng(0)
    same = EnkfState(ensemble=np.array([[2.0, 2.0], [3.0, 3.0]]), rng=rng)
    np.testing.assert_allclose(current_estimate(same), [2.0, 3.0])
    opposite = EnkfState(ensemble=np.array([[1.0, -1.0], [0.0, 0.0]]), rng=rng)
    np.testing.assert_allclose(current_estimate(opposite), [0.0, 0.0])
    with pytest.raises(TypeError):
        current_estimate(np.zeros(3))


def test_step_dispatches_on_state_type(random_system):
    model, _ = random_system(6, 3, seed=17)
    st = step(LuenbergerState(x_hat=np.zeros(6), gain=np.full(3, 0.5)), model, U, np.ones(3))
    assert isinstance(st, LuenbergerState)
    with pytest.raises(TypeError):
        step("not a state", model, U, np.ones(3))


def test_all_observers_agree_in_shape(small_model):
    y = np.zeros(small_model.n_y)
    V = np.linalg.qr(np.random.default_rng(18).standard_normal((small_model.n_x, 3)))[0]
    states = [
        init_lskkf(small_model, kernel_factor(small_model, "masked_gaussian", 0.3, 0.0075)),
        init_enkf(small_model, 5, seed=0),
        init_romkf(small_model, V),
        init_luenberger(small_model, n_samples=10),
    ]
    for st in states:
        st = step(st, small_model, U, y)
        assert current_estimate(st).shape == (small_model.n_x,)
