from lskkf.errors import ConfigError, MaskError, ShapeError
from lskkf.fields import Grid, read_sf1
from lskkf.linop import to_dense
from lskkf.model import (
    SOFT_TISSUE,
    Material,
    MaterialConfig,
    NoiseConfig,
    assemble_system,
    conductance_matrix,
    describe,
    export_trajectory,
    input_matrix,
    input_sequence,
    linear_system,
    phantom_config,
    pod_reduce,
    noise_normalization,
    pod_snapshots,
    project_rom,
    simulate_truth,
    spectral_radius,
    total_input_power,
)

import numpy as np
import pandas as pd
import pytest

QUIET = NoiseConfig(process_std=0.0, measurement_var=1e-6)


def rod(n: int, material: Material = SOFT_TISSUE, h: float = 0.0, dx: float = 0.0025) -> MaterialConfig:
    grid = Grid((n,), (dx,))
    return MaterialConfig(
        grid=grid,
        materials=(material,),
        labels=np.zeros(n, dtype=int),
        loads=np.zeros((n, 2)),
        h=h,
    )


# assemble_system ==============================================================
def test_insulated_rod_preserves_constants():
    model = assemble_system(rod(10), noise=QUIET)
    np.testing.assert_allclose(model.A.apply(np.ones(10)), np.ones(10), rtol=1e-12)


def test_non_conducting_rod_gives_identity_step():
    model = assemble_system(rod(3, Material("inert", 1000.0, 1000.0, 0.0)), noise=QUIET)
    np.testing.assert_allclose(to_dense(model.A), np.eye(3), atol=1e-14)


def test_step_matches_dense_implicit_euler():
    model = assemble_system(phantom_config((16, 16)), noise=NoiseConfig(), dt=93.0)
    M = np.diag(model.mass)
    K = model.stiffness.toarray()
    dense = np.linalg.solve(M + 93.0 * K, M)
    A = to_dense(model.A)
    assert np.linalg.norm(A - dense) <= 1e-10 * np.linalg.norm(dense)


def test_conductance_matrix_is_symmetric_psd():
    K = conductance_matrix(phantom_config((10, 8))).toarray()
    np.testing.assert_allclose(K, K.T, atol=1e-15)
    assert np.min(np.linalg.eigvalsh(K)) >= -1e-12
    K0 = conductance_matrix(phantom_config((10, 8), h=0.0)).toarray()
    np.testing.assert_allclose(K0 @ np.ones(80), 0.0, atol=1e-12)


def test_harmonic_mean_on_interface():
    soft, shell = SOFT_TISSUE, Material("shell", 1300.0, 1300.0, 0.35)
    cfg = MaterialConfig(
        grid=Grid((2,), (0.01,)), materials=(soft, shell), labels=np.array([0, 1]), loads=np.zeros((2, 2)), h=0.0
    )
    K = conductance_matrix(cfg).toarray()
    area = cfg.cell_volume / 0.01
    expected = 2.0 * area * soft.k * shell.k / ((soft.k + shell.k) * 0.01)
    assert K[0, 1] == pytest.approx(-expected)


def test_stability_and_dissipation():
    model = assemble_system(phantom_config((12, 12), h=25.0), noise=QUIET)
    assert spectral_radius(model.A) <= 1.0 + 1e-8
    uniform = assemble_system(rod(20, h=10.0), noise=QUIET)
    x = np.random.default_rng(0).standard_normal(20)
    for _ in range(10):
        x_next = uniform.A.apply(x)
        assert np.linalg.norm(x_next) <= np.linalg.norm(x) * (1 + 1e-12), "norm must not grow with h > 0"
        x = x_next


def test_energy_conserved_without_boundary_loss():
    model = assemble_system(phantom_config((12, 12), h=0.0), noise=QUIET)
    x = np.random.default_rng(1).uniform(0.5, 1.5, model.n_x)
    e0 = model.energy(x)
    for _ in range(5):
        x = model.A.apply(x)
        assert model.energy(x) == pytest.approx(e0, rel=1e-9)


def test_measurement_defaults_to_measured_material(small_model):
    labels = small_model.material.labels
    np.testing.assert_array_equal(small_model.measurement_indices, np.flatnonzero(labels == 0))
    assert small_model.n_y == small_model.C.rows
    assert small_model.n_u == 2


def test_assembly_validation():
    with pytest.raises(ConfigError, match="model.dt"):
        assemble_system(rod(4), dt=-1.0)
    with pytest.raises(MaskError):
        assemble_system(rod(4), measurement_mask=np.zeros(4, dtype=bool))
    with pytest.raises(ShapeError):
        assemble_system(rod(4), measurement_mask=np.ones(5, dtype=bool))
    with pytest.raises(ConfigError):
        assemble_system(rod(4), noise=NoiseConfig(r_overrides=((99, 1.0),)))


def test_r_overrides_apply_to_measured_cells():
    model = assemble_system(rod(5), noise=NoiseConfig(measurement_var=0.05, r_overrides=((2, 0.5),)))
    np.testing.assert_allclose(model.r_diag, [0.05, 0.05, 0.5, 0.05, 0.05])


def test_phantom_loads_integrate_to_power():
    cfg = phantom_config((20, 20), load_power=200.0)
    np.testing.assert_allclose(total_input_power(cfg), [200.0, 200.0], rtol=1e-12)
    soft = cfg.labels == 0
    assert np.all(cfg.loads[~soft] == 0.0), "heat loads stay inside the soft tissue"
    assert all(soft[f] for f in cfg.foci)


def test_describe_reports_sizes(small_model):
    info = describe(small_model)
    assert info["n_x"] == 144
    assert sum(info["cells_per_material"]) == 144


# inputs and truth =============================================================
def test_input_sequence_schedule():
    assert input_sequence(0) == (0.0, 0.0)
    assert input_sequence(2) == (1.0, 0.0)
    assert input_sequence(7) == (1.0, 0.0)
    assert input_sequence(8) == (0.0, 1.0)
    assert input_sequence(15) == (0.0, 1.0)
    assert input_sequence(16) == (0.0, 0.0)
    assert input_matrix(17).shape == (17, 2)
    with pytest.raises(ValueError):
        input_sequence(-1)


def test_truth_without_noise_or_input_stays_zero(small_model):
    traj = simulate_truth(small_model, np.zeros((5, 2)), 5, seed=1, process_noise=False, measurement_noise=False)
    assert traj.states.shape == (6, small_model.n_x)
    assert traj.outputs.shape == (5, small_model.n_y)
    assert np.all(traj.states == 0.0)


def test_truth_conserves_energy_without_losses():
    model = assemble_system(phantom_config((10, 10), h=0.0), noise=QUIET)
    x0 = np.random.default_rng(2).uniform(0.5, 1.5, model.n_x)
    traj = simulate_truth(model, np.zeros((6, 2)), 6, seed=3, x0=x0, process_noise=False, measurement_noise=False)
    energies = [model.energy(x) for x in traj.states]
    np.testing.assert_allclose(energies, energies[0], rtol=1e-9)


def test_truth_is_reproducible_bit_for_bit():
    model = assemble_system(phantom_config((8, 8)), noise=NoiseConfig(truth_process_scale=1.0))
    inputs = input_matrix(6)
    first = simulate_truth(model, inputs, 6, seed=42)
    second = simulate_truth(model, inputs, 6, seed=42)
    assert np.array_equal(first.states, second.states)
    assert np.array_equal(first.outputs, second.outputs)
    other = simulate_truth(model, inputs, 6, seed=43)
    assert not np.array_equal(first.states, other.states)


def test_process_noise_matches_covariance():
    model = assemble_system(phantom_config((8, 8)), noise=NoiseConfig())
    L = to_dense(model.L_Q)
    Q = L @ L.T
    rng = np.random.default_rng(4)
    sample = np.zeros_like(Q)
    for _ in range(8):
        W = model.L_Q.apply(rng.standard_normal((model.n_x, 5_000)))
        sample += W @ W.T / 40_000
    std = np.sqrt(np.diag(Q))
    pairs = [(i, i) for i in range(0, 64, 7)]
    pairs += [(i, i + 1) for i in range(63) if Q[i, i + 1] > 0.5 * std[i] * std[i + 1]][:11]
    assert len(pairs) >= 15
    for i, j in pairs:
        assert sample[i, j] == pytest.approx(Q[i, j], rel=0.05), f"sample covariance off at ({i}, {j})"


def test_interior_noise_std_matches_process_std():
    noise = NoiseConfig(process_std=0.2, process_sigma=0.0075)
    grid = Grid((40, 40), (0.0025, 0.0025))
    cfg = MaterialConfig(grid, (SOFT_TISSUE,), np.zeros(grid.size, dtype=int), np.zeros((grid.size, 2)))
    model = assemble_system(cfg, noise=noise)
    centre = np.zeros(grid.size)
    centre[grid.flat_index((20, 20))] = 1.0
    column = model.L_Q.apply(model.L_Q.apply_adjoint(centre))
    assert np.sqrt(column[grid.flat_index((20, 20))]) == pytest.approx(0.2, rel=1e-6)


def test_noise_normalization():
    grid = Grid((30, 30), (0.0025, 0.0025))
    assert noise_normalization(grid, 1e-4) == pytest.approx(1.0)
    wide, narrow = noise_normalization(grid, 0.01), noise_normalization(grid, 0.005)
    assert wide > narrow > 1.0, "wider kernels sum more overlapping cells"


def test_export_trajectory_writes_states_and_manifest(tmp_path, small_model):
    traj = simulate_truth(small_model, input_matrix(3), 3, seed=5)
    manifest = export_trajectory(traj, small_model.grid, tmp_path / "traj", digest="d1")
    table = pd.read_csv(manifest)
    assert list(table["file"]) == [f"state_{k:04d}.sf1" for k in range(4)]
    assert set(table["digest"]) == {"d1"}
    back = read_sf1(tmp_path / "traj" / "state_0002.sf1")
    assert np.array_equal(back.values, traj.states[2])


# POD / ROM ====================================================================
def test_pod_of_repeated_snapshot_is_rank_one():
    v = np.arange(1.0, 7.0)
    V = pod_reduce(np.column_stack([v, v, v]), 0.999)
    assert V.shape == (6, 1)
    np.testing.assert_allclose(np.abs(V[:, 0]), v / np.linalg.norm(v), atol=1e-12)


def test_pod_energy_cut():
    snapshots = np.zeros((4, 2))
    snapshots[0, 0] = 10.0
    snapshots[1, 1] = 1e-9
    assert pod_reduce(snapshots, 0.999).shape[1] == 1


def test_pod_recovers_rank_with_orthonormal_basis():
    rng = np.random.default_rng(6)
    snapshots = rng.standard_normal((40, 5)) @ rng.standard_normal((5, 12))
    V = pod_reduce(snapshots, 1.0)
    assert V.shape[1] == 5
    assert np.max(np.abs(V.T @ V - np.eye(5))) <= 1e-12


def test_pod_rejects_bad_input():
    with pytest.raises(ShapeError):
        pod_reduce(np.ones((5, 1)))
    with pytest.raises(ConfigError):
        pod_reduce(np.ones((5, 3)), 1.5)


def test_heat_model_pod_is_small():
    model = assemble_system(phantom_config((24, 24)), noise=NoiseConfig())
    V = pod_reduce(pod_snapshots(model, 20), 0.999)
    assert 1 <= V.shape[1] <= 15
    assert np.max(np.abs(V.T @ V - np.eye(V.shape[1]))) <= 1e-10


def test_project_rom_identity_and_zero_noise(random_system):
    model, mats = random_system(20, 8, seed=7)
    rom = project_rom(model, np.eye(20))
    np.testing.assert_allclose(rom.A_r, mats["A"], atol=1e-12)
    np.testing.assert_allclose(rom.Q_r, mats["Q"], atol=1e-12)
    quiet = linear_system(mats["A"], mats["B"], mats["C"], np.zeros((20, 20)), mats["r"])
    assert np.all(project_rom(quiet, np.eye(20)).Q_r == 0.0)


def test_project_rom_reduced_noise_is_psd(random_system):
    model, _ = random_system(20, 8, seed=8)
    V = np.linalg.qr(np.random.default_rng(9).standard_normal((20, 4)))[0]
    rom = project_rom(model, V)
    np.testing.assert_allclose(rom.Q_r, rom.Q_r.T)
    assert np.min(np.linalg.eigvalsh(rom.Q_r)) >= -1e-12
    assert rom.C_r.shape == (8, 4) and rom.B_r.shape == (4, 2)
