import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soslearn.convolution import (Kernel, ForwardModel, apply_model, assemble_model_matrix,
                                  kernel_shape, model_from_path_builder)
from soslearn.geometry import ImagingGrid, PairSchedule, make_default_schedule, trace_line_path
from soslearn.inversion import (BeamformingConfig, DataError, InversionConfig,
                                apply_measurement_mask, build_tv_operator,
                                delays_to_displacements, displacements_to_delays, l1_objective,
                                reconstruct, slowness_to_sos, sos_to_slowness)

from oracles import l1l1_lp, neighbour_differences

FINE = InversionConfig(lam=1e-3, max_iters=400, tolerance=1e-9, eps_rel=1.0,
                       eps_min_rel=1e-7, eps_decay_every=3)


def _toy_model(nz=6, nx=6, pairs=((-10, -6), (0, 4), (10, 14))):
    g = ImagingGrid(nx * 1e-3, nz * 1e-3, nx, nz)
    sched = PairSchedule.from_angles(pairs)
    return model_from_path_builder(g, sched, trace_line_path,
                                   kernel_dims=kernel_shape(g, sched.max_abs_angle_deg, 1))


def test_config_validation():
    with pytest.raises(ValueError):
        BeamformingConfig(0.0)
    with pytest.raises(ValueError):
        InversionConfig(lam=-1)
    with pytest.raises(ValueError):
        InversionConfig(max_iters=0)
    with pytest.raises(ValueError):
        InversionConfig(eps_rel=0)
    with pytest.raises(ValueError):
        InversionConfig(kappa=0)
    assert BeamformingConfig(1500.0).sigma0 == pytest.approx(1 / 1500)


def test_displacement_conversion():
    assert displacements_to_delays(1.5e-3, 1500.0) == pytest.approx(1e-6, rel=1e-15)
    assert not displacements_to_delays(np.zeros(3), 1500.0).any()
    d = np.random.default_rng(0).normal(size=20) * 1e-4
    back = delays_to_displacements(displacements_to_delays(d, 1540.0), 1540.0)
    assert np.allclose(back, d, rtol=1e-15, atol=0)
    with pytest.raises(ValueError):
        displacements_to_delays(d, 0.0)
    with pytest.raises(ValueError):
        delays_to_displacements(d, -1.0)


@settings(max_examples=50, deadline=None)
@given(c=st.floats(1300, 1700), c0=st.floats(1400, 1600))
def test_sos_slowness_round_trip(c, c0):
    s = sos_to_slowness(c, c0)
    assert slowness_to_sos(s, c0) == pytest.approx(c, rel=1e-12)
    assert sos_to_slowness(slowness_to_sos(s, c0), c0) == pytest.approx(s, rel=1e-9, abs=1e-18)


def test_sos_monotone_decreasing_in_slowness():
    s = np.linspace(-5e-5, 5e-5, 101)
    c = slowness_to_sos(s, 1500.0)
    assert np.all(np.diff(c) < 0)
    assert slowness_to_sos(0.0, 1500.0) == 1500.0


def test_tv_operator_examples():
    d = build_tv_operator((3, 3), kappa=1.0)
    assert not (d @ np.full(9, 2.5)).any()
    for kappa in (1.0, 0.5, 3.0):
        bump = np.zeros((3, 3))
        bump[1, 1] = 2.0
        d = build_tv_operator((3, 3), kappa)
        assert np.abs(d @ bump.ravel()).sum() == pytest.approx(2.0 * (2 + 2 * kappa), rel=1e-15)
    with pytest.raises(ValueError):
        build_tv_operator((3, 3), 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_tv_operator_matches_loops(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(5, 7))
    d = build_tv_operator(s.shape, 0.7)
    assert np.abs(d @ s.ravel() - neighbour_differences(s, 0.7)).max() < 1e-12


def test_measurement_mask():
    t = np.zeros((10, 8))
    assert apply_measurement_mask(t).all()
    m = apply_measurement_mask(t, 2, 3)
    assert m.sum() == (10 - 2) * (8 - 6)
    cc = np.ones((10, 8), bool)
    cc[5, 4] = False
    assert apply_measurement_mask(t, 2, 3, cc).sum() == 15
    with pytest.raises(ValueError):
        apply_measurement_mask(t, 11, 0)
    with pytest.raises(ValueError):
        apply_measurement_mask(t, 0, 5)
    with pytest.raises(ValueError):
        apply_measurement_mask(t, -1, 0)


def test_fully_masked_raises_data_error():
    model = _toy_model()
    t = np.ones((3, 6, 6)) * 1e-8
    mask = apply_measurement_mask(t, near_field_rows=6)
    with pytest.raises(DataError):
        reconstruct(model, t, mask)


def test_bad_inputs():
    model = _toy_model()
    with pytest.raises(DataError):
        reconstruct(model, np.zeros((2, 6, 6)))
    t = np.zeros((3, 6, 6))
    t[0, 0, 0] = np.nan
    with pytest.raises(DataError):
        reconstruct(model, t)
    with pytest.raises(DataError):
        reconstruct(model, np.zeros((3, 6, 6)), np.ones((3, 5, 6), bool))


def test_zero_delays_give_c0():
    model = _toy_model()
    res = reconstruct(model, np.zeros((3, 6, 6)), bf_cfg=BeamformingConfig(1540.0))
    assert not res.slowness.any()
    assert np.all(res.sos == 1540.0)


def _blocky(nz, nx, seed):
    rng = np.random.default_rng(seed)
    s = np.zeros((nz, nx))
    z0, x0 = rng.integers(1, nz - 3), rng.integers(0, nx - 3)
    s[z0:z0 + 3, x0:x0 + 3] = sos_to_slowness(1500 + rng.uniform(5, 20), 1500.0)
    return s


@pytest.mark.parametrize("seed", range(3))
def test_irls_matches_lp_on_toy(seed):
    model = _toy_model()
    rng = np.random.default_rng(seed)
    s_true = _blocky(6, 6, seed)
    t = apply_model(model, s_true)
    t = t + rng.normal(0, 0.05 * np.abs(t).max(), t.shape)
    lam = 0.3 * 1e-3
    cfg = InversionConfig(**{**FINE.__dict__, "lam": lam})
    res = reconstruct(model, t, inv_cfg=cfg)
    l_mat = assemble_model_matrix(model).toarray()
    _, f_lp = l1l1_lp(l_mat, t.ravel(), build_tv_operator((6, 6), 1.0), lam)
    assert res.objective <= f_lp * 1.005
    assert res.objective >= f_lp * (1 - 1e-6)
    trace = np.asarray(res.objective_trace)
    assert np.all(np.diff(trace) <= 1e-9 * trace[0])


def test_objective_trace_monotone_iterative_path():
    g = ImagingGrid(0.032, 0.044, 32, 44)
    sched = make_default_schedule()
    model = model_from_path_builder(g, sched, kernel_dims=kernel_shape(g, 20, 4))
    s_true = np.zeros(g.shape)
    s_true[20:28, 10:18] = sos_to_slowness(1510, 1500)
    t = apply_model(model, s_true) + np.random.default_rng(0).normal(0, 5e-9, (8,) + g.shape)
    res = reconstruct(model, t)
    trace = np.asarray(res.objective_trace)
    assert np.all(np.diff(trace) <= 1e-9 * trace[0])
    assert len(res.eps_trace) == len(trace)
    assert np.allclose(res.sos, 1.0 / (res.slowness + 1 / 1500.0), rtol=1e-15)
    assert res.objective == pytest.approx(l1_objective(model, res.slowness, t,
                                                        np.ones(t.shape, bool), 3e-4,
                                                        build_tv_operator(g.shape)), rel=1e-9)


def test_realizable_noiseless_recovery_24x24():
    g = ImagingGrid(0.024, 0.024, 24, 24)
    sched = make_default_schedule()
    model = model_from_path_builder(g, sched, kernel_dims=kernel_shape(g, 20, 2))
    s_true = np.zeros(g.shape)
    s_true[10:18, 6:14] = sos_to_slowness(1520, 1500)
    t = apply_model(model, s_true)
    cfg = InversionConfig(lam=1e-5, max_iters=200, eps_min_rel=1e-6, cg_max_iters=200)
    res = reconstruct(model, t, inv_cfg=cfg)
    truth = slowness_to_sos(s_true, 1500)
    assert np.sqrt(np.mean((res.sos - truth) ** 2)) < 1.0


def test_large_lambda_gives_flat_solution():
    # a localised inclusion leaves most delays at zero, so the best constant is zero
    model = _toy_model(8, 8)
    s_true = np.zeros((8, 8))
    s_true[6:8, 0:2] = sos_to_slowness(1520, 1500)
    t = apply_model(model, s_true)
    data_scale = np.abs(t).sum() / np.abs(s_true).sum()
    cfg = InversionConfig(lam=1e6 * data_scale, max_iters=100, eps_min_rel=1e-6)
    res = reconstruct(model, t, inv_cfg=cfg)
    assert np.abs(res.slowness).max() < 1e-6


def test_masked_measurements_are_ignored():
    model = _toy_model()
    s_true = _blocky(6, 6, 1)
    t = apply_model(model, s_true)
    mask = np.ones(t.shape, bool)
    mask[:, :2] = False
    garbage = t.copy()
    garbage[~mask] = 1.0
    a = reconstruct(model, t, mask, inv_cfg=FINE)
    b = reconstruct(model, garbage, mask, inv_cfg=FINE)
    assert np.array_equal(a.slowness, b.slowness)


def test_dense_and_iterative_paths_agree():
    model = _toy_model(8, 8)
    s_true = _blocky(8, 8, 2)
    t = apply_model(model, s_true)
    cfg_d = InversionConfig(lam=1e-4, max_iters=60)
    cfg_i = InversionConfig(lam=1e-4, max_iters=60, direct_max_unknowns=0, cg_max_iters=400,
                            cg_tol=1e-14)
    a = reconstruct(model, t, inv_cfg=cfg_d)
    b = reconstruct(model, t, inv_cfg=cfg_i)
    assert np.abs(a.sos - b.sos).max() < 1e-3
