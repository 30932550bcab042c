import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soslearn.convolution import apply_model, kernel_shape, model_from_path_builder
from soslearn.geometry import ImagingGrid, WindowConfig, make_default_schedule, trace_window_path
from soslearn.inversion import sos_to_slowness
from soslearn.phantoms import (SOS_SANITY_BAND, LabeledPhantom, PhantomSpec,
                               circular_inclusion_phantom, gen_blob_phantom,
                               gen_geometric_phantom, gen_geometric_set, generate_phantom,
                               make_splits, ring_mask, synthesize_observation)

GRID = ImagingGrid(0.040, 0.055, 32, 44)
BLOB = PhantomSpec(family="blob", grid=GRID)
GEOM = PhantomSpec(family="geometric", grid=GRID)


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(family="other")
    with pytest.raises(ValueError):
        PhantomSpec(background_mode="wavy")
    with pytest.raises(ValueError):
        PhantomSpec(background_sos_range=(1550.0, 1470.0))
    with pytest.raises(ValueError):
        PhantomSpec(max_contrast=0.0)
    assert BLOB.contrast_range == (1.0, 10.0)
    assert GEOM.contrast_range == (10.0, 100.0)


def _check_invariants(ph: LabeledPhantom):
    assert ph.inclusion_mask.any() and ph.background_mask.any()
    assert not np.any(ph.inclusion_mask & ph.background_mask)
    assert np.all(np.isfinite(ph.sos))
    lo, hi = SOS_SANITY_BAND
    assert ph.sos.min() >= lo and ph.sos.max() <= hi
    assert np.all(np.isfinite(sos_to_slowness(ph.sos, 1500.0)))


@pytest.mark.parametrize("seed", range(20))
def test_blob_ranges(seed):
    # background in [1470, 1550] m/s and contrast at most 10 m/s
    ph = gen_blob_phantom(BLOB, seed)
    _check_invariants(ph)
    bkg = np.median(ph.sos[ph.background_mask])
    inc = np.median(ph.sos[ph.inclusion_mask])
    assert 1470.0 <= bkg <= 1550.0
    assert abs(inc - bkg) <= 10.0
    assert 1.0 <= abs(ph.meta["contrast"]) <= 10.0
    assert len(ph.meta["harmonic_amplitudes"]) <= 4
    assert sum(ph.meta["harmonic_amplitudes"]) <= 0.3 + 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_geometric_ranges(seed):
    ph = gen_geometric_phantom(GEOM, seed)
    _check_invariants(ph)
    bkg = np.median(ph.sos[ph.background_mask])
    inc = np.median(ph.sos[ph.inclusion_mask])
    assert 1470.0 <= bkg <= 1550.0
    assert abs(inc - bkg) <= 100.0
    assert abs(ph.meta["contrast"]) <= 100.0


def test_geometric_set_composition():
    # 28 circular and 4 rectangular inclusions
    phs = gen_geometric_set(GEOM, 3)
    assert len(phs) == 32
    shapes = [p.meta["shape"] for p in phs]
    assert shapes.count("circle") == 28 and shapes.count("rectangle") == 4
    assert all(abs(p.meta["contrast"]) <= 100.0 for p in phs)


@pytest.mark.parametrize("seed", range(10))
def test_circle_area(seed):
    g = ImagingGrid(0.040, 0.055, 64, 88)
    ph = gen_geometric_phantom(PhantomSpec(family="geometric", grid=g), seed, "circle")
    r = ph.meta["radius_m"]
    expected = np.pi * r * r / (g.dx * g.dz)
    assert abs(ph.inclusion_mask.sum() - expected) <= 0.02 * expected


def test_determinism_and_seed_sensitivity():
    a = gen_blob_phantom(BLOB, 7)
    b = gen_blob_phantom(BLOB, 7)
    assert np.array_equal(a.sos, b.sos) and np.array_equal(a.inclusion_mask, b.inclusion_mask)
    c = gen_blob_phantom(BLOB, 8)
    assert not np.array_equal(a.sos, c.sos)
    with pytest.raises(ValueError):
        gen_blob_phantom(GEOM, 0)
    with pytest.raises(ValueError):
        gen_geometric_phantom(BLOB, 0)
    with pytest.raises(ValueError):
        gen_geometric_phantom(GEOM, 0, "triangle")


def test_background_modes():
    const = gen_blob_phantom(PhantomSpec(grid=GRID, background_mode="constant"), 2)
    vals = np.unique(const.sos[~const.inclusion_mask])
    assert vals.size == 1
    smooth = gen_blob_phantom(PhantomSpec(grid=GRID, background_mode="smooth"), 2)
    bg = smooth.sos[~smooth.inclusion_mask]
    assert bg.max() - bg.min() > 0
    assert bg.max() - bg.min() <= 2 * 5.0 + 1e-9


def test_ring_mask_margin():
    inc = np.zeros(GRID.shape, bool)
    inc[20:24, 14:18] = True
    ring = ring_mask(inc, GRID, 5.0)
    assert not np.any(ring & inc)
    zz, xx = np.nonzero(ring)
    iz, ix = np.nonzero(inc)
    # every ring cell lies within 5 mm of the inclusion
    d = np.sqrt(((zz[:, None] - iz[None]) * GRID.dz) ** 2 + ((xx[:, None] - ix[None]) * GRID.dx) ** 2)
    assert d.min(axis=1).max() <= 5e-3 + 1e-12


def test_inclusions_avoid_near_field():
    for seed in range(15):
        ph = generate_phantom(BLOB, seed)
        rows = np.nonzero(ph.inclusion_mask)[0]
        assert rows.min() * GRID.dz >= 5e-3 - GRID.dz


def _truth():
    sched = make_default_schedule()
    return model_from_path_builder(GRID, sched, trace_window_path,
                                   kernel_dims=kernel_shape(GRID, 20, 10), window_cfg=WindowConfig())


def test_observation_zero_for_uniform_c0():
    truth = _truth()
    ph = LabeledPhantom(np.full(GRID.shape, 1500.0), np.zeros(GRID.shape, bool),
                        np.ones(GRID.shape, bool), {})
    obs = synthesize_observation(ph, truth, noise_sigma=0.0)
    assert not obs.delays.any()
    assert obs.mask.all()


def test_observation_noiseless_equals_model_and_noise_std():
    truth = _truth()
    ph = gen_blob_phantom(BLOB, 4)
    clean = synthesize_observation(ph, truth, noise_sigma=0.0)
    assert np.array_equal(clean.delays, apply_model(truth, sos_to_slowness(ph.sos, 1500.0)))
    noisy = synthesize_observation(ph, truth, noise_sigma=1e-8, seed=9)
    diff = (noisy.delays - clean.delays).ravel()
    assert diff.size >= 1e4
    assert abs(diff.std() - 1e-8) <= 0.05 * 1e-8
    with pytest.raises(ValueError):
        synthesize_observation(ph, truth, noise_sigma=-1.0)
    small = gen_blob_phantom(PhantomSpec(grid=ImagingGrid(0.04, 0.055, 16, 22)), 0)
    with pytest.raises(ValueError):
        synthesize_observation(small, truth)


def test_splits_default_sizes():
    # 96 phantoms split into three subsets of 32
    m = make_splits(32, 32, 32, 0)
    assert len(m) == 96
    assert len({e["id"] for e in m}) == 96
    for split in ("train", "val", "test"):
        assert sum(e["split"] == split for e in m) == 32
    assert make_splits(32, 32, 32, 0) == m
    assert make_splits(32, 32, 32, 1) != m
    assert [e["split"] for e in make_splits(0, 0, 1, 5)] == ["test"]
    assert make_splits(0, 0, 0, 0) == []
    with pytest.raises(ValueError):
        make_splits(-1, 0, 0, 0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), family=st.sampled_from(["blob", "geometric"]),
       nx=st.integers(8, 40), nz=st.integers(8, 50))
def test_generators_always_valid(seed, family, nx, nz):
    g = ImagingGrid(0.040, 0.055, nx, nz)
    ph = generate_phantom(PhantomSpec(family=family, grid=g), seed)
    assert ph.sos.shape == g.shape
    assert ph.inclusion_mask.any()
    assert not np.any(ph.inclusion_mask & ph.background_mask)
    lo, hi = SOS_SANITY_BAND
    assert np.all((ph.sos >= lo) & (ph.sos <= hi))


def test_circular_inclusion_phantom():
    spec = PhantomSpec(family="geometric", grid=GRID)
    ph = circular_inclusion_phantom(spec, (0.02, 0.03), 7e-3, 40.0, 1520.0)
    _check_invariants(ph)
    assert np.all(ph.sos[ph.inclusion_mask] == 1560.0)
    assert np.all(ph.sos[~ph.inclusion_mask] == 1520.0)
    expected = np.pi * 7e-3 ** 2 / (GRID.dx * GRID.dz)
    assert abs(ph.inclusion_mask.sum() - expected) <= 0.1 * expected
    with pytest.raises(ValueError):
        circular_inclusion_phantom(spec, (0.02, 0.03), 0.0, 40.0, 1520.0)
    with pytest.raises(ValueError):
        circular_inclusion_phantom(spec, (1.0, 1.0), 1e-3, 40.0, 1520.0)
    with pytest.raises(ValueError):
        circular_inclusion_phantom(spec, (0.02, 0.03), 7e-3, 5000.0, 1520.0)
