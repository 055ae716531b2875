import numpy as np
import pytest

from metaconv.errors import (
    DegenerateInputError,
    DimensionError,
    DomainError,
    InsufficientBaselineError,
)
from metaconv.imaging import (
    ImperfectionModel,
    calibrate_c,
    convolve_discrete,
    extract_effective_kernel,
    fidelity_sigma,
    incoherent_convolve_continuous,
    simulate_psf,
)
from metaconv.pipeline import (
    design_channel,
    effective_kernel_for,
    ideal_focuser,
    simulate_channel_psf,
)
from metaconv.synthesis import OpticalConfig, SignedKernel, predict_spot_positions
from metaconv.wave import GridSpec

# reduced geometry for unit tests: smaller aperture, 1024^2 grid, ~4x faster
# than the acceptance-scale simulation (which uses the packaged defaults)
CFG = OpticalConfig(aperture_d1_um=220.16)
GRID = GridSpec(1024, 1.0 / 3.0)
PROJ = dict(grid_n=256, multi_start=3, coarse_n=128, comp_iters=20)


@pytest.fixture(scope="module")
def demo_kernel():
    w = np.random.default_rng(3).uniform(-1, 1, (3, 3))
    w /= np.abs(w).max()
    return SignedKernel(w, 0)


@pytest.fixture(scope="module")
def demo_psf(demo_kernel):
    design = design_channel(demo_kernel, CFG, seed=0, grid_n=256)
    return simulate_channel_psf(design, CFG, grid=GRID)


FULL_CFG = OpticalConfig()   # production aperture: 2 um spots


@pytest.fixture(scope="module")
def full_psf(demo_kernel):
    design = design_channel(demo_kernel, FULL_CFG, seed=0, grid_n=512)
    return simulate_channel_psf(design, FULL_CFG, grid=GridSpec(2048, 1.0 / 3.0))


def test_single_spot_lands_at_prediction():
    k = SignedKernel(np.array([[0.0, 0.0], [0.0, 1.0]]))
    design = design_channel(k, CFG, seed=0, grid_n=256)
    psf = simulate_channel_psf(design, CFG, grid=GRID)
    pos = predict_spot_positions(design.angles, CFG).reshape(-1, 2)
    target = pos[3]
    iy, ix = np.unravel_index(np.argmax(psf.rcp), psf.rcp.shape)
    n = psf.rcp.shape[0]
    got = ((ix - n // 2) * psf.pitch, (iy - n // 2) * psf.pitch)
    assert abs(got[0] - target[0]) <= 0.5 * psf.pitch
    assert abs(got[1] - target[1]) <= 0.5 * psf.pitch


def test_three_by_three_kernel_fidelity(demo_kernel, demo_psf):
    eff = extract_effective_kernel(demo_psf, CFG, (3, 3))
    target = demo_kernel.weights / np.abs(demo_kernel.weights).max()
    dev = np.abs(eff.weights - target)
    assert dev.mean() <= 0.03
    corr = np.corrcoef(eff.weights.ravel(), target.ravel())[0, 1]
    assert corr >= 0.995


def test_zeroth_order_split_is_symmetric(demo_kernel):
    design = design_channel(demo_kernel, CFG, seed=0, grid_n=256)
    psf = simulate_channel_psf(design, CFG, grid=GRID,
                               imperfection=ImperfectionModel(0.05))
    n = psf.rcp.shape[0]
    c = slice(n // 2 - 6, n // 2 + 7)
    # the leak adds identically to both polarizations
    r_center = psf.rcp[c, c].sum()
    l_center = psf.lcp[c, c].sum()
    base = simulate_channel_psf(design, CFG, grid=GRID)
    r0 = base.rcp[c, c].sum()
    l0 = base.lcp[c, c].sum()
    leak_r = r_center - 0.95 * r0
    leak_l = l_center - 0.95 * l0
    assert abs(leak_r / leak_l - 1.0) < 1e-6


def test_leak_cancels_in_subtraction(demo_kernel):
    design = design_channel(demo_kernel, CFG, seed=0, grid_n=256)
    base = simulate_channel_psf(design, CFG, grid=GRID)
    leaky = simulate_channel_psf(design, CFG, grid=GRID,
                                 imperfection=ImperfectionModel(0.05))
    diff_base = base.rcp - base.lcp
    diff_leaky = leaky.rcp - leaky.lcp
    # subtracted maps identical up to the (1 - eps) scale
    resid = diff_leaky - 0.95 * diff_base
    assert np.abs(resid).max() <= 1e-12 * np.abs(diff_base).max()


def test_extraction_gain_modes(demo_psf, demo_kernel):
    eq = extract_effective_kernel(demo_psf, CFG, (3, 3), gains="equal")
    ds = extract_effective_kernel(demo_psf, CFG, (3, 3), gains="design")
    assert eq.weights.shape == ds.weights.shape == (3, 3)
    # design gains correct the pos/neg imbalance of this random kernel
    target = demo_kernel.weights / np.abs(demo_kernel.weights).max()
    assert np.abs(ds.weights - target).mean() < np.abs(eq.weights - target).mean()


def test_extraction_rejects_wide_window(demo_psf):
    with pytest.raises(DomainError):
        extract_effective_kernel(demo_psf, CFG, (3, 3),
                                 window_radius=0.7 * CFG.pixel_um)


def test_calibrate_c_near_unity():
    c = calibrate_c(CFG, ideal_focuser(CFG), grid=GRID)
    assert abs(c - 1.0) < 0.02
    # linearity: doubled baseline gives the same constant
    c2 = calibrate_c(CFG, ideal_focuser(CFG), grid=GRID,
                     probe_angles=(0.0, np.deg2rad(2.0)))
    assert abs(c2 - c) / c < 0.01


def test_calibrate_c_insufficient_baseline():
    with pytest.raises(InsufficientBaselineError):
        calibrate_c(CFG, ideal_focuser(CFG), grid=GRID,
                    probe_angles=(0.0, 1e-7))


# ----------------------------------------------------------- discrete conv

def test_convolve_discrete_identity():
    img = np.random.default_rng(0).uniform(0, 1, (14, 14))
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    np.testing.assert_allclose(convolve_discrete(img, k), img, atol=1e-15)


def test_convolve_discrete_zero():
    img = np.ones((8, 8))
    assert not convolve_discrete(img, np.zeros((3, 3))).any()


def test_convolve_discrete_matches_nested_loops():
    rng = np.random.default_rng(9)
    img = rng.uniform(0, 1, (28, 28))
    k = rng.uniform(-1, 1, (7, 7))
    out = convolve_discrete(img, k)
    ref = np.zeros_like(img)
    for i in range(28):
        for j in range(28):
            acc = 0.0
            for m in range(7):
                for n in range(7):
                    ii, jj = i + m - 3, j + n - 3
                    if 0 <= ii < 28 and 0 <= jj < 28:
                        acc += k[m, n] * img[ii, jj]
            ref[i, j] = acc
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-14)


def test_convolve_discrete_rejects_even_kernel():
    with pytest.raises(DimensionError):
        convolve_discrete(np.ones((8, 8)), np.ones((2, 2)))


# ----------------------------------------------------------- continuous path

def test_continuous_delta_object_reproduces_kernel(demo_kernel, demo_psf):
    obj = np.zeros((15, 15))
    obj[7, 7] = 1.0
    fm = incoherent_convolve_continuous(obj, demo_psf).maps[0]
    dig = convolve_discrete(obj, demo_kernel)
    assert fidelity_sigma(dig, fm) <= 0.01


def test_continuous_uniform_object_is_constant(demo_kernel, full_psf):
    obj = np.ones((12, 12))
    fm = incoherent_convolve_continuous(obj, full_psf).maps[0]
    inner = fm[3:-3, 3:-3]
    # away from the zero-padded border every pixel is sum of signed weights
    assert np.ptp(inner) <= 0.02 * np.abs(fm).max()
    dig = convolve_discrete(obj, demo_kernel)
    assert fidelity_sigma(dig, fm) <= 0.01


def test_continuous_matches_digital_on_chart(demo_kernel, full_psf):
    rng = np.random.default_rng(4)
    yy, xx = np.mgrid[0:24, 0:24]
    chart = np.clip(np.exp(-((xx - 8.0)**2 + (yy - 12.0)**2) / 30.0)
                    + 0.7 * ((np.abs(xx - 17) < 4) & (np.abs(yy - 7) < 5))
                    + 0.3 * rng.uniform(0, 1, (24, 24)), 0, 1)
    fm = incoherent_convolve_continuous(chart, full_psf).maps[0]
    dig = convolve_discrete(chart, demo_kernel)
    sigma = fidelity_sigma(dig, fm)
    assert sigma <= 0.01


def test_subtraction_linearity(demo_kernel):
    # feature map of w equals map(positive part) - map(negative part)
    from metaconv.synthesis import split_signed
    design = design_channel(demo_kernel, CFG, seed=0, grid_n=256)
    psf = simulate_channel_psf(design, CFG, grid=GRID)
    obj = np.random.default_rng(5).uniform(0, 1, (10, 10))
    full = incoherent_convolve_continuous(obj, psf).maps[0]
    gpos, gneg = psf.design_power[0]
    pos_only = type(psf)(psf.rcp, np.zeros_like(psf.lcp), psf.pitch, psf.cfg,
                         psf.channel_angles, {0: (gpos, 0.0)})
    neg_only = type(psf)(np.zeros_like(psf.rcp), psf.lcp, psf.pitch, psf.cfg,
                         psf.channel_angles, {0: (0.0, gneg)})
    fm_pos = incoherent_convolve_continuous(obj, pos_only).maps[0]
    fm_neg = incoherent_convolve_continuous(obj, neg_only).maps[0]
    np.testing.assert_allclose(full, fm_pos + fm_neg, atol=1e-12 * np.abs(full).max())


# ----------------------------------------------------------- sigma metric

def test_sigma_identical_is_zero():
    d = np.random.default_rng(0).standard_normal((9, 9))
    assert fidelity_sigma(d, d) == 0.0


def test_sigma_formula_value():
    di = np.ones((5, 5))
    dm = np.zeros((5, 5))
    assert fidelity_sigma(di, dm) == 0.5


def test_sigma_shape_mismatch():
    with pytest.raises(DimensionError):
        fidelity_sigma(np.ones((3, 3)), np.ones((4, 4)))


@pytest.mark.slow
def test_misalignment_degrades_monotonically(demo_kernel):
    # with the optimized doublet corrector, lateral misalignment blurs the
    # spots; extracted-kernel correlation decays monotonically
    from metaconv.lens import optimize_coma_free
    lens_cfg = OpticalConfig(aperture_d1_um=220.16, ms_separation_um=300.0)
    ms1, ms2, _ = optimize_coma_free(lens_cfg, field_angles_deg=(0.0, 5.0, 10.0),
                                     nm_restarts=1)
    target = demo_kernel.weights / np.abs(demo_kernel.weights).max()
    design = design_channel(demo_kernel, lens_cfg, seed=0, grid_n=256)
    corrs = []
    for dx in (0.0, 20.0, 40.0, 65.0, 130.0):
        psf = simulate_channel_psf(design, lens_cfg, grid=GRID, ms2=ms2,
                                   corrector=ms1,
                                   imperfection=ImperfectionModel(0.0, dx_um=dx))
        eff = extract_effective_kernel(psf, lens_cfg, (3, 3))
        corrs.append(np.corrcoef(eff.weights.ravel(), target.ravel())[0, 1])
    assert corrs[3] >= corrs[4]
    assert all(corrs[i] >= corrs[i + 1] - 1e-6 for i in range(4))
