import numpy as np
import pytest

from metaconv.errors import (
    DimensionError,
    DomainError,
    FormatError,
    IllConditionedWarning,
    NumericError,
    SamplingError,
)
from metaconv.wave import (
    ComplexField,
    GridSpec,
    SampledPhase,
    apply_phase,
    far_field_decompose,
    field_from_file,
    field_to_file,
    free_space_filter,
    plane_wave,
    propagate,
    read_cfield,
    write_cfield,
)

WL = 0.87
GRID = GridSpec(256, 0.4)


def gaussian_beam(grid, wl, waist):
    X, Y = grid.coords()
    u = np.exp(-(X**2 + Y**2) / waist**2)
    return ComplexField(u.astype(complex), grid.pitch, wl)


def fitted_waist(field):
    """1/e^2 intensity radius via second moments (Gaussian oracle)."""
    I = field.intensity()
    X, Y = GridSpec(field.samples.shape[0], field.pitch).coords()
    r2 = (I * (X**2 + Y**2)).sum() / I.sum()
    return np.sqrt(2.0 * r2)   # for a Gaussian, <r^2> = w^2 / ... solved below


def test_plane_wave_is_propagation_eigenfunction():
    u = plane_wave(GRID, WL)
    out = propagate(u, 10 * WL)
    expected = np.exp(1j * 2 * np.pi * 10)
    assert np.allclose(out.samples, u.samples * expected, atol=1e-12)
    assert np.allclose(np.abs(out.samples), 1.0, atol=1e-12)


def test_energy_conservation_on_propagating_band(rng):
    u = gaussian_beam(GRID, WL, 12.0)
    before = u.energy()
    after = propagate(u, 137.0).energy()
    assert abs(after - before) <= 1e-9 * before


def test_gaussian_beam_waist_matches_analytics():
    # w(z) = w0 sqrt(1 + (z/zR)^2); at z = zR the waist grows by sqrt(2)
    w0 = 5 * WL
    grid = GridSpec(512, 0.4)
    u = gaussian_beam(grid, WL, w0)
    z_r = np.pi * w0**2 / WL
    out = propagate(u, z_r)
    I = out.intensity()
    X, Y = grid.coords()
    r2 = (I * (X**2 + Y**2)).sum() / I.sum()
    w_fit = np.sqrt(2.0 * r2)        # <r^2> = w^2/2 for intensity exp(-2r^2/w^2)
    assert abs(w_fit - w0 * np.sqrt(2)) / (w0 * np.sqrt(2)) < 0.005


def test_composition_equals_single_hop():
    u = gaussian_beam(GRID, WL, 10.0)
    a = propagate(propagate(u, 40.0), 60.0)
    b = propagate(u, 100.0)
    num = np.abs(a.samples - b.samples).max()
    assert num <= 1e-10 * np.abs(b.samples).max()


def test_reversibility_without_evanescent_content():
    u = gaussian_beam(GRID, WL, 10.0)
    back = propagate(propagate(u, 80.0), -80.0)
    err = np.abs(back.samples - u.samples).max()
    assert err <= 1e-9 * np.abs(u.samples).max()


def test_sampling_error_raised():
    coarse = ComplexField(np.ones((64, 64), complex), pitch=WL, wavelength=WL)
    with pytest.raises(SamplingError):
        propagate(coarse, 5.0)


def test_nonfinite_samples_rejected():
    bad = np.ones((64, 64), complex)
    bad[3, 4] = np.nan
    with pytest.raises(NumericError):
        propagate(ComplexField(bad, 0.4, WL), 5.0)


def test_spectral_filter_is_passive():
    filt = free_space_filter((128, 128), 0.4, WL, 25.0)
    mag = np.abs(filt.transfer)
    assert mag.max() <= 1.0 + 1e-12
    k = 2 * np.pi / WL
    ky = 2 * np.pi * np.fft.fftfreq(128, 0.4)
    KX, KY = np.meshgrid(ky, ky)
    prop_band = KX**2 + KY**2 < k**2
    assert np.allclose(mag[prop_band], 1.0, atol=1e-12)
    assert (mag[~prop_band] < 1.0).all()


def test_apply_phase_identity_and_pi():
    u = gaussian_beam(GRID, WL, 10.0)
    same = apply_phase(u, np.zeros(u.samples.shape))
    assert np.array_equal(same.samples, u.samples)
    flipped = apply_phase(u, np.full(u.samples.shape, np.pi))
    assert np.allclose(flipped.samples, -u.samples, atol=1e-12)
    assert np.allclose(np.abs(flipped.samples), np.abs(u.samples))


def test_apply_phase_preserves_modulus(rng):
    # exact up to one ulp of the complex multiply
    u = gaussian_beam(GRID, WL, 8.0)
    phi = rng.uniform(-np.pi, np.pi, u.samples.shape)
    out = apply_phase(u, phi)
    np.testing.assert_allclose(np.abs(out.samples), np.abs(u.samples),
                               rtol=5e-16, atol=0.0)


def test_apply_phase_grid_mismatch():
    u = gaussian_beam(GRID, WL, 8.0)
    with pytest.raises(DimensionError):
        apply_phase(u, np.zeros((100, 100)))
    with pytest.raises(DimensionError):
        apply_phase(u, SampledPhase(np.zeros(u.samples.shape), pitch=0.7))


def test_hyperbolic_lens_focus_fwhm():
    # focusing oracle: peak at center, FWHM within 10% of 1.02 lambda f / D
    from metaconv.lens import HyperbolicPhase
    f = 1000.0
    grid = GridSpec(1024, 0.4)
    D = 300.0
    u = plane_wave(grid, WL, aperture=D)
    lens = HyperbolicPhase(f, WL)
    focused = propagate(apply_phase(u, lens.phase_on(u)), f)
    I = focused.intensity()
    iy, ix = np.unravel_index(np.argmax(I), I.shape)
    assert abs(iy - 512) <= 1 and abs(ix - 512) <= 1
    row = I[iy]
    half = row >= row.max() / 2
    fwhm = half.sum() * grid.pitch
    expect = 1.02 * WL * f / D
    assert abs(fwhm - expect) / expect < 0.10


def test_far_field_single_direction():
    d = (0.02, -0.01)
    u = plane_wave(GRID, WL, *d, aperture=GRID.extent)
    coefs = far_field_decompose(u, [d])
    assert abs(np.abs(coefs[0]) ** 2 - 1.0) < 1e-9


def test_far_field_two_wave_split():
    # well-separated here means orthogonal over the support: use two exact
    # grid modes of the full square aperture
    g = GridSpec(512, 0.4)
    s = 24 * WL / (512 * 0.4)
    d1, d2 = (np.arcsin(s), 0.0), (np.arcsin(-s), 0.0)
    u1 = plane_wave(g, WL, *d1).samples
    u2 = plane_wave(g, WL, *d2).samples
    u = ComplexField(u1 + u2, g.pitch, WL)
    p = np.abs(far_field_decompose(u, [d1, d2])) ** 2
    assert np.allclose(p, 0.5, atol=1e-6)


def test_far_field_duplicate_warns():
    u = plane_wave(GRID, WL, aperture=GRID.extent)
    with pytest.warns(IllConditionedWarning):
        far_field_decompose(u, [(0.0, 0.0), (0.0, 0.0)])


def test_far_field_out_of_band():
    u = plane_wave(GRID, WL)
    with pytest.raises(DomainError):
        far_field_decompose(u, [(np.pi / 2, 0.0)])


def test_cfield_roundtrip_complex(tmp_path, rng):
    u = ComplexField(rng.standard_normal((32, 48)) + 1j * rng.standard_normal((32, 48)),
                     0.45, WL, origin=(1.5, -2.0))
    path = tmp_path / "f.cfield"
    field_to_file(u, path)
    back = field_from_file(path)
    assert np.array_equal(back.samples, u.samples)
    assert back.pitch == u.pitch and back.wavelength == u.wavelength
    assert back.origin == u.origin


def test_cfield_real_map(tmp_path, rng):
    arr = rng.standard_normal((16, 16))
    path = tmp_path / "m.cfield"
    write_cfield(path, arr, 12.0, WL)
    data, header = read_cfield(path)
    assert header["dtype"] == "f64le"
    assert np.array_equal(data, arr)


def test_cfield_truncated(tmp_path):
    path = tmp_path / "bad.cfield"
    write_cfield(path, np.ones((8, 8)), 1.0, WL)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(FormatError):
        read_cfield(path)


def test_field_invariants():
    with pytest.raises(DimensionError):
        ComplexField(np.ones((1, 5), complex), 0.4, WL)
    with pytest.raises(DomainError):
        ComplexField(np.ones((4, 4), complex), -0.4, WL)
    with pytest.raises(DomainError):
        ComplexField(np.ones((4, 4), complex), 0.4, 0.0)
