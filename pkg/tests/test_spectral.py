import numpy as np
import pytest

from grid_field import AliasSine, ConstantY, MultiTone, Product, ScalarField, build_grid, sample
from precision_sim import NonFiniteError, PrecisionSystem
from spectral import (ModeMask, Spectrum, basis_eval, dft, dft_modes, fft_fast, idft, idft_modes,
                      read_spectrum_csv, signed_frequencies, truncate, write_spectrum_csv)

EXACT = PrecisionSystem.exact()
HALF = PrecisionSystem.half()


def random_field(rng, d, m):
    return ScalarField(build_grid(d, m), rng.uniform(-1, 1, size=m ** d))


def test_basis_eval():
    assert basis_eval(0, 0.37) == 1
    assert basis_eval(1, 0.25) == pytest.approx(1j, abs=1e-15)
    assert basis_eval((1, 1), (0.5, 0.5)) == pytest.approx(1, abs=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert abs(basis_eval(rng.integers(-20, 20, size=3), rng.uniform(size=3))) == pytest.approx(1, abs=1e-15)


def test_dft_examples():
    ones = sample(ConstantY(1), build_grid(1, 4))
    spec = dft(ones, EXACT)
    assert spec[0] == pytest.approx(1)
    assert spec[1] == pytest.approx(0, abs=1e-15)
    spec = dft(sample(Product(), build_grid(1, 4)), EXACT)
    assert spec[1] == pytest.approx(-0.125 - 0.125j, abs=1e-15)
    assert spec.precision_used == EXACT


def test_constant_field_has_exactly_zero_non_dc_modes():
    for d, m in ((1, 4), (2, 4), (1, 8), (3, 2)):
        spec = dft(sample(ConstantY(1), build_grid(d, m)), EXACT)
        dc = (0,) * d
        assert spec[dc] == 1
        nonzero = np.argwhere(spec.coeffs != 0)
        if m in (2, 4):
            assert [tuple(w) for w in nonzero] == [dc]
    spec = dft(sample(ConstantY(1), build_grid(1, 4)), EXACT)
    assert spec[1] == 0 and spec[2] == 0 and spec[3] == 0


def test_dft_modes_matches_direct_sum():
    rng = np.random.default_rng(1)
    field = random_field(rng, 2, 6)
    modes = np.array([[0, 0], [1, -2], [-3, 2]])
    grid = field.grid
    direct = [np.sum(field.values * np.exp(2j * np.pi * grid.anchors @ w)) / grid.n for w in modes]
    assert np.allclose(dft_modes(field.as_tensor(), grid, modes, EXACT), direct, atol=1e-14)
    fine = PrecisionSystem.geometric(1e-6, 1e-4, 160000)
    assert np.allclose(dft_modes(field.as_tensor(), grid, modes, fine), direct, atol=1e-3)


def test_idft_inverts_dft():
    field = sample(Product(), build_grid(1, 8))
    assert np.max(np.abs(idft(dft(field, EXACT), EXACT).values - field.values)) < 1e-12
    field = sample(MultiTone.random(7, d=1, max_freq=10), build_grid(1, 64))
    assert np.max(np.abs(idft(dft(field, EXACT), EXACT).values - field.values)) < 1e-12
    grid = build_grid(2, 4)
    coeffs = np.zeros(grid.shape, dtype=complex)
    coeffs[0, 0] = 1
    assert np.allclose(idft(Spectrum(grid, coeffs, EXACT), EXACT).values, 1.0)


def test_idft_modes_batched():
    rng = np.random.default_rng(2)
    grid = build_grid(1, 16)
    modes = signed_frequencies(16)[:, None]
    values = rng.normal(size=(3, 2, 16))
    X = dft_modes(values, grid, modes, EXACT)
    assert X.shape == (3, 2, 16)
    assert np.allclose(idft_modes(X, grid, modes, EXACT).real, values, atol=1e-12)


def test_parseval_and_linearity():
    rng = np.random.default_rng(3)
    for d, m in ((1, 32), (2, 8), (3, 4)):
        u, v = random_field(rng, d, m), random_field(rng, d, m)
        spec = dft(u, EXACT)
        assert spec.energy() == pytest.approx(np.mean(u.values ** 2), rel=1e-10)
        a, b = rng.normal(size=2)
        mix = dft(ScalarField(u.grid, a * u.values + b * v.values), EXACT)
        assert np.allclose(mix.coeffs, a * spec.coeffs + b * dft(v, EXACT).coeffs, atol=1e-12)


def test_conjugate_symmetry_of_real_fields():
    rng = np.random.default_rng(4)
    spec = dft(random_field(rng, 2, 8), EXACT)
    mirrored = np.conj(np.roll(np.flip(spec.coeffs, axis=(0, 1)), 1, axis=(0, 1)))
    assert np.allclose(spec.coeffs, mirrored, atol=1e-12)


def test_mode_mask():
    grid = build_grid(1, 8)
    mask = ModeMask.cutoff(grid, 2)
    assert mask.keep == {(-1,), (0,), (1,)}
    assert mask.indices(grid).ravel().tolist() == [0, 1, 7]
    assert mask.signed(grid).ravel().tolist() == [0, 1, -1]
    assert ModeMask(frozenset({(3,)})).keep == {(0,), (3,)}
    assert len(ModeMask.all(build_grid(2, 4)).keep) == 16
    with pytest.raises(ValueError):
        ModeMask(frozenset({(5,)})).indices(grid)
    with pytest.raises(ValueError):
        ModeMask.cutoff(grid, 0)


def test_truncate():
    field = sample(MultiTone.random(11, d=1, max_freq=10), build_grid(1, 64))
    spec = dft(field, EXACT)
    assert np.array_equal(truncate(spec, ModeMask.all(field.grid)).coeffs, spec.coeffs)
    const = dft(sample(ConstantY(2.0), build_grid(2, 4)), EXACT)
    assert np.array_equal(truncate(const, ModeMask.dc_only(2)).coeffs, const.coeffs)

    tone = MultiTone.random(11, d=1, max_freq=10)
    kept = truncate(spec, ModeMask.cutoff(field.grid, 2))
    tail = sum(a ** 2 / 2 for a, f in zip(tone.amps, tone.freqs) if f[0] >= 2)
    assert spec.energy() - kept.energy() == pytest.approx(tail, rel=1e-10)
    assert kept[1] == spec[1]
    assert kept[2] == 0


def test_fft_fast_agrees_with_dft():
    field = sample(Product(), build_grid(1, 8))
    assert np.allclose(fft_fast(field).coeffs, dft(field, EXACT).coeffs, atol=1e-10)
    field = sample(MultiTone.random(5, d=2, max_freq=6), build_grid(2, 16))
    assert np.allclose(fft_fast(field).coeffs, dft(field, EXACT).coeffs, atol=1e-10)
    delta = fft_fast(sample(ConstantY(1.0), build_grid(1, 16))).coeffs
    assert delta[0] == pytest.approx(1)
    assert np.allclose(delta[1:], 0, atol=1e-12)
    with pytest.raises(ValueError, match="dft"):
        fft_fast(sample(Product(), build_grid(1, 6)))


def test_aliased_sine_samples_identically():
    for m in (8, 16, 32):
        for omega in (1, 2, 3):
            grid = build_grid(1, m)
            assert np.array_equal(sample(AliasSine(1.0, m + omega), grid).values,
                                  sample(AliasSine(1.0, omega), grid).values)


def test_half_dft_of_bounded_field_stays_finite():
    rng = np.random.default_rng(6)
    field = random_field(rng, 1, 256)
    mask = ModeMask.cutoff(field.grid, 8)
    spec = dft(field, HALF, mask=mask)
    assert np.all(np.isfinite(spec.coeffs))
    exact = truncate(dft(field, EXACT), mask)
    assert np.max(np.abs(spec.coeffs - exact.coeffs)) < 1e-2
    assert spec[20] == 0


def test_half_overflow_names_the_frequency():
    grid = build_grid(1, 8)
    values = np.full(8, 1e6)
    with pytest.raises(NonFiniteError) as info:
        dft_modes(values, grid, np.array([[0], [1]]), HALF)
    assert info.value.stage == "fft"
    assert info.value.omega == (0,)
    with pytest.raises(NonFiniteError) as info:
        idft_modes(np.array([[6e4, 6e4]]), grid, np.array([[0], [1]]), HALF, stage="ifft")
    assert info.value.stage == "ifft"
    assert info.value.omega == (1,)


def test_dft_rejects_non_finite_field():
    with pytest.raises(ValueError):
        dft(ScalarField(build_grid(1, 2), [0.0, np.inf]), EXACT)


def test_spectrum_csv_round_trip(tmp_path):
    spec = dft(sample(MultiTone.random(2, d=2, max_freq=3), build_grid(2, 8)), EXACT)
    path = tmp_path / "spectrum.csv"
    write_spectrum_csv(spec, path)
    assert path.read_text().splitlines()[0] == "omega_1,omega_2,re,im"
    assert np.array_equal(read_spectrum_csv(path).coeffs, spec.coeffs)
