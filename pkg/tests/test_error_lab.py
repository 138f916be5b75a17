import math

import numpy as np
import pytest

from error_lab import (REPORT_COLUMNS, BoundConstants, SweepConfig, aliasing_demo, bounds_sweep, disc_error,
                       disc_lower_witness, disc_upper_bound, evaluate_row, general_disc_bounds, general_disc_error,
                       general_prec_bounds, general_prec_error, prec_error, prec_lower_witness, prec_upper_bound,
                       witness_riemann_sum)
from grid_field import ConstantY, Custom, MultiTone, Product, build_grid
from precision_sim import PrecisionSystem, relative_epsilon
from utils import loglog_slope

EXACT = PrecisionSystem.exact()
HALF = PrecisionSystem.half()


def test_disc_error_examples():
    for d, m in ((1, 4), (2, 8), (3, 3)):
        assert disc_error(ConstantY(0.7), build_grid(d, m), 0) == pytest.approx(0, abs=1e-15)
    assert disc_error(Product(), build_grid(1, 4), 1) == pytest.approx(0.1296, abs=1e-4)
    assert disc_error(Product(), build_grid(1, 4), 1) == pytest.approx(abs(-1j / (2 * math.pi) + 0.125 + 0.125j))


def test_disc_error_parts():
    grid = build_grid(1, 8)
    # cosine part of the left Riemann sum of x exp(2 pi i x) is exactly -1/(2m)
    assert disc_error(Product(), grid, 1, part="cos") == pytest.approx(1 / 16)
    assert disc_error(Product(), grid, 1, part="sin") == pytest.approx(disc_lower_witness(1, 8))
    with pytest.raises(ValueError):
        disc_error(Product(), grid, 1, part="tan")


def test_product_sine_gap_decays_with_rate_two():
    ms = [4, 8, 16, 32]
    gaps = [disc_error(Product(), build_grid(1, m), 1, part="sin") for m in ms]
    assert loglog_slope(ms, gaps) == pytest.approx(-2, abs=0.1)
    for d, ms in ((2, [4, 8, 16, 32]), (3, [4, 8, 16])):
        ns = [m ** d for m in ms]
        gaps = [disc_lower_witness(d, m) for m in ms]
        assert loglog_slope(ns, gaps) == pytest.approx(-2 / d, abs=0.1)


def test_disc_error_custom_needs_reference_quadrature():
    grid = build_grid(1, 4)
    with pytest.raises(ValueError):
        disc_error(Custom(lambda x: x[:, 0]), grid, 1)
    with pytest.raises(ValueError):
        disc_error(Custom(lambda x: x[:, 0], quadrature_budget=100), grid, 1)
    f = Custom(lambda x: x[:, 0], quadrature_budget=10 ** 4)
    assert disc_error(f, grid, 1) == pytest.approx(disc_error(Product(), grid, 1), abs=1e-4)


def test_prec_error_examples():
    grid = build_grid(2, 8)
    assert prec_error(MultiTone.random(0, d=2, max_freq=3), grid, EXACT, (1, 0)) == 0
    err = prec_error(Product(), grid, HALF, (1, 0))
    assert 0 < err <= 4 * relative_epsilon(HALF)
    for sys in (HALF, PrecisionSystem.fp8clip(), PrecisionSystem.geometric(1e-3, 0.01, 1000)):
        assert prec_lower_witness(sys, 1.0, build_grid(1, 4)) >= relative_epsilon(sys) / 4
    assert prec_lower_witness(EXACT, 1.0, grid) == 0


def test_prec_error_of_constant_is_independent_of_n():
    sys = PrecisionSystem.geometric(0.5, 1.0, 3)
    errs = [prec_error(ConstantY(0.7), build_grid(d, m), sys, np.zeros(d, dtype=int))
            for d, m in ((1, 3), (1, 64), (2, 16), (3, 5))]
    assert errs == pytest.approx([0.2] * 4, rel=1e-12)


def test_disc_upper_bound():
    assert disc_upper_bound(1, 1, 1, 4, 1) == pytest.approx(1.0)
    assert disc_upper_bound(0, 0, 2, 16, (1, 1)) == 0
    assert disc_upper_bound(1, 1, 3, 10 ** 6, 1) == pytest.approx(0.0693, abs=1e-4)
    assert disc_upper_bound(1, 1, 1, 4, 1, BoundConstants(c2=4.0)) == pytest.approx(2.0)


def test_disc_error_grows_at_most_linearly_in_omega():
    grid = build_grid(1, 16)
    for omega in range(1, 9):
        assert disc_error(Product(), grid, omega) <= disc_upper_bound(1, 1, 1, grid.n, omega)


def test_disc_lower_witness_matches_direct_sum():
    for d, m in ((1, 4), (2, 8), (3, 6)):
        direct = abs((-1 / (2 * math.pi)) ** d - witness_riemann_sum(d, m))
        assert disc_lower_witness(d, m) == pytest.approx(direct, abs=1e-12)
    assert disc_lower_witness(1, 1) == pytest.approx(1 / (2 * math.pi))
    ms = [64, 128, 256, 512]
    assert loglog_slope(ms, [disc_lower_witness(1, m) for m in ms]) == pytest.approx(-2, abs=0.05)
    assert disc_lower_witness(1, 512) == pytest.approx(math.pi / (6 * 512 ** 2), rel=1e-3)


def test_prec_upper_bound():
    assert prec_upper_bound(1, HALF) == pytest.approx(1.953e-3, abs=1e-6)
    assert prec_upper_bound(0, HALF) == 0
    assert prec_upper_bound(2, PrecisionSystem.geometric(1.0, 0.01, 10)) == pytest.approx(0.04)
    assert prec_upper_bound(1, EXACT) == 0


def test_general_bounds():
    lower, upper = general_disc_bounds(1, 1, 1, 4)
    assert lower == pytest.approx(0.125)
    assert upper == pytest.approx(0.25)
    assert general_disc_error(Product(), build_grid(1, 4)) == pytest.approx(0.125)
    assert general_disc_error(ConstantY(3), build_grid(2, 4)) == pytest.approx(0, abs=1e-15)
    assert general_disc_bounds(3, 0, 2, 16)[1] == 0
    lower, upper = general_disc_bounds(1, math.sqrt(2), 2, 16)
    assert upper == pytest.approx(0.5)
    assert lower == pytest.approx(0.25 - 0.375 ** 2)
    assert lower < upper
    with pytest.raises(ValueError):
        general_disc_bounds(1, 1, 2, 10)

    lower, upper = general_prec_bounds(1.0, HALF)
    # halfway between two binary16 neighbours in (0.5, 1)
    y = 0.5 + 3 * 2.0 ** -12
    err = general_prec_error(ConstantY(y), build_grid(1, 8), HALF)
    assert err == pytest.approx(2.0 ** -12)
    assert lower <= err <= upper


def test_aliasing_demo():
    for m in (8, 16, 32):
        for omega in (1, 2, 3):
            assert aliasing_demo(1.0, omega, build_grid(1, m)) >= 0.25
    assert aliasing_demo(1.0, 1, build_grid(1, 8)) == pytest.approx(0.5)
    assert aliasing_demo(0.0, 1, build_grid(1, 8)) == 0
    grid = build_grid(1, 16)
    assert aliasing_demo(10.0, 2, grid) == pytest.approx(10 * aliasing_demo(1.0, 2, grid), abs=1e-10)
    with pytest.raises(ValueError):
        aliasing_demo(1.0, 1, build_grid(2, 8))


def test_bounds_sweep_product_has_no_violations():
    config = SweepConfig(d_values=(1, 2, 3), m_values=(4, 8, 16), functions=("product",))
    reports = bounds_sweep(config)
    assert len(reports) == 9
    assert [(r.d, r.m) for r in reports] == [(d, m) for d in (1, 2, 3) for m in (4, 8, 16)]
    for r in reports:
        assert r.n == r.m ** r.d
        assert r.in_class
        assert r.violation == ""
        assert r.disc_err <= r.disc_upper
        assert r.prec_err <= r.prec_upper
        assert min(r.disc_err, r.prec_err, r.disc_lower_witness, r.prec_lower_witness) >= 0


def test_bounds_sweep_all_functions_in_parallel():
    config = SweepConfig(d_values=(1,), m_values=(8, 16), omegas=(1, 2), functions=("product", "constant",
                                                                                 "multitone", "alias"))
    serial = bounds_sweep(config)
    parallel = bounds_sweep(config, workers=4)
    assert [r.row() for r in serial] == [r.row() for r in parallel]
    assert {r.violation for r in serial} == {""}
    alias = [r for r in serial if r.fn == "alias"]
    assert len(alias) == 4
    assert all(r.disc_err >= 0.25 for r in alias)


def test_bounds_sweep_empty_config():
    assert bounds_sweep(SweepConfig(d_values=())) == []


def test_fp8_precision_error_exceeds_half():
    config = SweepConfig(d_values=(1, 2), m_values=(8, 16), systems=("half", "fp8clip"))
    reports = bounds_sweep(config)
    half = [r for r in reports if r.sys == "half"]
    fp8 = [r for r in reports if r.sys == "fp8clip"]
    assert len(half) == len(fp8) == 4
    for h, f in zip(half, fp8):
        assert (h.d, h.m) == (f.d, f.m)
        assert f.prec_err > h.prec_err


def test_out_of_class_rows_are_not_flagged():
    config = SweepConfig(d_values=(1,), m_values=(8,), functions=("constant",), constant_y=1e5)
    report = evaluate_row(1, 8, 0, "half", "constant", config)
    assert not report.in_class
    assert report.violation == ""
    assert list(report.to_dict()) == REPORT_COLUMNS


def test_sweep_config_validation():
    with pytest.raises(ValueError):
        SweepConfig(functions=("gaussian",))
    with pytest.raises(ValueError):
        SweepConfig(d_values=(1, 2), functions=("alias",))
    with pytest.raises(ValueError):
        SweepConfig(systems=("bf16",))
