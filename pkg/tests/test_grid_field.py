import numpy as np
import pytest

from grid_field import (AliasSine, ConstantY, Custom, MultiTone, Product, ScalarField, build_grid,
                        estimate_lipschitz, read_field_csv, sample, write_field_csv)


def test_build_grid():
    g = build_grid(1, 4)
    assert g.anchors.ravel().tolist() == [0, 0.25, 0.5, 0.75]
    g = build_grid(2, 2)
    assert g.n == 4
    assert g.anchors.tolist() == [[0, 0], [0, 0.5], [0.5, 0], [0.5, 0.5]]
    g = build_grid(3, 10)
    assert g.n == 1000
    assert g.cell_volume == pytest.approx(0.001)
    assert g.cell_volume * g.n == pytest.approx(1.0, abs=1e-15)


def test_build_grid_errors():
    with pytest.raises(OverflowError):
        build_grid(2, 2 ** 13)
    with pytest.raises(ValueError):
        build_grid(0, 4)
    with pytest.raises(ValueError):
        build_grid(1, 0)


def test_anchors_are_lower_cell_vertices():
    g = build_grid(3, 5)
    assert len(np.unique(g.anchors, axis=0)) == g.n
    assert np.all((g.anchors >= 0) & (g.anchors < 1))
    assert np.allclose(np.floor(g.anchors * g.m + 1e-9), g.anchors * g.m)


def test_sample_examples():
    assert sample(Product(), build_grid(1, 4)).values.tolist() == [0, 0.25, 0.5, 0.75]
    assert sample(ConstantY(3), build_grid(2, 2)).values.tolist() == [3, 3, 3, 3]
    field = sample(AliasSine(1.0, 5), build_grid(1, 4))
    assert np.allclose(field.values, [0, 1, 0, -1], atol=1e-15)


def test_sample_carries_analytic_constants():
    field = sample(Product(), build_grid(2, 4))
    assert field.bound_M == 1.0
    assert field.lipschitz_L == pytest.approx(np.sqrt(2))
    assert not field.lipschitz_estimated
    c = sample(ConstantY(-2.5), build_grid(1, 3))
    assert (c.bound_M, c.lipschitz_L) == (2.5, 0.0)


def test_sample_is_deterministic():
    f = MultiTone.random(7, d=2, max_freq=5)
    g = build_grid(2, 16)
    assert np.array_equal(sample(f, g).values, sample(f, g).values)
    assert MultiTone.random(7, d=2, max_freq=5) == f


def test_estimate_lipschitz():
    assert estimate_lipschitz(sample(Product(), build_grid(1, 4))) == 1.0
    assert estimate_lipschitz(sample(ConstantY(3), build_grid(3, 4))) == 0.0
    assert estimate_lipschitz(sample(AliasSine(1.0, 5), build_grid(1, 4))) == pytest.approx(4.0)


def test_custom_function():
    f = Custom(lambda x: x[:, 0] ** 2)
    field = sample(f, build_grid(1, 4))
    assert field.lipschitz_estimated
    assert field.lipschitz_L == pytest.approx((0.75 ** 2 - 0.5 ** 2) * 4)
    bad = Custom(lambda x: 1.0 / (x[:, 0] - 0.5))
    with pytest.raises(ValueError, match="anchor index 2"):
        sample(bad, build_grid(1, 4))


def test_multitone_random():
    f = MultiTone.random(3, d=1, max_freq=10, scale=2.0)
    assert len(f.amps) == 10
    assert f.max_freq == 10
    assert all(a > 0 for a in f.amps)
    assert f.amps[-1] < f.amps[0]
    assert f.bound_M(1) == pytest.approx(sum(f.amps))
    g = MultiTone.random(3, d=1, max_freq=10, tones=3)
    assert len(g.freqs) == 3


def test_field_bound_is_checked():
    with pytest.raises(ValueError):
        ScalarField(build_grid(1, 2), [0.0, 2.0], bound_M=1.0)
    with pytest.raises(ValueError):
        ScalarField(build_grid(1, 2), [0.0, 1.0, 2.0])


def test_field_csv_round_trip(tmp_path):
    field = sample(MultiTone.random(1, d=2, max_freq=3), build_grid(2, 6))
    path = tmp_path / "field.csv"
    write_field_csv(field, path)
    assert path.read_text().splitlines()[0] == "d,m"
    back = read_field_csv(path)
    assert back.grid == field.grid
    assert np.array_equal(back.values, field.values)


def test_field_csv_rejects_missing_rows(tmp_path):
    path = tmp_path / "field.csv"
    path.write_text("d,m\n1,4\n0,0.0\n1,1.0\n")
    with pytest.raises(ValueError):
        read_field_csv(path)


@pytest.mark.parametrize("rows", [
    "0,0.0\n1,1.0\n1,2.0\n3,3.0\n",  # duplicate
    "0,0.0\n1,1.0\n-1,2.0\n3,3.0\n",  # negative
    "0,0.0\n1,1.0\n2,2.0\n4,3.0\n",  # past the end
])
def test_field_csv_rejects_bad_indices(tmp_path, rows):
    path = tmp_path / "field.csv"
    path.write_text("d,m\n1,4\n" + rows)
    with pytest.raises(ValueError):
        read_field_csv(path)
