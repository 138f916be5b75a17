"""
Uniform hypercube discretization of [0,1]^d and test functions sampled onto it.

Cell j is the hypercube of side 1/m whose vertex closest to the origin is the anchor
xi_j = (i_1/m, ..., i_d/m), i_k in {0, ..., m-1}. Anchors are enumerated in row-major order.
"""

import csv
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np

logger = logging.getLogger(__name__)

MAX_CELLS = 2 ** 24


@dataclass(frozen=True)
class Grid:
    d: int
    m: int

    @property
    def n(self):
        return self.m ** self.d

    @property
    def shape(self):
        return (self.m,) * self.d

    @property
    def cell_volume(self):
        return 1.0 / self.n

    @cached_property
    def indices(self):
        """(n, d) integer lattice coordinates (i_1, ..., i_d), row-major."""
        return np.indices(self.shape).reshape(self.d, -1).T

    @cached_property
    def anchors(self):
        return self.indices / self.m


def build_grid(d, m):
    if d < 1 or m < 1:
        raise ValueError("grid needs d >= 1 and m >= 1, got d=%r, m=%r" % (d, m))
    if m ** d > MAX_CELLS:
        raise OverflowError("grid m^d = %i^%i exceeds the cell budget %i" % (m, d, MAX_CELLS))
    return Grid(int(d), int(m))


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray  # length n, row-major over anchors
    bound_M: float = None
    lipschitz_L: float = None
    lipschitz_estimated: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(values) != self.grid.n:
            raise ValueError("field has %i values, grid has %i cells" % (len(values), self.grid.n))
        if self.bound_M is not None and values.size and np.max(np.abs(values)) > self.bound_M * (1 + 1e-12):
            raise ValueError("field exceeds its bound M=%g (max |v| = %g)" % (self.bound_M, np.max(np.abs(values))))
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def as_tensor(self):
        return self.values.reshape(self.grid.shape)


def _integer_phase(indices, omega, m):
    """2*pi*<omega, i>/m reduced mod 2*pi through integer arithmetic (exact aliasing)."""
    k = np.mod(indices @ np.asarray(omega, dtype=np.int64), m)
    return 2 * np.pi * k / m


def _tone_integral(omega, freq):
    """Integral over [0,1]^d of exp(2 pi i <freq, x>) exp(2 pi i <omega, x>): 1 iff omega = -freq."""
    return 1.0 if np.all(np.asarray(omega) + np.asarray(freq) == 0) else 0.0


class TestFunction:
    """
    Base class of the functions sampled onto grids. Subclasses provide `evaluate` on arbitrary
    points and, when known, the analytic bound M, Lipschitz constant L and Fourier integral
    int_{[0,1]^d} f(x) exp(2 pi i <omega, x>) dx.
    """
    name = "custom"
    __test__ = False  # not a pytest class

    def evaluate(self, points):
        raise NotImplementedError("To be implemented by subclasses")

    def values_on(self, grid):
        return self.evaluate(grid.anchors)

    def bound_M(self, d):
        return None

    def lipschitz_L(self, d):
        return None

    def fourier_integral(self, omega):
        """None when no closed form is available."""
        return None


class Product(TestFunction):
    """v(x) = x_1 ... x_d"""
    name = "product"

    def evaluate(self, points):
        return np.prod(points, axis=1)

    def bound_M(self, d):
        return 1.0

    def lipschitz_L(self, d):
        return float(np.sqrt(d))

    def fourier_integral(self, omega):
        res = 1.0 + 0j
        for w in np.atleast_1d(omega):
            res *= 0.5 if w == 0 else -1j / (2 * np.pi * w)
        return complex(res)


@dataclass(frozen=True)
class ConstantY(TestFunction):
    y: float
    name = "constant"

    def evaluate(self, points):
        return np.full(len(points), float(self.y))

    def bound_M(self, d):
        return abs(float(self.y))

    def lipschitz_L(self, d):
        return 0.0

    def fourier_integral(self, omega):
        return complex(self.y) if np.all(np.asarray(omega) == 0) else 0j


@dataclass(frozen=True)
class AliasSine(TestFunction):
    """v(x) = M sin(2 pi freq x_1)"""
    M: float
    freq: int
    name = "alias"

    def evaluate(self, points):
        return self.M * np.sin(2 * np.pi * self.freq * points[:, 0])

    def values_on(self, grid):
        freq = np.zeros(grid.d, dtype=np.int64)
        freq[0] = self.freq
        return self.M * np.sin(_integer_phase(grid.indices, freq, grid.m))

    def bound_M(self, d):
        return abs(self.M)

    def lipschitz_L(self, d):
        return 2 * np.pi * abs(self.freq) * abs(self.M)

    def fourier_integral(self, omega):
        omega = np.atleast_1d(omega)
        freq = np.zeros(len(omega), dtype=np.int64)
        freq[0] = self.freq
        # sin = (e^{i t} - e^{-i t}) / 2i
        return complex(self.M * (_tone_integral(omega, freq) - _tone_integral(omega, -freq)) / 2j)


@dataclass(frozen=True)
class MultiTone(TestFunction):
    """v(x) = sum_k a_k cos(2 pi <omega_k, x> + phi_k)"""
    amps: tuple
    phases: tuple
    freqs: tuple  # integer frequency vectors
    name = "multitone"

    def __post_init__(self):
        if not (len(self.amps) == len(self.phases) == len(self.freqs)):
            raise ValueError("MultiTone needs one amplitude, phase and frequency per tone")

    @property
    def max_freq(self):
        return max((int(np.max(np.abs(f))) for f in self.freqs), default=0)

    @classmethod
    def random(cls, rng, d=1, max_freq=10, scale=1.0, decay=(0.6, 0.8), jitter=(0.75, 1.25), tones=None):
        """
        Exponentially decaying tones 1..max_freq: a_k = scale * r^k * u_k with r ~ U(decay) drawn once
        and u_k ~ U(jitter) per tone, uniform phases. For d > 1 tone k points along a random axis.
        `tones` draws that many distinct frequencies instead of all of 1..max_freq.
        """
        rng = np.random.default_rng(rng)
        ks = np.arange(1, max_freq + 1)
        if tones is not None:
            ks = np.sort(rng.choice(ks, size=min(tones, len(ks)), replace=False))
        r = rng.uniform(*decay)
        amps = scale * r ** ks * rng.uniform(*jitter, size=len(ks))
        phases = rng.uniform(0, 2 * np.pi, size=len(ks))
        freqs = []
        for k in ks:
            f = np.zeros(d, dtype=np.int64)
            f[rng.integers(d) if d > 1 else 0] = k
            freqs.append(tuple(int(x) for x in f))
        return cls(tuple(float(a) for a in amps), tuple(float(p) for p in phases), tuple(freqs))

    def evaluate(self, points):
        v = np.zeros(len(points))
        for a, p, f in zip(self.amps, self.phases, self.freqs):
            v += a * np.cos(2 * np.pi * (points @ np.asarray(f, dtype=np.float64)) + p)
        return v

    def values_on(self, grid):
        v = np.zeros(grid.n)
        for a, p, f in zip(self.amps, self.phases, self.freqs):
            v += a * np.cos(_integer_phase(grid.indices, f, grid.m) + p)
        return v

    def bound_M(self, d):
        return float(np.sum(np.abs(self.amps)))

    def lipschitz_L(self, d):
        return float(2 * np.pi * sum(abs(a) * np.linalg.norm(f) for a, f in zip(self.amps, self.freqs)))

    def fourier_integral(self, omega):
        omega = np.atleast_1d(omega)
        res = 0j
        for a, p, f in zip(self.amps, self.phases, self.freqs):
            f = np.asarray(f)
            res += a / 2 * (np.exp(1j * p) * _tone_integral(omega, f) + np.exp(-1j * p) * _tone_integral(omega, -f))
        return complex(res)


@dataclass(frozen=True)
class Custom(TestFunction):
    """
    Wraps a vectorized callable fn(points (N, d)) -> (N,). Without analytic integrals, Fourier
    integrals come from reference quadrature limited to `quadrature_budget` evaluation points.
    """
    fn: object
    M: float = None
    L: float = None
    quadrature_budget: int = None
    name = "custom"

    def evaluate(self, points):
        values = np.asarray(self.fn(points), dtype=np.float64).reshape(-1)
        if len(values) != len(points):
            raise ValueError("custom function returned %i values for %i points" % (len(values), len(points)))
        bad = np.flatnonzero(~np.isfinite(values))
        if len(bad):
            raise ValueError("custom function is not finite at anchor index %i (x=%s)"
                             % (bad[0], tuple(points[bad[0]])))
        return values

    def bound_M(self, d):
        return self.M

    def lipschitz_L(self, d):
        return self.L


def sample(f, grid):
    values = f.values_on(grid)
    L = f.lipschitz_L(grid.d)
    field = ScalarField(grid, values, bound_M=f.bound_M(grid.d), lipschitz_L=L)
    if L is None:
        field = ScalarField(grid, field.values, bound_M=field.bound_M,
                            lipschitz_L=estimate_lipschitz(field), lipschitz_estimated=True)
        logger.debug("no analytic Lipschitz constant for %s, using the finite-difference lower bound %g",
                     f.name, field.lipschitz_L)
    return field


def estimate_lipschitz(field):
    """
    max over axis-adjacent anchor pairs of |delta value| * m. A lower bound on the true constant.
    """
    v = field.as_tensor()
    best = 0.0
    for axis in range(field.grid.d):
        if field.grid.m > 1:
            best = max(best, float(np.max(np.abs(np.diff(v, axis=axis)))) * field.grid.m)
    return best


def write_field_csv(field, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["d", "m"])
        writer.writerow([field.grid.d, field.grid.m])
        for idx, value in zip(field.grid.indices, field.values):
            writer.writerow([int(i) for i in idx] + [repr(float(value))])


def read_field_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if [h.strip() for h in header] != ["d", "m"]:
            raise ValueError("%s: expected header 'd,m', got %r" % (path, header))
        d, m = (int(x) for x in next(reader))
        grid = build_grid(d, m)
        values = np.zeros(grid.shape)
        seen = set()
        for row in reader:
            if not row:
                continue
            if len(row) != d + 1:
                raise ValueError("%s: expected %i columns per anchor row, got %i" % (path, d + 1, len(row)))
            idx = tuple(int(i) for i in row[:d])
            if any(i < 0 or i >= m for i in idx):
                raise ValueError("%s: anchor index %s outside 0..%i" % (path, idx, m - 1))
            if idx in seen:
                raise ValueError("%s: duplicate anchor row %s" % (path, idx))
            values[idx] = float(row[d])
            seen.add(idx)
    if len(seen) != grid.n:
        raise ValueError("%s: expected %i anchor rows, got %i" % (path, grid.n, len(seen)))
    return ScalarField(grid, values.reshape(-1))
