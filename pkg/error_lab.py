"""
Discretization and precision error functionals and the theoretical bounds they are compared against.

    Disc(f, omega) = | int f(x) phi_omega(x) dx - sum_j f(xi_j) phi_omega(xi_j) / n |
    Prec(f, omega) = | sum_j f(xi_j) phi_omega(xi_j) / n - sum_j q(f(xi_j)) q(phi_omega(xi_j)) / n |

Sums are accumulated with math.fsum so that the functionals themselves carry no summation error.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from grid_field import AliasSine, ConstantY, MultiTone, Product, build_grid
from precision_sim import PrecisionSystem, covers, parse_token, quantize, quantize_complex, relative_epsilon, \
    worst_midpoint
from spectral import basis_on_grid
from utils import ordered_map

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["d", "m", "n", "omega", "M", "L", "sys", "disc_err", "disc_upper", "disc_lower_witness",
                  "prec_err", "prec_upper", "prec_lower_witness", "fn", "in_class", "violation"]

# reference quadrature for functions without a closed-form Fourier integral
RICHARDSON_BASE = 16  # coarsest reference grid is 16x the target m
REFERENCE_MARGIN = 100.0  # reference error must sit this far below the measured gap


@dataclass(frozen=True)
class BoundConstants:
    c1: float = 1.0  # lower-bound constant, reported only
    c2: float = 2.0
    c: float = 4.0
    general_disc: float = 1.0  # L sqrt(d) n^{-1/d}
    general_prec_lower: float = 0.25  # rho M / 4
    general_prec_upper: float = 1.0  # rho M


@dataclass(frozen=True)
class ErrorReport:
    d: int
    m: int
    n: int
    omega: tuple
    M: float
    L: float
    sys: str
    disc_err: float
    disc_upper: float
    disc_lower_witness: float
    prec_err: float
    prec_upper: float
    prec_lower_witness: float
    fn: str = ""
    in_class: bool = True
    violation: str = ""

    def row(self):
        return [self.d, self.m, self.n, " ".join(str(w) for w in self.omega), self.M, self.L, self.sys,
                self.disc_err, self.disc_upper, self.disc_lower_witness, self.prec_err, self.prec_upper,
                self.prec_lower_witness, self.fn, int(self.in_class), self.violation]

    def to_dict(self):
        return dict(zip(REPORT_COLUMNS, self.row()))


def _as_omega(omega, d):
    """An integer k stands for (k, 0, ..., 0)."""
    if np.ndim(omega) == 0:
        out = np.zeros(d, dtype=np.int64)
        out[0] = int(omega)
        return out
    out = np.asarray(omega, dtype=np.int64)
    if out.shape != (d,):
        raise ValueError("omega %s does not have %i components" % (tuple(out), d))
    return out


def _fsum_complex(z):
    z = np.asarray(z).ravel()
    return complex(math.fsum(z.real), math.fsum(z.imag))


def riemann_sum(values, grid, omega):
    """sum_j v(xi_j) phi_omega(xi_j) / n"""
    phi = basis_on_grid(grid, _as_omega(omega, grid.d)[None, :])[:, 0]
    return _fsum_complex(values * phi) / grid.n


def reference_integral(f, d, m, omega, budget):
    """
    Richardson-extrapolated Riemann reference for int f phi_omega: R(k) = 2 S(2k) - S(k), evaluated at
    k = 16m and 32m. Returns (value, error estimate |R(32m) - R(16m)|). Needs (64m)^d <= budget points.
    """
    if budget is None:
        raise ValueError("%s has no closed-form Fourier integral and no reference quadrature budget" % f.name)
    finest = 4 * RICHARDSON_BASE * m
    if finest ** d > budget:
        raise ValueError("reference quadrature needs %i points, budget is %i" % (finest ** d, budget))
    sums = {}
    for k in (RICHARDSON_BASE * m, 2 * RICHARDSON_BASE * m, finest):
        g = build_grid(d, k)
        sums[k] = riemann_sum(f.evaluate(g.anchors), g, omega)
    k1, k2, k3 = sorted(sums)
    r1 = 2 * sums[k2] - sums[k1]
    r2 = 2 * sums[k3] - sums[k2]
    return r2, abs(r2 - r1)


def _integral(f, grid, omega):
    exact = f.fourier_integral(_as_omega(omega, grid.d))
    if exact is not None:
        return exact, 0.0
    return reference_integral(f, grid.d, grid.m, omega, getattr(f, "quadrature_budget", None))


def disc_error(f, grid, omega, part="complex"):
    """
    Discretization error at frequency omega. part="cos"/"sin" measures only the real/imaginary
    component gap.
    """
    if part not in ("complex", "cos", "sin"):
        raise ValueError('part must be "complex", "cos" or "sin", got %r' % part)
    integral, ref_err = _integral(f, grid, omega)
    gap = integral - riemann_sum(f.values_on(grid), grid, omega)
    res = {"complex": abs(gap), "cos": abs(gap.real), "sin": abs(gap.imag)}[part]
    if ref_err > 1e-12 and ref_err * REFERENCE_MARGIN > res:
        raise ValueError("reference quadrature error %.3g is not %gx below the measured gap %.3g"
                         % (ref_err, REFERENCE_MARGIN, res))
    return float(res)


def prec_error(f, grid, sys, omega):
    """Gap between the exact discrete sum and the one with both factors quantized by `sys`."""
    if sys.is_exact:
        return 0.0
    v = f.values_on(grid)
    phi = basis_on_grid(grid, _as_omega(omega, grid.d)[None, :])[:, 0]
    exact = _fsum_complex(v * phi)
    rounded = _fsum_complex(quantize(sys, v) * quantize_complex(sys, phi))
    return float(abs(exact - rounded) / grid.n)


def disc_upper_bound(M, L, d, n, omega, consts=BoundConstants()):
    """c2 sqrt(d) (M |omega| + L) n^{-1/d}"""
    norm = float(np.linalg.norm(np.atleast_1d(omega)))
    return consts.c2 * math.sqrt(d) * (M * norm + L) * n ** (-1.0 / d)


def witness_riemann_sum(d, m):
    """sum over anchors of prod_k x_k sin(2 pi x_k), divided by n (direct evaluation)."""
    grid = build_grid(d, m)
    x = grid.anchors
    return math.fsum(np.prod(x * np.sin(2 * np.pi * x), axis=1)) / grid.n


def disc_lower_witness(d, m):
    """
    Sine-part gap of the witness v(x) = x_1 ... x_d at omega = 1:
    |(-1/(2 pi))^d - m^{-2d} (-(m/2) cot(pi/m))^d|
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    integral = (-1.0 / (2 * math.pi)) ** d
    if m == 1:
        return abs(integral - witness_riemann_sum(d, m))
    closed = m ** (-2.0 * d) * (-(m / 2.0) / math.tan(math.pi / m)) ** d
    return abs(integral - closed)


def prec_upper_bound(M, sys, consts=BoundConstants()):
    """c * relative_epsilon * M"""
    if sys.is_exact:
        return 0.0
    return consts.c * relative_epsilon(sys) * M


def general_disc_error(f, grid):
    """omega-free gap |int f - sum_j f(xi_j) / n|."""
    return disc_error(f, grid, np.zeros(grid.d, dtype=np.int64))


def general_disc_bounds(M, L, d, n, consts=BoundConstants()):
    """(lower, upper): the product witness gap |2^{-d} - ((m-1)/(2m))^d| and L sqrt(d) n^{-1/d}."""
    m = int(round(n ** (1.0 / d)))
    if m ** d != n:
        raise ValueError("n=%i is not a %i-th power" % (n, d))
    lower = general_disc_error(Product(), build_grid(d, m))
    upper = consts.general_disc * L * math.sqrt(d) * n ** (-1.0 / d)
    return lower, upper


def general_prec_error(f, grid, sys):
    """|sum_j f(xi_j)/n - sum_j q(f(xi_j))/n|"""
    if sys.is_exact:
        return 0.0
    v = f.values_on(grid)
    return abs(math.fsum(v) - math.fsum(quantize(sys, v))) / grid.n


def general_prec_bounds(M, sys, consts=BoundConstants()):
    """(rho M / 4, rho M)"""
    rho = relative_epsilon(sys)
    return consts.general_prec_lower * rho * M, consts.general_prec_upper * rho * M


def prec_lower_witness(sys, M, grid):
    """prec_error of ConstantY(y) at omega = 0, y the worst rounding midpoint in (M/2, M)."""
    if sys.is_exact or M <= 0:
        return 0.0
    y, _ = worst_midpoint(sys, M)
    return prec_error(ConstantY(y), grid, sys, np.zeros(grid.d, dtype=np.int64))


def aliasing_demo(M, omega, grid):
    """disc_error of M sin(2 pi (m + omega) x) at frequency omega on a 1-d grid."""
    if grid.d != 1:
        raise ValueError("the aliasing demo is defined for d=1 only (got d=%i)" % grid.d)
    return disc_error(AliasSine(M, grid.m + int(omega)), grid, omega)


FUNCTIONS = ("product", "constant", "multitone", "alias")


@dataclass(frozen=True)
class SweepConfig:
    d_values: tuple = (1, 2, 3)
    m_values: tuple = (4, 8, 16)
    omegas: tuple = (1,)
    systems: tuple = ("half",)
    functions: tuple = ("product",)
    consts: BoundConstants = field(default_factory=lambda: BoundConstants(c2=4.0))
    constant_y: float = 0.7
    tones: int = 5
    seed: int = 0

    def __post_init__(self):
        for fn in self.functions:
            if fn not in FUNCTIONS:
                raise ValueError("unknown test function %r. Options are: %s" % (fn, ", ".join(FUNCTIONS)))
        if "alias" in self.functions and any(d != 1 for d in self.d_values):
            raise ValueError("the aliasing demo is defined for d=1 only")
        for d in self.d_values:
            for m in self.m_values:
                build_grid(d, m)
        for token in self.systems:
            if not isinstance(token, PrecisionSystem):
                parse_token(token)

    def rows(self):
        return list(itertools.product(self.d_values, self.m_values, self.omegas, self.systems, self.functions))


def make_function(name, d, m, omega, config):
    if name == "product":
        return Product()
    if name == "constant":
        return ConstantY(config.constant_y)
    if name == "multitone":
        # unit amplitude cap: amplitudes normalized to sum to 1
        f = MultiTone.random(config.seed + d, d=d, max_freq=10, tones=config.tones)
        total = sum(f.amps)
        return MultiTone(tuple(a / total for a in f.amps), f.phases, f.freqs)
    if name == "alias":
        return AliasSine(1.0, m + int(omega))
    raise ValueError("unknown test function %r" % name)


def evaluate_row(d, m, omega, sys, fn, config):
    sys = sys if isinstance(sys, PrecisionSystem) else parse_token(sys)
    grid = build_grid(d, m)
    w = _as_omega(omega, d)
    f = make_function(fn, d, m, omega, config)
    M, L = f.bound_M(d), f.lipschitz_L(d)
    in_class = covers(sys, M)
    report = ErrorReport(d=d, m=m, n=grid.n, omega=tuple(int(x) for x in w), M=M, L=L, sys=sys.token,
                         disc_err=disc_error(f, grid, w),
                         disc_upper=disc_upper_bound(M, L, d, grid.n, w, config.consts),
                         disc_lower_witness=disc_lower_witness(d, m),
                         prec_err=prec_error(f, grid, sys, w),
                         prec_upper=prec_upper_bound(M, sys, config.consts),
                         prec_lower_witness=prec_lower_witness(sys, M, grid),
                         fn=fn, in_class=in_class)
    violation = []
    if report.disc_err > report.disc_upper:
        violation.append("disc")
    if in_class and report.prec_err > report.prec_upper:
        violation.append("prec")
    if violation:
        report = replace(report, violation="+".join(violation))
        logger.warning("bound violation (%s): %s", report.violation, report)
    elif not in_class:
        logger.warning("%s does not cover M=%g; precision bound not asserted for d=%i m=%i %s",
                       sys.token, M, d, m, fn)
    else:
        logger.debug("d=%i m=%i omega=%s %s %s ok", d, m, report.omega, sys.token, fn)
    return report


def bounds_sweep(config, workers=1):
    """One ErrorReport per (d, m, omega, sys, fn) in config order."""
    return ordered_map(lambda row: evaluate_row(*row, config), config.rows(), workers)
