"""
Fourier basis, forward/inverse discrete Fourier transforms under a precision system, mode truncation.

Conventions:
    forward   X(omega) = (1/n) sum_j v(xi_j) exp(+2 pi i <omega, xi_j>)
    inverse   v(xi_j)  = sum_omega X(omega) exp(-2 pi i <omega, xi_j>)
Coefficients are stored over the index set {0..m-1}^d; index k stands for the signed frequency
k if k <= m/2 - 1 and k - m otherwise (the numpy fftfreq convention).

Quantized transforms accumulate sequentially in anchor (forward) or mode (inverse) order, vectorized
over frequencies / anchors and any leading batch axes. The 1/n cell weight is applied to each term
before it is accumulated.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from grid_field import ScalarField, build_grid
from precision_sim import NonFiniteError, PrecisionSystem, complex_multiply, round_array, round_complex_array

logger = logging.getLogger(__name__)


def signed_frequencies(m):
    """Signed frequency of every index 0..m-1."""
    return np.rint(np.fft.fftfreq(m, d=1.0 / m)).astype(np.int64)


@dataclass(frozen=True)
class ModeMask:
    """Set of kept signed frequency vectors. The zero frequency is always kept."""
    keep: frozenset

    def __post_init__(self):
        keep = frozenset(tuple(int(w) for w in omega) for omega in self.keep)
        if not keep:
            raise ValueError("empty mode mask (the zero frequency must be kept)")
        dims = {len(omega) for omega in keep}
        if len(dims) != 1:
            raise ValueError("mode mask mixes frequency vectors of different lengths")
        keep = keep | {(0,) * dims.pop()}
        object.__setattr__(self, "keep", keep)

    @classmethod
    def cutoff(cls, grid, K):
        """{omega : max_k |omega_k| < K}"""
        if K < 1:
            raise ValueError("mode cutoff K must be >= 1, got %r" % K)
        f = signed_frequencies(grid.m)
        kept = f[np.abs(f) < K]
        grids = np.meshgrid(*([kept] * grid.d), indexing="ij")
        return cls(frozenset(zip(*(g.ravel() for g in grids))))

    @classmethod
    def all(cls, grid):
        return cls.cutoff(grid, grid.m)

    @classmethod
    def dc_only(cls, d):
        return cls(frozenset({(0,) * d}))

    def signed(self, grid):
        """(K, d) kept signed frequencies, sorted by their index in row-major order."""
        idx = self.indices(grid)
        return signed_frequencies(grid.m)[idx]

    def indices(self, grid):
        """(K, d) array of kept coefficient indices in {0..m-1}, row-major order."""
        omegas = np.array(sorted(self.keep), dtype=np.int64).reshape(len(self.keep), -1)
        if omegas.shape[1] != grid.d:
            raise ValueError("mode mask is %i-dimensional, grid is %i-dimensional" % (omegas.shape[1], grid.d))
        if np.any(np.abs(omegas) > grid.m // 2):
            raise ValueError("mode mask holds frequencies beyond m/2 = %i" % (grid.m // 2))
        idx = np.mod(omegas, grid.m)
        if len(np.unique(idx, axis=0)) != len(idx):
            raise ValueError("mode mask holds frequencies that alias on an m=%i grid" % grid.m)
        order = np.lexsort(idx.T[::-1])
        return idx[order]

    def bool_array(self, grid):
        out = np.zeros(grid.shape, dtype=bool)
        out[tuple(self.indices(grid).T)] = True
        return out


@dataclass(frozen=True, eq=False)
class Spectrum:
    grid: object
    coeffs: np.ndarray  # complex, shape grid.shape
    precision_used: PrecisionSystem

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if coeffs.shape != self.grid.shape:
            coeffs = coeffs.reshape(self.grid.shape)
        object.__setattr__(self, "coeffs", coeffs)

    def __getitem__(self, omega):
        """Coefficient at a (signed) frequency vector."""
        return complex(self.coeffs[tuple(np.mod(np.atleast_1d(omega), self.grid.m))])

    def energy(self):
        return float(np.sum(np.abs(self.coeffs) ** 2))


def basis_eval(omega, x):
    """exp(2 pi i <omega, x>)"""
    return complex(np.exp(2j * np.pi * np.dot(np.atleast_1d(omega), np.atleast_1d(x))))


QUARTER_TURNS = np.array([1, 1j, -1, -1j], dtype=np.complex128)


def _roots(m):
    """exp(2 pi i k / m) for k < m, exact at multiples of a quarter turn and conjugate-symmetric."""
    k = np.arange(m)
    roots = np.exp(2j * np.pi * k / m)
    half = k[1:(m + 1) // 2]
    roots[m - half] = np.conj(roots[half])
    quarter = (4 * k) % m == 0
    roots[quarter] = QUARTER_TURNS[(4 * k[quarter] // m) % 4]
    return roots


def basis_on_grid(grid, omegas):
    """(n, K) values of phi_omega at the anchors, through integer phases <omega, i> mod m."""
    phase = np.mod(grid.indices @ np.asarray(omegas, dtype=np.int64).T, grid.m)
    return _roots(grid.m)[phase]


def dft_modes(values, grid, modes, sys, stage="fft"):
    """
    Forward transform of the last d axes of `values` restricted to the (K, d) frequencies `modes`.
    Returns shape values.shape[:-d] + (K,).
    """
    modes = np.asarray(modes, dtype=np.int64).reshape(-1, grid.d)
    values = np.asarray(values, dtype=np.float64)
    batch = values.shape[:values.ndim - grid.d]
    if values.shape[len(batch):] != grid.shape:
        raise ValueError("values of shape %s do not end in the grid shape %s" % (values.shape, grid.shape))
    if sys.is_exact:
        full = np.fft.ifftn(values, axes=tuple(range(len(batch), values.ndim)))
        idx = np.mod(modes, grid.m)
        return full[(Ellipsis,) + tuple(idx.T)]

    flat = values.reshape(batch + (grid.n,))
    qv = round_array(sys, flat)
    qb = round_complex_array(sys, basis_on_grid(grid, modes))  # (n, K)
    acc = np.zeros(batch + (len(modes),), dtype=np.complex128)
    weight = 1.0 / grid.n
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(grid.n):
            term = complex_multiply(sys, qv[..., j, None], qb[j])
            term = round_complex_array(sys, term * weight)
            acc = round_complex_array(sys, acc + term)
    _check_modes(acc, modes, stage)
    return acc


def idft_modes(coeffs, grid, modes, sys, stage="ifft"):
    """
    Inverse transform of coefficients given on the (K, d) frequencies `modes` (others zero).
    `coeffs` has shape batch + (K,); returns complex batch + grid.shape.
    """
    modes = np.asarray(modes, dtype=np.int64).reshape(-1, grid.d)
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    batch = coeffs.shape[:-1]
    if coeffs.shape[-1] != len(modes):
        raise ValueError("%i coefficients for %i modes" % (coeffs.shape[-1], len(modes)))
    if sys.is_exact:
        full = np.zeros(batch + grid.shape, dtype=np.complex128)
        full[(Ellipsis,) + tuple(np.mod(modes, grid.m).T)] = coeffs
        return np.fft.fftn(full, axes=tuple(range(len(batch), len(batch) + grid.d)))

    qc = round_complex_array(sys, coeffs)
    qb = round_complex_array(sys, np.conj(basis_on_grid(grid, modes)))  # (n, K)
    acc = np.zeros(batch + (grid.n,), dtype=np.complex128)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(len(modes)):
            term = complex_multiply(sys, qc[..., k, None], qb[:, k])
            acc = round_complex_array(sys, acc + term)
            if not np.all(np.isfinite(acc)):
                raise NonFiniteError(stage, omega=modes[k])
    return acc.reshape(batch + grid.shape)


def _check_modes(acc, modes, stage):
    bad = ~np.isfinite(acc)
    if bad.any():
        k = int(np.flatnonzero(bad.reshape(-1, len(modes)).any(axis=0))[0])
        logger.debug("non-finite coefficient at omega=%s (stage %s)", tuple(modes[k]), stage)
        raise NonFiniteError(stage, omega=modes[k])


def dft(field, sys, mask=None):
    """
    Normalized forward transform of a ScalarField. Under a non-exact system only the modes in
    `mask` are computed (default: all); the others are left at 0.
    """
    grid = field.grid
    if not np.all(np.isfinite(field.values)):
        raise ValueError("dft expects a finite field")
    if mask is None and sys.is_exact:
        return Spectrum(grid, _direct_dft(field.as_tensor()), sys)
    mask = mask if mask is not None else ModeMask.all(grid)
    idx = mask.indices(grid)
    coeffs = np.zeros(grid.shape, dtype=np.complex128)
    coeffs[tuple(idx.T)] = dft_modes(field.as_tensor(), grid, signed_frequencies(grid.m)[idx], sys)
    return Spectrum(grid, coeffs, sys)


def _direct_dft(tensor):
    """Direct sum, factorized over axes: applies the m x m transform matrix along each axis."""
    m = tensor.shape[0]
    F = _roots(m)[np.mod(np.outer(np.arange(m), np.arange(m)), m)] / m
    out = tensor.astype(np.complex128)
    for axis in range(tensor.ndim):
        out = np.moveaxis(np.tensordot(F, out, axes=([1], [axis])), 0, axis)
    return out


def idft(spec, sys):
    """Inverse transform; returns the real part as a ScalarField."""
    grid = spec.grid
    if sys.is_exact:
        values = np.fft.fftn(spec.coeffs)
    else:
        nz = np.argwhere(spec.coeffs != 0)
        if len(nz) == 0:
            values = np.zeros(grid.shape, dtype=np.complex128)
        else:
            modes = signed_frequencies(grid.m)[nz]
            values = idft_modes(spec.coeffs[tuple(nz.T)], grid, modes, sys)
    return ScalarField(grid, np.real(values).reshape(-1))


def truncate(spec, mask):
    keep = mask.bool_array(spec.grid)
    return Spectrum(spec.grid, np.where(keep, spec.coeffs, 0), spec.precision_used)


def _is_power_of_two(m):
    return m >= 1 and (m & (m - 1)) == 0


def _bit_reversal(m):
    bits = m.bit_length() - 1
    idx = np.arange(m)
    rev = np.zeros(m, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_axis(x, axis):
    """Unnormalized radix-2 decimation-in-time transform with kernel exp(+2 pi i k j / m) along `axis`."""
    x = np.moveaxis(x, axis, -1)
    m = x.shape[-1]
    x = x[..., _bit_reversal(m)]
    half = 1
    while half < m:
        blocks = x.reshape(x.shape[:-1] + (m // (2 * half), 2, half))
        w = np.exp(1j * np.pi * np.arange(half) / half)
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * w
        x = np.stack((even + odd, even - odd), axis=-2).reshape(x.shape)
        half *= 2
    return np.moveaxis(x, -1, axis)


def fft_fast(field):
    """Exact forward transform by radix-2 FFT applied axis by axis; m must be a power of two."""
    grid = field.grid
    if not _is_power_of_two(grid.m):
        raise ValueError("fft_fast needs m to be a power of two (got m=%i); use dft for other sizes" % grid.m)
    out = field.as_tensor().astype(np.complex128)
    for axis in range(grid.d):
        out = _fft_axis(out, axis)
    return Spectrum(grid, out / grid.n, PrecisionSystem.exact())


def write_spectrum_csv(spec, path):
    f_signed = signed_frequencies(spec.grid.m)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["omega_%i" % (k + 1) for k in range(spec.grid.d)] + ["re", "im"])
        for idx in spec.grid.indices:
            c = spec.coeffs[tuple(idx)]
            writer.writerow([int(f_signed[i]) for i in idx] + [repr(float(c.real)), repr(float(c.imag))])


def read_spectrum_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        d = len(header) - 2
        if d < 1 or header[-2:] != ["re", "im"]:
            raise ValueError("%s: expected header omega_1,...,omega_d,re,im, got %r" % (path, header))
        rows = [row for row in reader if row]
    m = int(round(len(rows) ** (1.0 / d)))
    grid = build_grid(d, m)
    if len(rows) != grid.n:
        raise ValueError("%s: %i rows is not a full %i-dimensional spectrum" % (path, len(rows), d))
    coeffs = np.zeros(grid.shape, dtype=np.complex128)
    for row in rows:
        idx = tuple(np.mod([int(w) for w in row[:d]], m))
        coeffs[idx] = complex(float(row[d]), float(row[d + 1]))
    return Spectrum(grid, coeffs, PrecisionSystem.exact())
