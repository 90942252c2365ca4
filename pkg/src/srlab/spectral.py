"""Real Fourier fields on the torus, fractional Sobolev norms, Laplacian data.

The basis is the real trigonometric family

    e_k(x) = sqrt(2/L) cos(k pi x / L)    k > 0
    e_0(x) = 1 / sqrt(L)
    e_k(x) = sqrt(2/L) sin(k pi x / L)    k < 0

with -Laplacian eigenvalues mu_k = k^2 pi^2 / L^2.  These functions have
fundamental period 2L in x; they are orthonormal for the quadrature inner
product with weight L/n_grid on the uniform grid x_j = 2L j / n_grid covering
one full period.  All physical-space sampling below uses that grid, which
makes projection exact on the cutoff space whenever n_grid >= 2K+1.

The H^s norm is ||phi||_{H^s}^2 = sum_k <k>^{2s} phi_k^2 with the Japanese
bracket <k> = (1 + k^2)^{1/2}.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "TorusSpec",
    "SpectralField",
    "basis_eval",
    "laplacian_eigenvalue",
    "hs_norm",
    "hs_weights",
    "to_physical",
    "from_physical",
    "mean_transverse_split",
    "sup_norm_estimate",
    "batch_to_physical",
    "batch_from_physical",
]


@dataclass(frozen=True)
class TorusSpec:
    """Spectral discretisation: torus length L, cutoff K, physical grid size.

    Modes k in {-K, ..., K}.  ``n_grid`` defaults to max(4K, 8), which
    dealiases cubic nonlinearities (n_grid >= (p+1)K for degree-p drift).
    """

    L: float
    K: int
    n_grid: int = 0

    def __post_init__(self):
        if not (self.L > 0 and np.isfinite(self.L)):
            raise ValueError(f"torus length must be positive, got {self.L}")
        if self.K < 0:
            raise ValueError(f"spectral cutoff must be >= 0, got {self.K}")
        if self.n_grid == 0:
            object.__setattr__(self, "n_grid", max(4 * self.K, 8))
        if self.n_grid < 2 * self.K + 1:
            raise ValueError(
                f"n_grid={self.n_grid} too small for K={self.K} (need >= 2K+1)")

    @property
    def n_modes(self) -> int:
        return 2 * self.K + 1

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Mode indices in storage order, k = -K..K."""
        k = np.arange(-self.K, self.K + 1)
        k.flags.writeable = False
        return k

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """mu_k = k^2 pi^2 / L^2 in storage order."""
        mu = (self.wavenumbers * np.pi / self.L) ** 2
        mu.flags.writeable = False
        return mu

    @cached_property
    def grid(self) -> np.ndarray:
        """Physical sample points x_j = 2L j / n_grid over one basis period."""
        x = 2.0 * self.L * np.arange(self.n_grid) / self.n_grid
        x.flags.writeable = False
        return x

    @property
    def quad_weight(self) -> float:
        """Quadrature weight making the discrete basis inner product delta_jk."""
        return self.L / self.n_grid

    def index_of(self, k: int) -> int:
        if not -self.K <= k <= self.K:
            raise ValueError(f"mode {k} outside cutoff K={self.K}")
        return k + self.K


@dataclass(frozen=True)
class SpectralField:
    """Truncated real field phi = sum_k coeffs[k] e_k, coeffs in k=-K..K order."""

    spec: TorusSpec
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.spec.n_modes,):
            raise ValueError(
                f"expected {self.spec.n_modes} coefficients, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite coefficient in spectral field")
        c = c.copy()
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    def coeff(self, k: int) -> float:
        return float(self.coeffs[self.spec.index_of(k)])

    @classmethod
    def zero(cls, spec: TorusSpec) -> "SpectralField":
        return cls(spec, np.zeros(spec.n_modes))

    @classmethod
    def basis(cls, spec: TorusSpec, k: int, amplitude: float = 1.0) -> "SpectralField":
        c = np.zeros(spec.n_modes)
        c[spec.index_of(k)] = amplitude
        return cls(spec, c)

    @classmethod
    def constant(cls, spec: TorusSpec, value: float) -> "SpectralField":
        """Field identically equal to ``value`` (coefficient value*sqrt(L) at k=0)."""
        return cls.basis(spec, 0, value * np.sqrt(spec.L))

    def __add__(self, other: "SpectralField") -> "SpectralField":
        if other.spec != self.spec:
            raise ValueError("field specs differ")
        return SpectralField(self.spec, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        if other.spec != self.spec:
            raise ValueError("field specs differ")
        return SpectralField(self.spec, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "SpectralField":
        return SpectralField(self.spec, self.coeffs * float(scalar))

    __rmul__ = __mul__


def basis_eval(k: int, x, spec: TorusSpec):
    """Evaluate e_k(x); vectorised over x."""
    x = np.asarray(x, dtype=float)
    L = spec.L
    if k == 0:
        out = np.full_like(x, 1.0 / np.sqrt(L))
    elif k > 0:
        out = np.sqrt(2.0 / L) * np.cos(k * np.pi * x / L)
    else:
        out = np.sqrt(2.0 / L) * np.sin(k * np.pi * x / L)
    return out if out.ndim else float(out)


def laplacian_eigenvalue(k: int, spec: TorusSpec) -> float:
    """Eigenvalue mu_k = k^2 pi^2 / L^2 of -Laplacian on e_k."""
    return (k * np.pi / spec.L) ** 2


def hs_weights(spec: TorusSpec, s: float) -> np.ndarray:
    """Weights <k>^{2s} in storage order."""
    return (1.0 + spec.wavenumbers.astype(float) ** 2) ** s


def hs_norm(fld: SpectralField, s: float) -> float:
    """Fractional Sobolev norm, ||phi||_{ H^s } = (sum <k>^{2s} phi_k^2)^{1/2}."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"s must lie in [0, 1], got {s}")
    w = hs_weights(fld.spec, s)
    return float(np.sqrt(np.sum(w * fld.coeffs**2)))


def batch_to_physical(coeffs: np.ndarray, spec: TorusSpec) -> np.ndarray:
    """Sample fields on the grid; coeffs shape (..., 2K+1) -> (..., n_grid).

    Exact (up to roundoff) for cutoff-K fields since the grid resolves the
    full basis period.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    K, n, L = spec.K, spec.n_grid, spec.L
    nbins = n // 2 + 1
    spec_c = np.zeros(coeffs.shape[:-1] + (nbins,), dtype=complex)
    spec_c[..., 0] = coeffs[..., K] * (n / np.sqrt(L))
    if K >= 1:
        amp = 0.5 * n * np.sqrt(2.0 / L)
        cos_part = coeffs[..., K + 1:]                  # k = 1..K
        sin_part = coeffs[..., K - 1::-1]               # k = -1..-K
        spec_c[..., 1:K + 1] = amp * (cos_part + 1j * sin_part)
    return np.fft.irfft(spec_c, n=n, axis=-1)


def batch_from_physical(values: np.ndarray, spec: TorusSpec) -> np.ndarray:
    """Project grid samples onto the basis; (..., n_grid) -> (..., 2K+1).

    Quadrature projection with weight L/n_grid; exact on the cutoff space
    for n_grid >= 2K+1.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != spec.n_grid:
        raise ValueError(
            f"expected {spec.n_grid} samples, got {values.shape[-1]}")
    K, n, L = spec.K, spec.n_grid, spec.L
    spec_c = np.fft.rfft(values, axis=-1)
    coeffs = np.empty(values.shape[:-1] + (spec.n_modes,))
    coeffs[..., K] = spec_c[..., 0].real * (np.sqrt(L) / n)
    if K >= 1:
        amp = np.sqrt(2.0 * L) / n
        coeffs[..., K + 1:] = amp * spec_c[..., 1:K + 1].real
        coeffs[..., K - 1::-1] = amp * spec_c[..., 1:K + 1].imag
    return coeffs


def to_physical(fld: SpectralField) -> np.ndarray:
    """Grid samples of the field at x_j = 2L j / n_grid."""
    return batch_to_physical(fld.coeffs, fld.spec)


def from_physical(samples, spec: TorusSpec) -> SpectralField:
    """Spectral projection of grid samples (inverse of to_physical on cutoff fields)."""
    return SpectralField(spec, batch_from_physical(np.asarray(samples, dtype=float), spec))


def mean_transverse_split(fld: SpectralField) -> tuple[float, SpectralField]:
    """Split phi = phi0 e_0 + phi_perp with int phi_perp = 0; exact recombination."""
    phi0 = fld.coeff(0)
    c = fld.coeffs.copy()
    c[fld.spec.index_of(0)] = 0.0
    return phi0, SpectralField(fld.spec, c)


def sup_norm_estimate(fld: SpectralField) -> float:
    """max_j |phi(x_j)| over the physical grid (sup-norm proxy)."""
    return float(np.max(np.abs(to_physical(fld))))
