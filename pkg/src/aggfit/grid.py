"""Uniform periodic grid on the torus (-L/2, L/2].

All operators accept plain numpy arrays or JAX arrays and return the same
kind, so the solver (numpy) and the differentiable losses (JAX) share one
implementation of quadrature, convolution and spectral differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

try:  # JAX is a hard dependency of the package, but keep grid usable without it
    import jax
    import jax.numpy as jnp
except ImportError:  # pragma: no cover
    jax = None
    jnp = None


class GridError(ValueError):
    """Invalid grid construction or incompatible grid functions."""


class AliasingError(GridError):
    """Requested Fourier mode is at or above the Nyquist limit."""


def array_module(*arrays):
    """Return ``jax.numpy`` if any argument is a JAX array, else ``numpy``."""
    if jax is not None:
        for a in arrays:
            if isinstance(a, jax.Array):
                return jnp
    return np


@dataclass(frozen=True)
class PeriodicGrid:
    """N uniformly spaced nodes x_j = -L/2 + j L / N, j = 0..N-1."""

    length: float = np.pi
    n_points: int = 256

    def __post_init__(self):
        if not self.length > 0:
            raise GridError(f"domain length must be positive, got {self.length}")
        if self.n_points < 8 or self.n_points % 2:
            raise GridError(f"n_points must be even and >= 8, got {self.n_points}")

    @property
    def h(self) -> float:
        return self.length / self.n_points

    @cached_property
    def x(self) -> np.ndarray:
        x = -0.5 * self.length + self.h * np.arange(self.n_points)
        x.setflags(write=False)
        return x

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Integer mode numbers 0..N/2 of the real FFT."""
        return np.arange(self.n_points // 2 + 1)

    @cached_property
    def _omega(self) -> np.ndarray:
        return 2.0 * np.pi * self.wavenumbers / self.length

    @cached_property
    def _seam_phase(self) -> np.ndarray:
        # (-1)^k re-centres the FFT on x = 0 because node 0 sits at -L/2
        return (-1.0) ** self.wavenumbers

    # -- basic quadrature / norms ---------------------------------------

    def integrate(self, f):
        """Periodic rectangle rule h * sum_j f(x_j)."""
        xp = array_module(f)
        return self.h * xp.sum(f, axis=-1)

    def inner(self, f, g):
        xp = array_module(f, g)
        return self.h * xp.sum(f * g, axis=-1)

    def norm(self, f):
        """Discrete L2 norm."""
        xp = array_module(f)
        return xp.sqrt(self.h * xp.sum(f * f, axis=-1))

    def mean(self, f):
        return self.integrate(f) / self.length

    # -- spectral operators ---------------------------------------------

    def convolve(self, f, g):
        """Periodic convolution (f*g)(x_j) = h sum_m f(x_j - x_m) g(x_m).

        Leading axes broadcast, so a single kernel can be convolved with a
        stack of densities in one call.
        """
        xp = array_module(f, g)
        n = self.n_points
        spec = xp.fft.rfft(f, axis=-1) * xp.fft.rfft(g, axis=-1) * self._seam_phase
        return self.h * xp.fft.irfft(spec, n=n, axis=-1)

    def diff(self, f, order: int = 1):
        """Spectral derivative; the Nyquist mode is dropped for odd orders."""
        if order not in (1, 2):
            raise GridError(f"order must be 1 or 2, got {order}")
        xp = array_module(f)
        factor = (1j * self._omega) ** order
        if order % 2:
            factor = factor.copy()
            factor[-1] = 0.0
        return xp.fft.irfft(xp.fft.rfft(f, axis=-1) * factor, n=self.n_points, axis=-1)

    def basis(self, k: int) -> np.ndarray:
        """Orthonormal even basis function w_k on the grid."""
        if k == 0:
            return np.full(self.n_points, 1.0 / np.sqrt(self.length))
        return np.sqrt(2.0 / self.length) * np.cos(2.0 * np.pi * k * self.x / self.length)

    def cosine_coeff(self, f, k: int):
        """Projection of ``f`` onto ``w_k`` by quadrature."""
        if k < 0 or k >= self.n_points // 2:
            raise AliasingError(f"mode {k} not below Nyquist ({self.n_points // 2})")
        return self.inner(f, self.basis(k))

    def cosine_coeffs(self, f, k_max: int | None = None):
        """Coefficients on w_0..w_kmax in one FFT."""
        k_max = self.n_points // 2 - 1 if k_max is None else k_max
        if k_max >= self.n_points // 2:
            raise AliasingError(f"mode {k_max} not below Nyquist ({self.n_points // 2})")
        xp = array_module(f)
        c = xp.real(xp.fft.rfft(f, axis=-1)) * self._seam_phase
        scale = np.full(self.n_points // 2 + 1, np.sqrt(2.0 / self.length))
        scale[0] = 1.0 / np.sqrt(self.length)
        return (self.h * c * scale)[..., : k_max + 1]

    def sine_coeffs(self, f, k_max: int | None = None):
        """Coefficients on sqrt(2/L) sin(2 pi k x / L), k = 0..kmax (k=0 is 0)."""
        k_max = self.n_points // 2 - 1 if k_max is None else k_max
        xp = array_module(f)
        s = -xp.imag(xp.fft.rfft(f, axis=-1)) * self._seam_phase
        return (self.h * np.sqrt(2.0 / self.length) * s)[..., : k_max + 1]

    def shift(self, f, m: int):
        """Translate by m nodes: result(x_j) = f(x_{j-m})."""
        xp = array_module(f)
        return xp.roll(f, m, axis=-1)

    def reflect(self, f):
        """f(-x) on the grid (node 0 at -L/2 maps to itself)."""
        xp = array_module(f)
        return xp.roll(f[..., ::-1], 1, axis=-1)

    def symmetrize(self, f):
        return 0.5 * (f + self.reflect(f))

    def trig_interpolate(self, f, x) -> np.ndarray:
        """Evaluate the band-limited interpolant of node values at points ``x``."""
        f = np.asarray(f, dtype=float)
        n = self.n_points
        c = np.fft.rfft(f) / n
        c[1:-1] *= 2.0
        theta = 2.0 * np.pi * (np.asarray(x, dtype=float)[:, None] + 0.5 * self.length) / self.length
        k = self.wavenumbers[None, :]
        vals = np.real(c[None, :] * np.exp(1j * k * theta))
        # Nyquist mode: keep only its real (cosine) part so the interpolant is real
        vals[:, -1] = np.real(c[-1]) * np.cos(k[0, -1] * theta[:, 0])
        return vals.sum(axis=1)

    def function(self, values) -> "GridFunction":
        return GridFunction(self, values)


@dataclass(frozen=True)
class GridFunction:
    """Samples of a periodic function at the nodes of ``grid``."""

    grid: PeriodicGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.n_points,):
            raise GridError(f"expected {self.grid.n_points} values, got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    def _check(self, other: "GridFunction") -> None:
        if other.grid != self.grid:
            raise GridError("grid functions live on different grids")

    def __add__(self, other):
        if isinstance(other, GridFunction):
            self._check(other)
            return GridFunction(self.grid, self.values + other.values)
        return GridFunction(self.grid, self.values + other)

    def __sub__(self, other):
        if isinstance(other, GridFunction):
            self._check(other)
            return GridFunction(self.grid, self.values - other.values)
        return GridFunction(self.grid, self.values - other)

    def __mul__(self, other):
        if isinstance(other, GridFunction):
            self._check(other)
            return GridFunction(self.grid, self.values * other.values)
        return GridFunction(self.grid, self.values * other)

    __rmul__ = __mul__
    __radd__ = __add__

    def __neg__(self):
        return GridFunction(self.grid, -self.values)

    def integrate(self) -> float:
        return float(self.grid.integrate(self.values))

    def norm(self) -> float:
        return float(self.grid.norm(self.values))

    def convolve(self, other: "GridFunction") -> "GridFunction":
        self._check(other)
        return GridFunction(self.grid, self.grid.convolve(self.values, other.values))

    def diff(self, order: int = 1) -> "GridFunction":
        return GridFunction(self.grid, self.grid.diff(self.values, order))

    def cosine_coeff(self, k: int) -> float:
        return float(self.grid.cosine_coeff(self.values, k))
