"""Independent reference computations used by the tests.

Nothing here calls the package's spectral code: convolutions are direct
O(N^2) sums, integrals use adaptive quadrature, and derivatives use finite
differences, so agreement with the package is a genuine cross-check.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import quad


def nodes(L: float, N: int) -> np.ndarray:
    return -L / 2 + L * np.arange(N) / N


def direct_convolve(f: np.ndarray, g: np.ndarray, L: float) -> np.ndarray:
    """(f*g)(x_j) = h sum_m f(x_j - x_m) g(x_m) with the periodic index wrap done by hand."""
    N = f.size
    h = L / N
    out = np.empty(N)
    # x_j - x_m = (j - m) h maps to node index (j - m + N/2) mod N since node 0 is -L/2
    for j in range(N):
        idx = (j - np.arange(N) + N // 2) % N
        out[j] = h * np.dot(f[idx], g)
    return out


def direct_gibbs_map(u, W, V, kappa, sigma, L):
    """T u by direct summation and plain (shifted) exponentials."""
    h = L / u.size
    s = -(kappa * direct_convolve(W, u, L) + V) / sigma
    e = np.exp(s - s.max())
    return e / (h * e.sum())


def quad_periodic(fn, L: float) -> float:
    val, _ = quad(fn, -L / 2, L / 2, limit=400, epsabs=1e-14, epsrel=1e-13)
    return val


def tophat_cosine_coeff(k: int, w: float, L: float) -> float:
    """int_{-L/2}^{L/2} W_th(x) w_k(x) dx for W_th = -1 on |x| <= w, 0 elsewhere."""
    if k == 0:
        return -2 * w / np.sqrt(L)
    a = 2 * np.pi * k / L
    return -np.sqrt(2 / L) * 2 * np.sin(a * w) / a


def central_difference_grad(fn, theta: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences with step 1e-6 (1 + |theta_i|)."""
    g = np.empty_like(theta)
    for i in range(theta.size):
        step = rel_step * (1.0 + abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += step
        tm[i] -= step
        g[i] = (fn(tp) - fn(tm)) / (2 * step)
    return g


def richardson_gradient(fn, theta: np.ndarray, rel_step: float = 1e-3) -> np.ndarray:
    """Fourth-order central differences, (8[f(+h)-f(-h)] - [f(+2h)-f(-2h)]) / 12h."""
    g = np.empty_like(theta)
    for i in range(theta.size):
        step = rel_step * (1.0 + abs(theta[i]))
        vals = []
        for m in (1, -1, 2, -2):
            t = theta.copy()
            t[i] += m * step
            vals.append(fn(t))
        g[i] = (8 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12 * step)
    return g


def constant_state_onsets(W: np.ndarray, kappa_grid, sigma: float, L: float, n: int = 3):
    """Onsets from a dense finite-difference Jacobian of T at u = 1/L.

    The Jacobian is assembled column by column from direct_gibbs_map and the
    largest real eigenvalue is tracked across ``kappa_grid``; each crossing of
    1 by a new eigenvalue pair is located by bisection.
    """
    N = W.size
    u0 = np.full(N, 1.0 / L)

    def jac(kappa):
        eps = 1e-6
        J = np.empty((N, N))
        for m in range(N):
            e = np.zeros(N)
            e[m] = eps
            J[:, m] = (direct_gibbs_map(u0 + e, W, np.zeros(N), kappa, sigma, L)
                       - direct_gibbs_map(u0 - e, W, np.zeros(N), kappa, sigma, L)) / (2 * eps)
        return J

    def count(kappa):
        ev = np.linalg.eigvals(jac(kappa)).real
        return int(np.sum(ev > 1.0))

    onsets = []
    prev_k, prev_c = kappa_grid[0], count(kappa_grid[0])
    for k in kappa_grid[1:]:
        c = count(k)
        if c > prev_c:
            lo, hi = prev_k, k
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                if count(mid) > prev_c:
                    hi = mid
                else:
                    lo = mid
            onsets.append(0.5 * (lo + hi))
            if len(onsets) == n:
                break
        prev_k, prev_c = k, c
    return onsets


def clipped_gaussian_mean_mc(mu: float, sigma: float, n: int, seed: int) -> float:
    """Monte-Carlo mean of max(N(mu, sigma^2), 0) with an unrelated generator."""
    rng = np.random.default_rng(seed)
    return float(np.maximum(mu + sigma * rng.standard_normal(n), 0.0).mean())


def fd_relative_errors(grad: np.ndarray, fd: np.ndarray, f_value: float, theta: np.ndarray,
                       rel_step: float = 1e-6, tol: float = 1e-5) -> np.ndarray:
    """Component-wise |grad - fd| / max(|fd|, floor).

    A central difference cannot resolve a derivative smaller than its own
    rounding noise, about c eps |f| / step with c covering the rounding of a
    long FFT-based loss evaluation (c = 1e3).  The floor is the magnitude at
    which that noise is exactly ``tol`` relative, so components below it are
    compared at the oracle's resolution instead of against zero.
    """
    step = rel_step * (1.0 + np.abs(theta))
    noise = 1e3 * np.finfo(float).eps * max(abs(f_value), 1e-300) / step
    floor = noise / tol
    return np.abs(grad - fd) / np.maximum(np.abs(fd), floor)
