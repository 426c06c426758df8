"""Steady states as fixed points of the Gibbs-type map T.

    T u = exp(-(kappa W*u + V) / sigma) / Z(u)

Fixed points are found by damped Picard sweeps followed by a matrix-free
Newton-Krylov solve of (I - T) u = 0.  The module also carries the
diagnostics built on the same map: free energy, a semi-implicit time
stepper, linear bifurcation points and natural-parameter continuation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import LinearOperator, gmres

from .grid import GridFunction, PeriodicGrid, array_module
from .models import ModelInstance

log = logging.getLogger(__name__)

ACCEPT_TOL = 1e-9
DEDUP_TOL = 1e-4


class InputError(ValueError):
    pass


class NumericalBlowup(FloatingPointError):
    pass


class StepSizeError(NumericalBlowup):
    """Time stepping lost positivity or finiteness; retry with a smaller dt."""


class NoConvergence(RuntimeError):
    """Newton-Krylov did not reach tolerance; ``best`` holds the best iterate."""

    def __init__(self, msg, best: np.ndarray, residual: float):
        super().__init__(msg)
        self.best = best
        self.residual = residual


def _vals(u) -> np.ndarray:
    return u.values if isinstance(u, GridFunction) else u


# -- the fixed-point map ------------------------------------------------------


def gibbs_map(u, W, V, kappa, sigma, grid: PeriodicGrid):
    """Array-level T; works on numpy or JAX arrays, broadcasting over leading axes."""
    xp = array_module(u, W, V, kappa)
    s = -(kappa * grid.convolve(W, u) + V) / sigma
    s = s - xp.max(s, axis=-1, keepdims=True)
    e = xp.exp(s)
    return e / grid.integrate(e)[..., None]


def apply_T(u, inst: ModelInstance):
    """T u for a GridFunction (returns GridFunction) or an array (returns array)."""
    vals = np.asarray(_vals(u), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise InputError("u contains non-finite values")
    out = gibbs_map(vals, inst.W.values, inst.V.values, inst.kappa, inst.sigma, inst.grid)
    return GridFunction(inst.grid, out) if isinstance(u, GridFunction) else out


def gibbs_state(inst: ModelInstance) -> np.ndarray:
    e = np.exp(-(inst.V.values - inst.V.values.min()) / inst.sigma)
    return e / inst.grid.integrate(e)


def fp_residual(u, inst: ModelInstance) -> float:
    u = np.asarray(_vals(u), dtype=float)
    return float(inst.grid.norm(apply_T(u, inst) - u))


def pde_residual_field(u, W, V, kappa, grid: PeriodicGrid, sigma=1.0, form: str = "flux"):
    """Right-hand side of the stationary equation on the grid.

    ``form="flux"`` differentiates u d/dx(sigma log u + kappa W*u + V), which
    vanishes to round-off at discrete fixed points even when W or V have
    kinks.  ``form="expanded"`` differentiates sigma u' + kappa u (W*u)' + u V'
    term by term; the two agree for smooth inputs.
    """
    xp = array_module(u, W, V)
    if form == "flux":
        chem = sigma * xp.log(u) + kappa * grid.convolve(W, u) + V
        flux = u * grid.diff(chem, 1)
    elif form == "expanded":
        flux = sigma * grid.diff(u, 1) + u * grid.diff(kappa * grid.convolve(W, u) + V, 1)
    else:
        raise InputError(f"unknown residual form {form!r}")
    return grid.diff(flux, 1)


def pde_residual(u, inst: ModelInstance, form: str = "flux") -> float:
    u = np.asarray(_vals(u), dtype=float)
    if form == "flux" and np.any(u <= 0):
        raise InputError("flux-form residual needs a strictly positive profile")
    r = pde_residual_field(u, inst.W.values, inst.V.values, inst.kappa, inst.grid, inst.sigma, form)
    return float(inst.grid.norm(r))


def branch_diagnostic(u, grid: PeriodicGrid) -> float:
    """Integral of (u - 1/L)^2."""
    u = np.asarray(_vals(u), dtype=float)
    return float(grid.integrate((u - 1.0 / grid.length) ** 2))


# -- result types ---------------------------------------------------------------


@dataclass(frozen=True)
class SteadyState:
    profile: GridFunction
    residual_fp: float
    residual_pde: float
    branch_diag: float
    kappa: float

    @classmethod
    def from_profile(cls, u, inst: ModelInstance) -> "SteadyState":
        u = np.asarray(_vals(u), dtype=float)
        return cls(
            GridFunction(inst.grid, u),
            fp_residual(u, inst),
            pde_residual(u, inst),
            branch_diagnostic(u, inst.grid),
            inst.kappa,
        )


@dataclass
class SteadyStateSet:
    states: list[SteadyState]
    dedup_tol: float
    instance: ModelInstance

    def __len__(self):
        return len(self.states)

    def __iter__(self):
        return iter(self.states)

    def __getitem__(self, i):
        return self.states[i]

    @property
    def profiles(self) -> np.ndarray:
        return np.array([s.profile.values for s in self.states])


# -- symmetry-aware distance ------------------------------------------------------


def symmetry_shifts(inst: ModelInstance, tol: float = 1e-12) -> np.ndarray | None:
    """Node shifts that leave V invariant, or None when V is constant (every translation)."""
    if inst.potential_is_constant:
        return None
    v = inst.V.values
    scale = max(1.0, float(np.abs(v).max()))
    return np.array([m for m in range(inst.grid.n_points) if np.abs(np.roll(v, m) - v).max() <= tol * scale])


def _correlation_at(A, B, n: int, m: float) -> float:
    """Band-limited circular cross-correlation sum_j a_j b_{j-m} at fractional lag m."""
    k = np.arange(A.shape[0])
    w = np.full(k.shape, 2.0)
    w[0] = 1.0
    w[-1] = 1.0  # n is even: last rfft bin is the Nyquist mode
    return float(np.sum(w * np.real(A * np.conj(B) * np.exp(2j * np.pi * k * m / n))) / n)


def _best_lag(a, b, grid: PeriodicGrid, shifts: Sequence[int] | None) -> tuple[float, float]:
    """Lag (in nodes, possibly fractional) maximizing the correlation, and that maximum."""
    A, B = np.fft.rfft(a), np.fft.rfft(b)
    corr = np.fft.irfft(A * np.conj(B), n=grid.n_points)
    cand = np.arange(grid.n_points) if shifts is None else np.asarray(shifts, dtype=int)
    m = int(cand[np.argmax(corr[cand])])
    best = (float(m), float(corr[m]))
    if shifts is None or len(cand) == grid.n_points:
        # translation invariant: refine between neighbouring nodes
        res = minimize_scalar(lambda t: -_correlation_at(A, B, grid.n_points, t),
                              bounds=(m - 1.0, m + 1.0), method="bounded", options={"xatol": 1e-10})
        t = float(res.x)
        # a few Newton steps on d/dm of the correlation: the bounded search
        # only pins the peak to ~sqrt(eps)
        k = np.arange(A.shape[0])
        w = np.full(k.shape, 2.0)
        w[0] = w[-1] = 1.0
        P = w * A * np.conj(B)
        om = 2j * np.pi * k / grid.n_points
        for _ in range(3):
            ph = P * np.exp(om * t)
            d1, d2 = np.sum(np.real(ph * om)), np.sum(np.real(ph * om * om))
            if d2 >= 0 or abs(d1 / d2) > 1.0:
                break
            t -= d1 / d2
        val = _correlation_at(A, B, grid.n_points, t)
        if val < -res.fun:
            t, val = float(res.x), float(-res.fun)
        if val > best[1]:
            best = (t, val)
    return best


def fractional_shift(f, m: float, grid: PeriodicGrid) -> np.ndarray:
    """Translate node values by ``m`` nodes (any real m) through the band-limited interpolant."""
    n = grid.n_points
    F = np.fft.rfft(np.asarray(f, dtype=float))
    k = np.arange(F.shape[0])
    nyq = F[-1].real * np.cos(np.pi * m)  # the sampled Nyquist mode carries no sine part
    F = F * np.exp(-2j * np.pi * k * m / n)
    F[-1] = nyq
    return np.fft.irfft(F, n=n)


def quotient_distance(u1, u2, grid: PeriodicGrid, shifts: Sequence[int] | None = None) -> float:
    """min over admissible translations s of ||u1 - u2(. - s)||.

    ``shifts=None`` means every translation is admissible, including
    sub-grid ones; an explicit list restricts to those node shifts.
    """
    a = np.asarray(_vals(u1), dtype=float)
    b = np.asarray(_vals(u2), dtype=float)
    m, _ = _best_lag(a, b, grid, shifts)
    # norm of the aligned difference, not |a|^2 + |b|^2 - 2c, which cancels to ~1e-8
    shifted = np.roll(b, int(m)) if float(m).is_integer() else fractional_shift(b, m, grid)
    return float(grid.norm(a - shifted))


def best_alignment(u_ref, u, grid: PeriodicGrid, shifts: Sequence[int] | None = None) -> np.ndarray:
    """Translate ``u`` (over admissible shifts) to best match ``u_ref``."""
    a = np.asarray(_vals(u_ref), dtype=float)
    b = np.asarray(_vals(u), dtype=float)
    m, _ = _best_lag(a, b, grid, shifts)
    if float(m).is_integer():
        return np.roll(b, int(m))
    return fractional_shift(b, m, grid)


# -- solvers --------------------------------------------------------------------


@dataclass
class PicardResult:
    u: GridFunction
    history: list[float]
    converged: bool


def picard_iterate(u0, inst: ModelInstance, damping: float = 0.5, max_iter: int = 500,
                   tol: float = ACCEPT_TOL) -> PicardResult:
    """Damped fixed-point sweeps u <- (1 - d) u + d T u."""
    if not 0 < damping <= 1:
        raise InputError(f"damping must lie in (0, 1], got {damping}")
    grid = inst.grid
    u = np.array(_vals(u0), dtype=float)
    history = []
    for _ in range(max_iter + 1):
        if not np.all(np.isfinite(u)):
            raise NumericalBlowup("Picard iterate became non-finite")
        tu = apply_T(u, inst)
        res = float(grid.norm(tu - u))
        history.append(res)
        if res <= tol:
            return PicardResult(GridFunction(grid, u), history, True)
        if len(history) > max_iter:
            break
        u = (1.0 - damping) * u + damping * tu
    return PicardResult(GridFunction(grid, u), history, False)


def _jvp_fd(u, phi, inst):
    nphi = np.linalg.norm(phi)
    if nphi == 0.0:
        return np.zeros_like(phi)
    eps = np.sqrt(np.finfo(float).eps) * (1.0 + np.linalg.norm(u)) / nphi
    return (apply_T(u + eps * phi, inst) - apply_T(u - eps * phi, inst)) / (2.0 * eps)


def newton_krylov_solve(u0, inst: ModelInstance, tol: float = ACCEPT_TOL, max_newton: int = 50,
                        restart: int = 30, forcing: float = 1e-3) -> SteadyState:
    """Solve (I - T) u = 0 by inexact Newton with finite-difference Jacobian products.

    Linear systems are solved by restarted GMRES on the zero-mass subspace to
    a relative tolerance ``forcing``.  A backtracking line search on the
    residual norm safeguards steps taken far from a solution.
    """
    grid = inst.grid
    u = np.array(_vals(u0), dtype=float)
    if abs(grid.integrate(u) - 1.0) > 1e-8:
        raise InputError("initial guess must have unit mass")
    n = grid.n_points

    def residual(v):
        return v - apply_T(v, inst)

    F = residual(u)
    r = float(grid.norm(F))
    best_u, best_r = u.copy(), r
    for it in range(max_newton):
        if r <= tol:
            return SteadyState.from_profile(u, inst)

        def matvec(p, u=u):
            p = p - p.mean()
            out = p - _jvp_fd(u, p, inst)
            return out - out.mean()

        A = LinearOperator((n, n), matvec=matvec, dtype=float)
        rhs = -(F - F.mean())
        delta, info = gmres(A, rhs, rtol=forcing, atol=0.0, restart=restart, maxiter=20)
        if not np.all(np.isfinite(delta)):
            raise NoConvergence("GMRES produced a non-finite step", best_u, best_r)
        delta = delta - delta.mean()
        step, accepted = 1.0, False
        while step >= 1.0 / 1024:
            trial = u + step * delta
            Ft = residual(trial)
            rt = float(grid.norm(Ft))
            if np.isfinite(rt) and rt < (1.0 - 1e-4 * step) * r:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if info != 0:
                raise NoConvergence(f"GMRES stagnated (info={info}) at Newton step {it}", best_u, best_r)
            raise NoConvergence(f"line search failed at Newton step {it}", best_u, best_r)
        u, F, r = trial, Ft, rt
        if r < best_r:
            best_u, best_r = u.copy(), r
    if r <= tol:
        return SteadyState.from_profile(u, inst)
    raise NoConvergence(f"no convergence in {max_newton} Newton steps (residual {best_r:.3e})", best_u, best_r)


# -- enumeration ------------------------------------------------------------------


def seed_bank(inst: ModelInstance, n_random: int = 16, k_max: int = 6,
              amplitudes: Sequence[float] = (0.1, 0.3), rng_seed: int = 0) -> list[np.ndarray]:
    """Initial guesses: constant, Gibbs state, +-cosine modes, random band-limited profiles."""
    grid = inst.grid
    L, x = grid.length, grid.x
    base = np.full(grid.n_points, 1.0 / L)
    seeds = [base]
    if not inst.potential_is_constant:
        seeds.append(gibbs_state(inst))
    for k in range(1, k_max + 1):
        c = np.cos(2 * np.pi * k * x / L)
        for a in amplitudes:
            seeds.append(base + a * c)
            seeds.append(base - a * c)
    rng = np.random.default_rng(rng_seed)
    for _ in range(n_random):
        n_modes = 6
        k = np.arange(1, n_modes + 1)[:, None]
        coef = rng.normal(size=(2, n_modes, 1)) / k
        pert = (coef[0] * np.cos(2 * np.pi * k * x / L) + coef[1] * np.sin(2 * np.pi * k * x / L)).sum(axis=0)
        pert *= 0.3 / np.abs(pert).max()
        seeds.append(base + pert)
    return [s / grid.integrate(s) for s in seeds]


def dedup_states(states: Iterable[SteadyState], inst: ModelInstance, dedup_tol: float = DEDUP_TOL) -> list[SteadyState]:
    shifts = symmetry_shifts(inst)
    kept: list[SteadyState] = []
    # deterministic: order candidates by (branch_diag, residual) before merging
    for s in sorted(states, key=lambda s: (round(s.branch_diag, 10), s.residual_fp)):
        if all(quotient_distance(s.profile.values, k.profile.values, inst.grid, shifts) >= dedup_tol for k in kept):
            kept.append(s)
    return kept


def solve_from_seeds(seeds: Iterable[np.ndarray], inst: ModelInstance, tol: float = ACCEPT_TOL,
                     picard_steps: int = 5, damping: float = 0.5) -> list[SteadyState]:
    found = []
    for i, s in enumerate(seeds):
        try:
            u = picard_iterate(s, inst, damping=damping, max_iter=picard_steps, tol=tol).u.values
            found.append(newton_krylov_solve(u, inst, tol=tol))
        except (NoConvergence, NumericalBlowup) as exc:
            log.debug("seed %d failed: %s", i, exc)
    return found


def enumerate_steady_states(inst: ModelInstance, seed_count: int = 16, dedup_tol: float = DEDUP_TOL,
                            tol: float = ACCEPT_TOL, rng_seed: int = 0, k_max: int = 6,
                            extra_seeds: Sequence[np.ndarray] = ()) -> SteadyStateSet:
    """Run Picard + Newton-Krylov from the seed bank and keep distinct converged states.

    ``seed_count`` is the number of random band-limited seeds added to the
    deterministic constant/cosine seeds.
    """
    if seed_count < 1:
        raise InputError("seed_count must be >= 1")
    seeds = list(extra_seeds) + seed_bank(inst, n_random=seed_count, k_max=k_max, rng_seed=rng_seed)
    found = [s for s in solve_from_seeds(seeds, inst, tol=tol) if np.all(s.profile.values > 0)]
    kept = dedup_states(found, inst, dedup_tol)
    return SteadyStateSet(kept, dedup_tol, inst)


# -- energy and dynamics -----------------------------------------------------------


def free_energy(u, inst: ModelInstance) -> float:
    """F[u] = int u (sigma log u - 1 + kappa/2 W*u + V) dx."""
    u = np.asarray(_vals(u), dtype=float)
    if np.any(u <= 0):
        raise InputError("free energy needs a strictly positive density")
    g = inst.grid
    integrand = u * (inst.sigma * np.log(u) - 1.0 + 0.5 * inst.kappa * g.convolve(inst.W.values, u) + inst.V.values)
    return float(g.integrate(integrand))


@dataclass
class Trajectory:
    final: GridFunction
    times: np.ndarray
    mass_error: np.ndarray
    energy: np.ndarray


def relax_in_time(u0, inst: ModelInstance, dt: float, t_end: float) -> Trajectory:
    """Semi-implicit spectral stepping: diffusion implicit, transport explicit."""
    if dt <= 0:
        raise InputError("dt must be positive")
    g = inst.grid
    u = np.array(_vals(u0), dtype=float)
    if np.any(u <= 0):
        raise InputError("initial density must be positive")
    omega = 2 * np.pi * g.wavenumbers / g.length
    implicit = 1.0 / (1.0 + dt * inst.sigma * omega**2)
    mass0 = g.integrate(u)
    n_steps = int(np.ceil(t_end / dt - 1e-12))
    times, mass_err, energy = [0.0], [0.0], [free_energy(u, inst)]
    for i in range(n_steps):
        potential = inst.kappa * g.convolve(inst.W.values, u) + inst.V.values
        transport = g.diff(u * g.diff(potential, 1), 1)
        u = np.fft.irfft((np.fft.rfft(u) + dt * np.fft.rfft(transport)) * implicit, n=g.n_points)
        if not np.all(np.isfinite(u)) or u.min() <= 0:
            raise StepSizeError(f"step {i}: density lost positivity; reduce dt (currently {dt})")
        times.append((i + 1) * dt)
        mass_err.append(float(g.integrate(u) - mass0))
        energy.append(free_energy(u, inst))
    return Trajectory(GridFunction(g, u), np.array(times), np.array(mass_err), np.array(energy))


# -- bifurcations ---------------------------------------------------------------------


def bifurcation_points(W, sigma: float = 1.0, L: float | None = None, k_max: int = 20) -> list[tuple[int, float]]:
    """Linear bifurcation points -sigma sqrt(2L) / W~(k) for modes with W~(k) < 0."""
    if not isinstance(W, GridFunction):
        raise InputError("W must be a GridFunction")
    grid = W.grid
    L = grid.length if L is None else L
    if k_max >= grid.n_points // 2:
        raise InputError("k_max must be below the Nyquist mode")
    coeffs = grid.cosine_coeffs(W.values, k_max)
    scale = max(1.0, float(np.abs(coeffs).max()))
    out = [(k, -sigma * np.sqrt(2 * L) / coeffs[k]) for k in range(1, k_max + 1) if coeffs[k] < -1e-13 * scale]
    return sorted(out, key=lambda t: t[1])


def linearization_matrix(u, inst: ModelInstance) -> np.ndarray:
    """Dense finite-difference Jacobian of T at u (columns are D T[u] e_j)."""
    u = np.asarray(_vals(u), dtype=float)
    n = inst.grid.n_points
    eye = np.eye(n)
    return np.column_stack([_jvp_fd(u, eye[:, j], inst) for j in range(n)])


def instability_onsets(inst: ModelInstance, n_modes: int = 3, kappa_max: float = 200.0,
                       n_sweep: int = 400, rtol: float = 1e-6) -> list[float]:
    """kappa values where the constant state loses stability, from eigenvalues of D T.

    Sweeps kappa, counts eigenvalues of the linearized map above 1 at
    u = 1/L, and bisects each jump of the count.  Paired cosine/sine modes
    produce one onset.
    """
    g = inst.grid
    u = np.full(g.n_points, 1.0 / g.length)

    def count(kappa):
        J = linearization_matrix(u, inst.with_kappa(kappa))
        ev = np.linalg.eigvals(J).real
        return int(np.sum(ev > 1.0))

    kappas = np.geomspace(1e-2, kappa_max, n_sweep)
    counts = [count(k) for k in kappas]
    onsets = []
    for i in range(1, len(kappas)):
        if counts[i] > counts[i - 1]:
            lo, hi = kappas[i - 1], kappas[i]
            c_lo = counts[i - 1]
            while hi - lo > rtol * hi:
                mid = 0.5 * (lo + hi)
                if count(mid) > c_lo:
                    hi = mid
                else:
                    lo = mid
            onsets.append(0.5 * (lo + hi))
            if len(onsets) >= n_modes:
                break
    return onsets


@dataclass
class BranchPoint:
    kappa: float
    state_id: int
    branch_diag: float
    residual_fp: float
    profile: np.ndarray = field(repr=False)


def continue_branch(inst: ModelInstance, kappa_range: tuple[float, float] | None = None, steps: int = 11,
                    kappas: Sequence[float] | None = None, seed_count: int = 8,
                    match_tol: float = 0.25) -> list[BranchPoint]:
    """Natural continuation in kappa, re-solving from the previous states and the seed bank.

    States are tracked across kappa by nearest quotient distance; a state
    further than ``match_tol`` from every tracked state opens a new id.
    """
    if kappas is None:
        if kappa_range is None or steps < 2 or kappa_range[1] <= kappa_range[0]:
            raise InputError("need an ascending kappa_range and steps >= 2, or explicit kappas")
        kappas = np.linspace(kappa_range[0], kappa_range[1], steps)
    kappas = sorted(float(k) for k in kappas)
    shifts = symmetry_shifts(inst)
    tracked: dict[int, np.ndarray] = {}
    points: list[BranchPoint] = []
    prev: list[np.ndarray] = []
    for kappa in kappas:
        ik = inst.with_kappa(kappa)
        try:
            found = enumerate_steady_states(ik, seed_count=seed_count, extra_seeds=prev)
        except (NoConvergence, NumericalBlowup) as exc:
            log.warning("kappa=%g: %s", kappa, exc)
            continue
        profiles = [s.profile.values for s in found]
        prev = profiles
        # one-to-one assignment: closest (state, tracked id) pairs first
        pairs = sorted(
            (quotient_distance(u, ref, ik.grid, shifts), i, sid)
            for i, u in enumerate(profiles) for sid, ref in tracked.items()
        )
        assigned: dict[int, int] = {}
        used: set[int] = set()
        for d, i, sid in pairs:
            if d >= match_tol:
                break
            if i not in assigned and sid not in used:
                assigned[i] = sid
                used.add(sid)
        next_id = len(tracked)
        for i, s in enumerate(found):
            if i not in assigned:
                assigned[i] = next_id
                next_id += 1
            tracked[assigned[i]] = profiles[i]
            points.append(BranchPoint(kappa, assigned[i], s.branch_diag, s.residual_fp, profiles[i]))
    return points
