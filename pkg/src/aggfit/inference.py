"""Fitting unknown kernels, potentials and interaction strength to profiles.

A problem bundles observed profiles (already on the solver grid), the known
model components and one approximator per unknown function.  Losses are
either the fixed-point residual ||T u - u|| or the norm of the stationary
equation's right-hand side, summed over observations.  Each start runs
Adam, then a Levenberg-Marquardt refinement on the stacked residuals, then
an L-BFGS polish; several seeded starts form an ensemble.
The module also holds the analysis tools that do not need an optimizer:
recovery error, ensemble bands, spectra, direct deconvolution of the kernel
and the kernel/potential trade-off construction.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import least_squares, minimize

from .approximators import (
    Approximator,
    FourierKernel,
    FourierPotential,
    ParamVector,
    init_params,
    kernel_on_grid,
    potential_on_grid,
)
from .grid import GridFunction, PeriodicGrid
from .models import ModelInstance
from .steady_state import gibbs_map

log = logging.getLogger(__name__)

UNKNOWN_NAMES = ("W", "V", "kappa")
LOSS_KINDS = ("fp", "pde")
THRESHOLD_PRESETS = {"default": 2.0, "loose": 3.0, "strict": 1.1}
BLIND_THRESHOLD = 1e-8


class InferenceError(ValueError):
    """Malformed inference problem or analysis input."""


class LossError(FloatingPointError):
    """A loss evaluated to a non-finite value."""


# -- problem definition ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InferenceProblem:
    """Observed profiles plus what is known and what is to be fitted.

    ``kappas`` holds one entry per observation.  When ``"kappa"`` is among the
    unknowns the entries must all be ``None`` and a single shared value is
    fitted; otherwise each must be a known non-negative number.

    ``kernel_depth`` optionally rescales a fitted kernel so that min W = -depth.
    With both W and kappa unknown the pair (kappa, W) is only determined up to
    a common scale, and this removes that direction.
    """

    grid: PeriodicGrid
    profiles: tuple
    kappas: tuple
    unknowns: frozenset
    W_known: np.ndarray | None = None
    V_known: np.ndarray | None = None
    sigma: float = 1.0
    loss_kind: str = "fp"
    kernel_approx: Approximator | None = None
    potential_approx: Approximator | None = None
    weights: tuple | None = None
    kernel_depth: float | None = None
    kappa_init: float = 1.0

    def __post_init__(self):
        profiles = tuple(np.asarray(p.values if isinstance(p, GridFunction) else p, dtype=float)
                         for p in self.profiles)
        object.__setattr__(self, "profiles", profiles)
        object.__setattr__(self, "unknowns", frozenset(self.unknowns))
        object.__setattr__(self, "kappas", tuple(None if k is None else float(k) for k in self.kappas))
        if not profiles:
            raise InferenceError("at least one observation is required")
        if any(p.shape != (self.grid.n_points,) for p in profiles):
            raise InferenceError("observations must be interpolated onto the solver grid first")
        if not all(np.all(np.isfinite(p)) for p in profiles):
            raise InferenceError("observations contain non-finite values")
        if len(self.kappas) != len(profiles):
            raise InferenceError("need one kappa entry per observation")
        bad = self.unknowns - set(UNKNOWN_NAMES)
        if bad:
            raise InferenceError(f"unknowns must be a subset of {UNKNOWN_NAMES}, got {sorted(bad)}")
        if not self.unknowns:
            raise InferenceError("nothing to fit")
        if self.loss_kind not in LOSS_KINDS:
            raise InferenceError(f"loss_kind must be one of {LOSS_KINDS}")
        if "kappa" in self.unknowns:
            if any(k is not None for k in self.kappas):
                raise InferenceError("kappa is unknown: observation kappas must be None")
        elif any(k is None or k < 0 for k in self.kappas):
            raise InferenceError("every observation needs a known kappa >= 0")
        if "W" in self.unknowns:
            if self.kernel_approx is None:
                object.__setattr__(self, "kernel_approx", FourierKernel(20, self.grid.length))
        elif self.W_known is None:
            raise InferenceError("W is known but no kernel values were given")
        if "V" in self.unknowns:
            if self.potential_approx is None:
                object.__setattr__(self, "potential_approx", FourierPotential(12, self.grid.length))
        elif self.V_known is None:
            object.__setattr__(self, "V_known", np.zeros(self.grid.n_points))
        w = self.weights if self.weights is not None else (1.0,) * len(profiles)
        if len(w) != len(profiles) or any(x < 0 for x in w):
            raise InferenceError("weights must be non-negative, one per observation")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))
        if self.kernel_depth is not None and not self.kernel_depth > 0:
            raise InferenceError("kernel_depth must be positive")

    @classmethod
    def from_instance(cls, inst: ModelInstance, profiles: Sequence, unknowns: Sequence[str],
                      kappas: Sequence[float | None] | None = None, **kw) -> "InferenceProblem":
        """Known components are taken from ``inst``; unknown ones are dropped."""
        unknowns = frozenset(unknowns)
        n = len(profiles)
        if kappas is None:
            kappas = (None,) * n if "kappa" in unknowns else (inst.kappa,) * n
        return cls(
            grid=inst.grid, profiles=tuple(profiles), kappas=tuple(kappas), unknowns=unknowns,
            W_known=None if "W" in unknowns else inst.W.values,
            V_known=None if "V" in unknowns else inst.V.values,
            sigma=inst.sigma, **kw,
        )

    # -- parameter layout --------------------------------------------------------

    @cached_property
    def layout(self) -> tuple[tuple[str, int], ...]:
        out = []
        if "W" in self.unknowns:
            out.append(("W", self.kernel_approx.size))
        if "V" in self.unknowns:
            out.append(("V", self.potential_approx.size))
        if "kappa" in self.unknowns:
            out.append(("log_kappa", 1))
        return tuple(out)

    @property
    def n_params(self) -> int:
        return sum(s for _, s in self.layout)

    def init(self, seed: int) -> ParamVector:
        ss = np.random.SeedSequence(seed)
        sub = [int(s.generate_state(1)[0]) for s in ss.spawn(3)]
        blocks = []
        if "W" in self.unknowns:
            blocks.append(("W", init_params(self.kernel_approx, sub[0])))
        if "V" in self.unknowns:
            blocks.append(("V", init_params(self.potential_approx, sub[1])))
        if "kappa" in self.unknowns:
            jitter = 0.1 * np.random.default_rng(sub[2]).standard_normal()
            blocks.append(("log_kappa", np.array([np.log(self.kappa_init) + jitter])))
        return ParamVector.concat(blocks)

    def params_from_array(self, values) -> ParamVector:
        return ParamVector(self.layout, values)

    # -- realizing the model -----------------------------------------------------

    def components(self, params: ParamVector):
        """(W, V, kappa-per-observation) on the grid for ``params``; JAX-traceable."""
        if "W" in self.unknowns:
            W = kernel_on_grid(self.kernel_approx, params.segment("W"), self.grid)
            if self.kernel_depth is not None:
                W = W * (self.kernel_depth / jnp.maximum(-jnp.min(W), 1e-300))
        else:
            W = jnp.asarray(self.W_known)
        if "V" in self.unknowns:
            V = potential_on_grid(self.potential_approx, params.segment("V"), self.grid)
        else:
            V = jnp.asarray(self.V_known)
        if "kappa" in self.unknowns:
            kap = jnp.exp(params.segment("log_kappa")[0]) * jnp.ones(len(self.profiles))
        else:
            kap = jnp.asarray(self.kappas, dtype=float)
        return W, V, kap

    def recovered(self, params: ParamVector) -> dict:
        W, V, kap = self.components(params.with_values(jnp.asarray(params.values)))
        out = {"W": np.asarray(W), "V": np.asarray(V), "kappa": None}
        if "kappa" in self.unknowns:
            out["kappa"] = float(kap[0])
        return out

    @cached_property
    def _stack(self) -> np.ndarray:
        return np.stack(self.profiles)

    @cached_property
    def _weights(self) -> np.ndarray:
        return np.asarray(self.weights)

    def residual_fields(self, values):
        """Per-observation residual fields, shape (n_obs, N) (traceable)."""
        W, V, kap = self.components(self.params_from_array(values))
        U = self._stack
        if self.loss_kind == "fp":
            return gibbs_map(U, W, V, kap[:, None], self.sigma, self.grid) - U
        return _pde_rhs(U, W, V, kap[:, None], self.sigma, self.grid)

    def loss_values(self, values):
        """Selected loss as a function of the flat parameter array (traceable)."""
        r = self.residual_fields(values)
        per_obs = _safe_sqrt(self.grid.h * jnp.sum(r * r, axis=-1))
        return jnp.sum(self._weights * per_obs)

    def stacked_residual(self, values):
        """Flat residual whose squared norm is sum_i w_i ||r_i||^2."""
        r = self.residual_fields(values)
        return (r * np.sqrt(self.grid.h * self._weights)[:, None]).reshape(-1)

    @cached_property
    def _residual_and_jacobian(self):
        return jax.jit(self.stacked_residual), jax.jit(jax.jacfwd(self.stacked_residual))

    @cached_property
    def value_and_grad(self):
        return jax.jit(jax.value_and_grad(self.loss_values))

    @cached_property
    def _loss_jit(self):
        return jax.jit(self.loss_values)

    def loss(self, params: ParamVector | np.ndarray) -> float:
        vals = params.values if isinstance(params, ParamVector) else params
        out = float(self._loss_jit(jnp.asarray(vals, dtype=float)))
        if not np.isfinite(out):
            raise LossError(f"{self.loss_kind} loss is not finite")
        return out


def _safe_sqrt(x):
    # sqrt with a zero (sub)gradient at exactly 0, e.g. a constant profile with V = 0
    pos = x > 0
    return jnp.where(pos, jnp.sqrt(jnp.where(pos, x, 1.0)), 0.0)


def _pde_rhs(U, W, V, kappa, sigma, grid: PeriodicGrid):
    """d/dx (sigma u' + kappa u (W*u)' + u V'), spectral derivatives, batched over rows."""
    flux = sigma * grid.diff(U, 1) + U * grid.diff(kappa * grid.convolve(W, U) + V, 1)
    return grid.diff(flux, 1)


def _with_loss_kind(problem: InferenceProblem, kind: str) -> InferenceProblem:
    if problem.loss_kind == kind:
        return problem
    from dataclasses import replace

    return replace(problem, loss_kind=kind)


def loss_fp(params: ParamVector, problem: InferenceProblem) -> float:
    """Sum over observations of ||T u - u|| (observations are not re-solved)."""
    return _with_loss_kind(problem, "fp").loss(params)


def loss_pde(params: ParamVector, problem: InferenceProblem) -> float:
    """Sum over observations of ||d/dx(sigma u' + kappa u (W*u)' + u V')||."""
    return _with_loss_kind(problem, "pde").loss(params)


# -- optimizers -------------------------------------------------------------------


@dataclass
class FitResult:
    params: ParamVector
    final_loss: float
    trace: list[tuple[int, float]]
    recovered: dict
    seed: int | None = None
    failed: bool = False
    message: str = ""

    def to_json(self) -> dict:
        rec = self.recovered
        return {
            "seed": self.seed,
            "final_loss": self.final_loss,
            "failed": self.failed,
            "message": self.message,
            "kappa": rec.get("kappa"),
            "params": self.params.to_json(),
        }


@dataclass(frozen=True)
class FitSchedule:
    adam_lr: float = 1e-3
    adam_iters: int = 50_000
    gauss_newton_evals: int = 200
    lbfgs_iters: int = 2_000
    trace_stride: int = 100


def _adam_scan(vg, lr: float, n_chunks: int, stride: int):
    b1, b2, eps = 0.9, 0.999, 1e-8

    def step(carry, _):
        p, m, v, t, best_p, best_l, failed = carry
        loss, g = vg(p)
        finite = jnp.isfinite(loss) & jnp.all(jnp.isfinite(g))
        ok = finite & ~failed
        better = ok & (loss < best_l)
        best_p = jnp.where(better, p, best_p)
        best_l = jnp.where(better, loss, best_l)
        t1 = t + 1.0
        m1 = b1 * m + (1 - b1) * g
        v1 = b2 * v + (1 - b2) * g * g
        upd = lr * (m1 / (1 - b1 ** t1)) / (jnp.sqrt(v1 / (1 - b2 ** t1)) + eps)
        p = jnp.where(ok, p - upd, p)
        m = jnp.where(ok, m1, m)
        v = jnp.where(ok, v1, v)
        t = jnp.where(ok, t1, t)
        return (p, m, v, t, best_p, best_l, failed | ~finite), None

    def chunk(carry, _):
        carry, _ = jax.lax.scan(step, carry, None, length=stride)
        return carry, (carry[5], carry[6])

    def run(p0):
        z = jnp.zeros_like(p0)
        carry0 = (p0, z, z, 0.0, p0, jnp.inf, False)
        carry, (best_hist, failed_hist) = jax.lax.scan(chunk, carry0, None, length=n_chunks)
        return carry, best_hist, failed_hist

    return jax.jit(run)


def adam_run(problem: InferenceProblem, params0: ParamVector, lr: float = 1e-3, iters: int = 50_000,
             trace_stride: int = 100, seed: int | None = None) -> FitResult:
    """Adam (beta1 0.9, beta2 0.999, eps 1e-8) keeping the best iterate seen.

    A non-finite loss or gradient freezes the run; it is reported as failed
    with the trace recorded so far.
    """
    if not lr >= 0:
        raise InferenceError("lr must be >= 0")
    if iters < 1 or trace_stride < 1:
        raise InferenceError("iters and trace_stride must be >= 1")
    stride = min(trace_stride, iters)
    n_chunks = -(-iters // stride)
    cache = problem.__dict__.setdefault("_adam_cache", {})
    key = (float(lr), n_chunks, stride)
    if key not in cache:
        cache[key] = _adam_scan(problem.value_and_grad, float(lr), n_chunks, stride)
    run = cache[key]
    (p, _, _, _, best_p, best_l, failed), best_hist, failed_hist = run(jnp.asarray(params0.values, dtype=float))
    best_hist = np.asarray(best_hist)
    trace = [(min((i + 1) * stride, iters), float(b)) for i, b in enumerate(best_hist) if np.isfinite(b)]
    best_l = float(best_l)
    if not np.isfinite(best_l):
        pv = params0
        best_l = float("inf")
    else:
        pv = params0.with_values(np.asarray(best_p))
    failed = bool(failed)
    msg = "non-finite loss encountered" if failed else "ok"
    rec = problem.recovered(pv) if np.isfinite(best_l) else {}
    return FitResult(pv, best_l, trace, rec, seed, failed, msg)


def lbfgs_polish(problem: InferenceProblem, params0: ParamVector, max_iters: int = 2_000,
                 trace: Sequence[tuple[int, float]] = (), seed: int | None = None) -> FitResult:
    """L-BFGS (memory 10, strong-Wolfe line search) from ``params0``.

    The best iterate is returned; a line-search breakdown sets ``message``
    but still yields that iterate.
    """
    vg = problem.value_and_grad
    x0 = np.asarray(params0.values, dtype=float)
    best = {"x": x0.copy(), "f": np.inf}

    def fun(x):
        f, g = vg(jnp.asarray(x))
        f = float(f)
        g = np.asarray(g, dtype=float)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            return np.inf, np.zeros_like(x)
        if f < best["f"]:
            best["x"], best["f"] = x.copy(), f
        return f, g

    f0, _ = fun(x0)
    start_iter = trace[-1][0] if trace else 0
    prior = trace[-1][1] if trace else np.inf
    hist = list(trace)
    if max_iters > 0 and np.isfinite(f0):
        state = {"n": 0, "prev": f0, "stalled": False}

        def cb(intermediate_result):
            state["n"] += 1
            f = float(intermediate_result.fun)
            hist.append((start_iter + state["n"], float(min(best["f"], prior))))
            # relative (not floor-at-one) change test, so tiny losses keep improving
            if abs(state["prev"] - f) <= 1e-12 * max(abs(state["prev"]), 1e-300):
                state["stalled"] = True
                raise StopIteration
            state["prev"] = f

        res = minimize(fun, x0, jac=True, method="L-BFGS-B", callback=cb,
                       options={"maxcor": 10, "maxiter": max_iters, "gtol": 1e-10, "ftol": 0.0,
                                "maxls": 50})
        msg = "relative loss change below 1e-12" if state["stalled"] else str(res.message)
        flagged = "ABNORMAL" in msg.upper()
    else:
        msg, flagged = "skipped", False
    final = float(best["f"])
    if np.isfinite(prior) and prior < final:
        # polishing never makes the result worse than its starting point
        final, xbest = prior, x0
    else:
        xbest = best["x"]
    if not hist or hist[-1][1] > final:
        hist.append((start_iter + (len(hist) - len(trace)), final))
    pv = params0.with_values(xbest)
    ok = np.isfinite(final)
    return FitResult(pv, final, hist, problem.recovered(pv) if ok else {}, seed, not ok,
                     ("line search: " + msg) if flagged else msg)


def gauss_newton_refine(problem: InferenceProblem, params0: ParamVector, max_evals: int = 200,
                        trace: Sequence[tuple[int, float]] = (), seed: int | None = None) -> FitResult:
    """Levenberg-Marquardt on the stacked residuals, kept only if it lowers the loss.

    Squared residuals share their zero set with the summed-norm loss, and the
    exact Jacobian resolves weakly excited Fourier modes that first-order
    methods leave untouched at desk-scale budgets.
    """
    res_fn, jac_fn = problem._residual_and_jacobian
    x0 = np.asarray(params0.values, dtype=float)
    f0 = problem.loss(x0)
    hist = list(trace)
    start_iter = hist[-1][0] if hist else 0
    prior = min(f0, hist[-1][1]) if hist else f0
    n_res = problem.grid.n_points * len(problem.profiles)
    try:
        out = least_squares(lambda v: np.asarray(res_fn(jnp.asarray(v))), x0,
                            jac=lambda v: np.asarray(jac_fn(jnp.asarray(v))),
                            method="lm" if n_res >= x0.size else "trf",
                            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max(1, max_evals))
        x1, msg = out.x, str(out.message)
        f1 = problem.loss(x1) if np.all(np.isfinite(x1)) else np.inf
    except (ValueError, FloatingPointError, LossError) as exc:
        x1, f1, msg = x0, np.inf, f"failed: {exc}"
    if f1 < f0:
        hist.append((start_iter + 1, float(min(f1, prior))))
        pv, final = params0.with_values(x1), f1
    else:
        pv, final = params0, f0
    return FitResult(pv, float(final), hist, problem.recovered(pv), seed, False, msg)


def derive_seed(master_seed: int, *keys) -> int:
    """Stable 32-bit seed from a master seed and integer/string keys."""
    ints = [int(master_seed)]
    for k in keys:
        if isinstance(k, str):
            ints.extend(k.encode())
        else:
            ints.append(int(k))
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


@dataclass
class EnsembleResult:
    runs: list[FitResult]
    threshold_factor: float = 2.0

    def __post_init__(self):
        if not self.runs:
            raise InferenceError("an ensemble needs at least one run")
        if not self.threshold_factor >= 1.0:
            raise InferenceError("threshold_factor must be >= 1")

    @property
    def best(self) -> FitResult:
        finite = [r for r in self.runs if np.isfinite(r.final_loss)]
        pool = finite or self.runs
        # ties go to the lowest seed
        return min(pool, key=lambda r: (r.final_loss, r.seed if r.seed is not None else 0))

    @property
    def accepted(self) -> list[FitResult]:
        best = self.best
        if not np.isfinite(best.final_loss):
            return [best]
        cut = self.threshold_factor * best.final_loss
        return [r for r in self.runs if np.isfinite(r.final_loss) and r.final_loss <= cut]

    @property
    def all_failed(self) -> bool:
        return all(r.failed or not np.isfinite(r.final_loss) for r in self.runs)


def fit_once(problem: InferenceProblem, seed: int, schedule: FitSchedule = FitSchedule()) -> FitResult:
    p0 = problem.init(seed)
    adam = adam_run(problem, p0, schedule.adam_lr, schedule.adam_iters, schedule.trace_stride, seed)
    if adam.failed and not np.isfinite(adam.final_loss):
        return adam
    start = adam
    if schedule.gauss_newton_evals > 0 and np.isfinite(adam.final_loss):
        start = gauss_newton_refine(problem, adam.params, schedule.gauss_newton_evals, adam.trace, seed)
    pol = lbfgs_polish(problem, start.params, schedule.lbfgs_iters, start.trace, seed)
    pol.failed = pol.failed or (adam.failed and not np.isfinite(pol.final_loss))
    if adam.failed:
        pol.message = f"adam: {adam.message}; lbfgs: {pol.message}"
    return pol


def multistart_fit(problem: InferenceProblem, n_starts: int = 8, schedule: FitSchedule = FitSchedule(),
                   master_seed: int = 0, threshold_factor: float = 2.0, threads: int = 1) -> EnsembleResult:
    """``fit_once`` from ``n_starts`` initializations seeded via ``derive_seed``."""
    if n_starts < 1:
        raise InferenceError("n_starts must be >= 1")
    seeds = [derive_seed(master_seed, "fit", i) for i in range(n_starts)]

    def one(seed):
        try:
            return fit_once(problem, seed, schedule)
        except (LossError, FloatingPointError) as exc:
            log.warning("start with seed %d failed: %s", seed, exc)
            p0 = problem.init(seed)
            return FitResult(p0, float("inf"), [], {}, seed, True, str(exc))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(one, seeds))
    else:
        runs = [one(s) for s in seeds]
    return EnsembleResult(runs, threshold_factor)


# -- analysis -----------------------------------------------------------------------


def recovery_error(Wstar, Vstar, Wtrue, Vtrue, grid: PeriodicGrid) -> float:
    """integral (W* - W)^2 + integral (V* - V)^2; a pair with a None side is skipped."""
    total = 0.0
    pairs = [(Wstar, Wtrue), (Vstar, Vtrue)]
    if all(a is None or b is None for a, b in pairs):
        raise InferenceError("need at least one (fitted, true) pair")
    for a, b in pairs:
        if a is None or b is None:
            continue
        a = np.asarray(a.values if isinstance(a, GridFunction) else a, dtype=float)
        b = np.asarray(b.values if isinstance(b, GridFunction) else b, dtype=float)
        if a.shape != b.shape:
            raise InferenceError("fitted and true functions live on different grids")
        total += float(grid.integrate((a - b) ** 2))
    return total


def relative_l2(fitted, truth, grid: PeriodicGrid) -> float:
    truth = np.asarray(truth, dtype=float)
    return float(grid.norm(np.asarray(fitted) - truth) / grid.norm(truth))


@dataclass
class Band:
    x: np.ndarray
    W_min: np.ndarray | None
    W_max: np.ndarray | None
    W_best: np.ndarray | None
    V_min: np.ndarray | None
    V_max: np.ndarray | None
    V_best: np.ndarray | None
    kappa_range: tuple[float, float] | None
    n_accepted: int

    @property
    def W_width(self) -> float:
        return 0.0 if self.W_min is None else float(np.max(self.W_max - self.W_min))

    @property
    def V_width(self) -> float:
        return 0.0 if self.V_min is None else float(np.max(self.V_max - self.V_min))

    @property
    def band_width(self) -> float:
        """Largest node-wise spread over the fitted functions."""
        return max(self.W_width, self.V_width)


def identifiability_band(ensemble: EnsembleResult, problem: InferenceProblem) -> Band:
    acc = ensemble.accepted
    best = ensemble.best.recovered

    def env(key):
        if key not in problem.unknowns:
            return None, None, None
        stack = np.stack([r.recovered[key] for r in acc])
        return stack.min(axis=0), stack.max(axis=0), best[key]

    wmin, wmax, wbest = env("W")
    vmin, vmax, vbest = env("V")
    kr = None
    if "kappa" in problem.unknowns:
        ks = [r.recovered["kappa"] for r in acc]
        kr = (float(min(ks)), float(max(ks)))
    return Band(problem.grid.x.copy(), wmin, wmax, wbest, vmin, vmax, vbest, kr, len(acc))


@dataclass
class SpectrumReport:
    modes: list[tuple[int, float]]
    blind: list[int]
    threshold: float

    def magnitude(self, k: int) -> float:
        return dict(self.modes)[k]

    @property
    def active(self) -> list[int]:
        return [k for k, m in self.modes if m > self.threshold]


def spectrum_report(u, grid: PeriodicGrid, threshold: float = BLIND_THRESHOLD) -> SpectrumReport:
    """Magnitudes of the orthonormal Fourier coefficients of ``u`` below Nyquist.

    Cosine and sine parts are combined, so an uneven profile reports its full
    content at each wavenumber; modes at or below ``threshold`` are blind.
    """
    u = np.asarray(u.values if isinstance(u, GridFunction) else u, dtype=float)
    c = grid.cosine_coeffs(u)
    s = grid.sine_coeffs(u)
    mag = np.sqrt(c * c + s * s)
    modes = [(int(k), float(m)) for k, m in enumerate(mag)]
    blind = [k for k, m in modes if m <= threshold]
    return SpectrumReport(modes, blind, threshold)


def deconvolve_kernel(u_star, V, kappa: float, sigma: float, grid: PeriodicGrid,
                      threshold: float = BLIND_THRESHOLD) -> dict[int, float | None]:
    """Cosine coefficients of W read off an exact steady state.

    At a steady state sigma log u + kappa W*u + V is constant, so for k >= 1
    each Fourier mode of W*u is fixed by the data.  Modes where u has no
    content (and k = 0, which the additive constant hides) come back as None.
    """
    u = np.asarray(u_star.values if isinstance(u_star, GridFunction) else u_star, dtype=float)
    V = np.asarray(V.values if isinstance(V, GridFunction) else V, dtype=float)
    if np.any(u <= 0):
        raise InferenceError("deconvolution needs a strictly positive profile")
    if not kappa > 0:
        raise InferenceError("kappa must be positive to deconvolve")
    g = sigma * np.log(u) + V
    g = g - g.mean()
    G, U = np.fft.rfft(g), np.fft.rfft(u)
    mag_u = grid.h * np.sqrt(2.0 / grid.length) * np.abs(U)
    out: dict[int, float | None] = {0: None}
    for k in range(1, grid.n_points // 2):
        if mag_u[k] <= threshold:
            out[k] = None
            continue
        # kappa * h (-1)^k W_hat[k] U[k] = -G[k]; cosine coeff = sqrt(2/L) h (-1)^k W_hat[k]
        out[k] = float(-np.sqrt(2.0 / grid.length) * np.real(G[k] / U[k]) / kappa)
    return out


def kernel_from_coefficients(coeffs: dict[int, float | None], grid: PeriodicGrid) -> np.ndarray:
    """Even kernel from known cosine coefficients, shifted to max 0 (unknown modes set to 0)."""
    w = np.zeros(grid.n_points)
    for k, a in coeffs.items():
        if k >= 1 and a is not None:
            w += a * grid.basis(k)
    return w - w.max()


def nonidentifiability_construct(W, V, u_star, Q, kappa: float, grid: PeriodicGrid,
                                 tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """(W + Q, V - kappa Q*u): a kernel/potential pair sharing the steady state u.

    Since kappa multiplies the convolution in T, the potential absorbs
    kappa Q*u so that kappa W0*u + V0 equals kappa W*u + V exactly.
    """
    arr = [np.asarray(a.values if isinstance(a, GridFunction) else a, dtype=float) for a in (W, V, u_star, Q)]
    W, V, u, Q = arr
    if np.abs(Q - grid.reflect(Q)).max() > tol * max(1.0, np.abs(Q).max()):
        raise InferenceError("Q must be even")
    if abs(grid.integrate(Q)) >= tol:
        raise InferenceError("Q must have zero integral")
    return W + Q, V - kappa * grid.convolve(Q, u)
