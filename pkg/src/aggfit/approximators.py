"""Trainable stand-ins for unknown kernels and potentials.

Two families are provided: truncated Fourier series and small fully
connected networks.  Both are immutable descriptions; evaluation takes an
explicit flat parameter array so the same code runs under numpy and under
JAX tracing.  Raw outputs are turned into admissible functions by
``constrain_kernel`` (even, non-positive, max 0) and ``constrain_potential``
(zero mean).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .grid import PeriodicGrid, array_module

ACTIVATIONS = ("softplus", "relu", "mixed")
INIT_SCHEMES = ("glorot-uniform", "small-normal")


class ApproximatorError(ValueError):
    """Bad approximator description or parameter vector."""


class GradientError(FloatingPointError):
    """A gradient evaluation produced non-finite values."""


# -- parameter vector -----------------------------------------------------------


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter array with a named block layout.

    ``layout`` is a tuple of ``(name, size)`` pairs in storage order.  Values
    may be a numpy array or, inside a traced computation, a JAX array.
    """

    layout: tuple[tuple[str, int], ...]
    values: object

    def __post_init__(self):
        layout = tuple((str(n), int(s)) for n, s in self.layout)
        object.__setattr__(self, "layout", layout)
        if not isinstance(self.values, jax.Array):
            object.__setattr__(self, "values", np.asarray(self.values, dtype=float).reshape(-1))
        total = sum(s for _, s in layout)
        if self.values.shape != (total,):
            raise ApproximatorError(f"layout expects {total} values, got shape {self.values.shape}")
        if len({n for n, _ in layout}) != len(layout):
            raise ApproximatorError("duplicate block names in layout")

    @property
    def size(self) -> int:
        return int(self.values.shape[0])

    def names(self) -> list[str]:
        return [n for n, _ in self.layout]

    def _span(self, name: str) -> tuple[int, int]:
        start = 0
        for n, s in self.layout:
            if n == name:
                return start, start + s
            start += s
        raise KeyError(name)

    def segment(self, name: str):
        a, b = self._span(name)
        return self.values[a:b]

    def has(self, name: str) -> bool:
        return name in self.names()

    def with_values(self, values) -> "ParamVector":
        return ParamVector(self.layout, values)

    def replace_segment(self, name: str, block) -> "ParamVector":
        a, b = self._span(name)
        xp = array_module(self.values, block)
        vals = xp.concatenate([self.values[:a], xp.asarray(block, dtype=float).reshape(-1), self.values[b:]])
        return ParamVector(self.layout, vals)

    @staticmethod
    def concat(blocks: Sequence[tuple[str, "np.ndarray"]]) -> "ParamVector":
        layout = tuple((n, int(np.size(v))) for n, v in blocks)
        values = np.concatenate([np.asarray(v, dtype=float).reshape(-1) for _, v in blocks]) if blocks else np.zeros(0)
        return ParamVector(layout, values)

    def to_json(self) -> dict:
        return {
            "layout": [{"name": n, "size": s} for n, s in self.layout],
            "values": [float(v) for v in np.asarray(self.values)],
        }

    @classmethod
    def from_json(cls, data: dict) -> "ParamVector":
        try:
            layout = tuple((d["name"], d["size"]) for d in data["layout"])
            return cls(layout, np.asarray(data["values"], dtype=float))
        except (KeyError, TypeError) as exc:
            raise ApproximatorError(f"malformed parameter JSON: {exc}") from exc


# -- approximator families ----------------------------------------------------------


def _softplus(z):
    xp = array_module(z)
    if xp is np:
        return np.logaddexp(0.0, z)
    return jax.nn.softplus(z)


def _relu(z):
    xp = array_module(z)
    return xp.maximum(z, 0.0)


@dataclass(frozen=True)
class FourierKernel:
    """Even truncated cosine series a_0 + sum_k a_k cos(2 pi k x / L)."""

    n_modes: int = 20
    length: float = np.pi

    def __post_init__(self):
        if self.n_modes < 0:
            raise ApproximatorError("n_modes must be >= 0")

    @property
    def size(self) -> int:
        return self.n_modes + 1

    def describe(self) -> dict:
        return {"kind": "fourier-kernel", "n_modes": self.n_modes, "length": self.length}

    def design(self, x) -> np.ndarray:
        """Evaluation matrix, shape (len(x), size)."""
        k = np.arange(self.n_modes + 1)
        return np.cos(2.0 * np.pi * np.outer(np.asarray(x, dtype=float), k) / self.length)

    def eval_raw(self, theta, x):
        return self.design(x) @ theta

    def init(self, seed: int, scheme: str = "small-normal", scale: float = 0.1) -> np.ndarray:
        rng = np.random.default_rng(seed)
        if scheme == "small-normal":
            return scale * rng.standard_normal(self.size)
        if scheme == "glorot-uniform":
            lim = np.sqrt(6.0 / (1 + self.size))
            return rng.uniform(-lim, lim, self.size)
        raise ApproximatorError(f"unknown init scheme {scheme!r}")


@dataclass(frozen=True)
class FourierPotential:
    """Periodic series a_0 + sum_k a_k cos(2 pi k x / L) + b_k sin(2 pi k x / L)."""

    n_modes: int = 12
    length: float = np.pi

    def __post_init__(self):
        if self.n_modes < 0:
            raise ApproximatorError("n_modes must be >= 0")

    @property
    def size(self) -> int:
        return 2 * self.n_modes + 1

    def describe(self) -> dict:
        return {"kind": "fourier-potential", "n_modes": self.n_modes, "length": self.length}

    def design(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k = np.arange(self.n_modes + 1)
        phase = 2.0 * np.pi * np.outer(x, k) / self.length
        return np.concatenate([np.cos(phase), np.sin(phase[:, 1:])], axis=1)

    def eval_raw(self, theta, x):
        return self.design(x) @ theta

    def init(self, seed: int, scheme: str = "small-normal", scale: float = 0.1) -> np.ndarray:
        return FourierKernel(self.size - 1, self.length).init(seed, scheme, scale)


@dataclass(frozen=True)
class NetworkApproximator:
    """Fully connected scalar network with a non-negative output activation.

    ``activation="mixed"`` uses relu in the hidden layers and softplus at the
    output.  The input is x scaled by 2/L so the default initialization is
    domain-agnostic.
    """

    widths: tuple[int, ...] = (16, 16)
    activation: str = "softplus"
    length: float = np.pi

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.activation not in ACTIVATIONS:
            raise ApproximatorError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if any(w < 1 for w in self.widths):
            raise ApproximatorError("layer widths must be positive")

    @property
    def _dims(self) -> list[int]:
        return [1, *self.widths, 1]

    @property
    def size(self) -> int:
        d = self._dims
        return sum(d[i + 1] * d[i] + d[i + 1] for i in range(len(d) - 1))

    def describe(self) -> dict:
        return {"kind": "network", "widths": list(self.widths), "activation": self.activation,
                "length": self.length}

    def unpack(self, theta) -> list[tuple[object, object]]:
        d = self._dims
        out, pos = [], 0
        for i in range(len(d) - 1):
            n_w = d[i + 1] * d[i]
            w = theta[pos:pos + n_w].reshape(d[i + 1], d[i])
            pos += n_w
            b = theta[pos:pos + d[i + 1]]
            pos += d[i + 1]
            out.append((w, b))
        return out

    def eval_raw(self, theta, x):
        xp = array_module(theta)
        hidden = _relu if self.activation in ("relu", "mixed") else _softplus
        final = _relu if self.activation == "relu" else _softplus
        z = xp.asarray(x, dtype=float)[:, None] * (2.0 / self.length)
        layers = self.unpack(theta)
        for w, b in layers[:-1]:
            z = hidden(z @ w.T + b)
        w, b = layers[-1]
        return final(z @ w.T + b)[:, 0]

    def init(self, seed: int, scheme: str = "glorot-uniform", scale: float = 0.1) -> np.ndarray:
        rng = np.random.default_rng(seed)
        d = self._dims
        blocks = []
        for i in range(len(d) - 1):
            if scheme == "glorot-uniform":
                lim = np.sqrt(6.0 / (d[i] + d[i + 1]))
                blocks.append(rng.uniform(-lim, lim, d[i + 1] * d[i]))
            elif scheme == "small-normal":
                blocks.append(scale * rng.standard_normal(d[i + 1] * d[i]))
            else:
                raise ApproximatorError(f"unknown init scheme {scheme!r}")
            blocks.append(np.zeros(d[i + 1]))
        return np.concatenate(blocks)


Approximator = FourierKernel | FourierPotential | NetworkApproximator


def approximator_from_description(desc: dict, length: float | None = None) -> Approximator:
    """Rebuild an approximator from ``describe()`` output or a config block."""
    kind = desc.get("kind")
    L = float(desc.get("length", length if length is not None else np.pi))
    if kind == "fourier-kernel":
        return FourierKernel(int(desc.get("n_modes", 20)), L)
    if kind == "fourier-potential":
        return FourierPotential(int(desc.get("n_modes", 12)), L)
    if kind == "network":
        return NetworkApproximator(tuple(desc.get("widths", (16, 16))), desc.get("activation", "softplus"), L)
    raise ApproximatorError(f"unknown approximator kind {kind!r}")


def default_approximator(role: str, kind: str, length: float, **options) -> Approximator:
    """Factory used by configs: ``kind`` is "fourier" or "network"."""
    if kind == "fourier":
        if role == "kernel":
            return FourierKernel(int(options.get("n_modes", 20)), length)
        return FourierPotential(int(options.get("n_modes", 12)), length)
    if kind == "network":
        return NetworkApproximator(tuple(options.get("widths", (16, 16))), options.get("activation", "softplus"), length)
    raise ApproximatorError(f"unknown approximator kind {kind!r}")


# -- constraints -------------------------------------------------------------------


def eval_raw(approx: Approximator, theta, x):
    return approx.eval_raw(theta, x)


def constrain_kernel(raw_at_abs_x):
    """min(raw) - raw: even input in, even non-positive output with max 0."""
    xp = array_module(raw_at_abs_x)
    return xp.min(raw_at_abs_x) - raw_at_abs_x


def constrain_potential(raw, grid: PeriodicGrid):
    return raw - grid.mean(raw)


def kernel_on_grid(approx: Approximator, theta, grid: PeriodicGrid):
    """Constrained kernel at the grid nodes (raw evaluated at |x|)."""
    return constrain_kernel(approx.eval_raw(theta, np.abs(grid.x)))


def potential_on_grid(approx: Approximator, theta, grid: PeriodicGrid):
    return constrain_potential(approx.eval_raw(theta, grid.x), grid)


def init_params(approx: Approximator, seed: int, scheme: str | None = None, scale: float = 0.1) -> np.ndarray:
    """Deterministic initialization; Fourier defaults to small-normal, networks to glorot-uniform."""
    if scheme is None:
        scheme = "glorot-uniform" if isinstance(approx, NetworkApproximator) else "small-normal"
    if scheme not in INIT_SCHEMES:
        raise ApproximatorError(f"unknown init scheme {scheme!r}")
    return approx.init(seed, scheme, scale)


# -- differentiation ---------------------------------------------------------------


def gradient(loss_value_fn: Callable, at) -> np.ndarray:
    """Reverse-mode gradient of ``loss_value_fn`` at ``at``.

    ``at`` may be a ParamVector (the function then receives a ParamVector with
    traced values) or a plain array.  Non-finite results are re-traced with
    NaN checking on so the error names the offending primitive.
    """
    if isinstance(at, ParamVector):
        def fn(v):
            return loss_value_fn(at.with_values(v))
        x0 = jnp.asarray(at.values)
    else:
        fn = loss_value_fn
        x0 = jnp.asarray(at, dtype=float)
    g = np.asarray(jax.grad(fn)(x0))
    if np.all(np.isfinite(g)):
        return g
    detail = "non-finite gradient"
    try:
        with jax.debug_nans(True), jax.debug_infs(True):
            jax.grad(fn)(x0)
    except FloatingPointError as exc:
        detail = str(exc).splitlines()[0]
    raise GradientError(detail)


# -- config hook used by models.realize_kernel / realize_potential ---------------------


def realize_approximator(params: dict, grid: PeriodicGrid, role: str = "kernel") -> np.ndarray:
    """Constrained grid values of a stored approximator.

    ``params`` holds ``{"approximator": describe()-dict, "values": [...]}``,
    or ``{"path": file}`` pointing at a JSON file with that content.
    """
    if "path" in params:
        params = json.loads(Path(params["path"]).read_text())
    try:
        desc = dict(params["approximator"])
        theta = np.asarray(params["values"], dtype=float)
    except (KeyError, TypeError) as exc:
        raise ApproximatorError(f"approximator params need 'approximator' and 'values': {exc}") from exc
    desc.setdefault("length", grid.length)
    if desc.get("kind") == "fourier":
        opts = {k: v for k, v in desc.items() if k not in ("kind", "length")}
        approx = default_approximator(role, "fourier", float(desc["length"]), **opts)
    else:
        approx = approximator_from_description(desc)
    if theta.shape != (approx.size,):
        raise ApproximatorError(f"expected {approx.size} values, got {theta.shape}")
    if role == "kernel":
        return np.asarray(kernel_on_grid(approx, theta, grid))
    if role == "potential":
        return np.asarray(potential_on_grid(approx, theta, grid))
    raise ApproximatorError(f"role must be 'kernel' or 'potential', got {role!r}")
