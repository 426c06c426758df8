"""Built-in interaction kernels and external potentials, and PDE instances.

Kernel formulas are evaluated at the physical coordinate x in (-L/2, L/2]
and extended periodically.  Potential formulas are written for a domain of
length pi; they are evaluated at y = pi x / L so that they keep their shape
on other domain lengths (identity for the default L = pi).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .grid import GridFunction, PeriodicGrid


class ParameterError(ValueError):
    """A functional-form parameter lies outside its documented range."""


class ConfigError(ValueError):
    """Instance configuration failed to parse or validate."""


KERNEL_FAMILIES = ("multimodal", "triangle", "tophat", "exponential", "piecewise", "tabulated", "approximator")
POTENTIAL_FAMILIES = ("constant", "plateau", "sink", "wave", "mountain", "tabulated", "approximator")


@dataclass(frozen=True)
class KernelSpec:
    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ParameterError(f"unknown kernel family {self.family!r}")


@dataclass(frozen=True)
class PotentialSpec:
    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in POTENTIAL_FAMILIES:
            raise ParameterError(f"unknown potential family {self.family!r}")


# convenience constructors mirroring the named forms
def multimodal(n: float, d: float) -> KernelSpec:
    return KernelSpec("multimodal", {"n": n, "d": d})


def triangle(w: float) -> KernelSpec:
    return KernelSpec("triangle", {"w": w})


def tophat(w: float) -> KernelSpec:
    return KernelSpec("tophat", {"w": w})


def exponential() -> KernelSpec:
    return KernelSpec("exponential", {})


def piecewise(*pieces: tuple[Optional[float], KernelSpec]) -> KernelSpec:
    """Pieces are (upper bound on |x|, spec); the last bound may be None."""
    return KernelSpec("piecewise", {"pieces": list(pieces)})


def constant() -> PotentialSpec:
    return PotentialSpec("constant", {})


def plateau(a: float, n: float) -> PotentialSpec:
    return PotentialSpec("plateau", {"a": a, "n": n})


def sink(w: float) -> PotentialSpec:
    return PotentialSpec("sink", {"w": w})


def wave(n: float, d: float) -> PotentialSpec:
    return PotentialSpec("wave", {"n": n, "d": d})


def mountain(m: int, n: float) -> PotentialSpec:
    return PotentialSpec("mountain", {"m": m, "n": n})


def _positive(name, value):
    if not (np.isfinite(value) and value > 0):
        raise ParameterError(f"{name} must be positive, got {value}")
    return float(value)


def _width(w, grid):
    w = _positive("w", w)
    if w > grid.length / 2:
        raise ParameterError(f"w must lie in (0, L/2], got {w}")
    return w


def _tabulated_values(params, grid: PeriodicGrid) -> np.ndarray:
    if "values" in params:
        vals = params["values"]
        if isinstance(vals, GridFunction):
            if vals.grid == grid:
                return np.array(vals.values)
            x, vals = vals.grid.x, vals.values
        else:
            vals = np.asarray(vals, dtype=float)
            if vals.shape == (grid.n_points,):
                return vals.copy()
            x = -grid.length / 2 + grid.length * np.arange(len(vals)) / len(vals)
    elif "path" in params:
        import warnings

        from .data import read_solution_csv

        with warnings.catch_warnings():
            # kernels are non-positive by convention; the density warning does not apply
            warnings.simplefilter("ignore", UserWarning)
            samples = read_solution_csv(params["path"])
        x, vals = samples.x, samples.u
    else:
        raise ParameterError("tabulated form needs 'values' or 'path'")
    if len(vals) == grid.n_points and np.allclose(x, grid.x):
        return np.asarray(vals, dtype=float)
    return np.interp(grid.x, x, vals, period=grid.length)


def _kernel_formula(spec: KernelSpec, grid: PeriodicGrid, x: np.ndarray) -> np.ndarray:
    p = spec.params
    ax = np.abs(x)
    if spec.family == "multimodal":
        n, d = _positive("n", p["n"]), _positive("d", p["d"])
        return -np.exp(-d * x**2) * np.cos(n * x / 2) ** 2
    if spec.family == "triangle":
        w = _width(p["w"], grid)
        return np.where(ax <= w, ax - w, 0.0)
    if spec.family == "tophat":
        w = _width(p["w"], grid)
        return np.where(ax <= w, -1.0, 0.0)
    if spec.family == "exponential":
        return np.exp(-grid.length / 2) - np.exp(-ax)
    if spec.family == "piecewise":
        pieces = p["pieces"]
        if not pieces:
            raise ParameterError("piecewise kernel needs at least one piece")
        out = np.full_like(x, np.nan)
        lower = 0.0
        for bound, sub in pieces:
            upper = np.inf if bound is None else float(bound)
            if upper <= lower:
                raise ParameterError("piecewise bounds must increase")
            mask = (ax >= lower) & (ax <= upper) & np.isnan(out)
            out[mask] = _kernel_formula(sub, grid, x)[mask]
            lower = upper
        if np.isnan(out).any():
            raise ParameterError("piecewise kernel does not cover the whole domain")
        return out
    if spec.family == "tabulated":
        return _tabulated_values(p, grid)
    if spec.family == "approximator":
        from .approximators import realize_approximator

        return np.asarray(realize_approximator(p, grid, role="kernel"))
    raise ParameterError(f"unknown kernel family {spec.family!r}")


def normalize_kernel(values: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """Symmetrize, then shift so that max W = 0."""
    w = grid.symmetrize(np.asarray(values, dtype=float))
    return w - w.max()


def normalize_potential(values: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return v - grid.mean(v)


def realize_kernel(spec: KernelSpec, grid: PeriodicGrid) -> GridFunction:
    if spec.family == "approximator":
        # approximator outputs are already constrained
        return GridFunction(grid, _kernel_formula(spec, grid, grid.x))
    raw = _kernel_formula(spec, grid, grid.x)
    return GridFunction(grid, normalize_kernel(raw, grid))


def _potential_formula(spec: PotentialSpec, grid: PeriodicGrid) -> np.ndarray:
    p = spec.params
    y = np.pi * grid.x / grid.length
    if spec.family == "constant":
        return np.zeros(grid.n_points)
    if spec.family == "plateau":
        a, n = float(p["a"]), _positive("n", p["n"])
        return np.tanh(a * np.sin(2 * n * y))
    if spec.family == "sink":
        w = _positive("w", p["w"])
        return -np.cos(4 / np.pi * np.tanh(w * y) / np.tanh(w * np.pi / 2))
    if spec.family == "wave":
        n, d = _positive("n", p["n"]), _positive("d", p["d"])
        return -np.cos(2 * n * y) + np.cos(6 * n * y) / d
    if spec.family == "mountain":
        m, n = p["m"], _positive("n", p["n"])
        if int(m) != m or m < 0:
            raise ParameterError(f"m must be a nonnegative integer, got {m}")
        return np.sin(2 * n * y) ** (1 + 2 * int(m))
    if spec.family == "tabulated":
        return _tabulated_values(p, grid)
    if spec.family == "approximator":
        from .approximators import realize_approximator

        return np.asarray(realize_approximator(p, grid, role="potential"))
    raise ParameterError(f"unknown potential family {spec.family!r}")


def realize_potential(spec: PotentialSpec, grid: PeriodicGrid) -> GridFunction:
    return GridFunction(grid, normalize_potential(_potential_formula(spec, grid), grid))


@dataclass(frozen=True)
class ModelInstance:
    """A fully specified stationary problem: kernel, potential, kappa, sigma."""

    grid: PeriodicGrid
    W: GridFunction
    V: GridFunction
    kappa: float
    sigma: float = 1.0
    name: str = ""

    def __post_init__(self):
        if not (np.isfinite(self.kappa) and self.kappa >= 0):
            raise ParameterError(f"kappa must be >= 0, got {self.kappa}")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")
        if self.W.grid != self.grid or self.V.grid != self.grid:
            raise ParameterError("W and V must live on the instance grid")

    @classmethod
    def build(cls, W: KernelSpec, V: PotentialSpec, kappa: float, sigma: float = 1.0,
              grid: PeriodicGrid | None = None, name: str = "") -> "ModelInstance":
        grid = grid or PeriodicGrid()
        return cls(grid, realize_kernel(W, grid), realize_potential(V, grid), float(kappa), float(sigma), name)

    def with_kappa(self, kappa: float) -> "ModelInstance":
        return ModelInstance(self.grid, self.W, self.V, float(kappa), self.sigma, self.name)

    @property
    def potential_is_constant(self) -> bool:
        return bool(np.ptp(self.V.values) < 1e-14)


# -- configuration ---------------------------------------------------------


class FormConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    family: str
    params: dict[str, Any] = Field(default_factory=dict)


class InstanceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    domain_length: float = Field(default=math.pi, gt=0)
    grid_points: int = Field(default=256, ge=8)
    sigma: float = Field(default=1.0, gt=0)
    kappa: float = Field(ge=0)
    W: FormConfig
    V: FormConfig = Field(default_factory=lambda: FormConfig(family="constant"))
    name: str = ""

    @field_validator("grid_points")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("grid_points must be even")
        return v


def _kernel_spec(cfg: FormConfig, where: str, base: Path | None) -> KernelSpec:
    fam = cfg.family.lower()
    if fam not in KERNEL_FAMILIES:
        raise ConfigError(f"{where}.family: unknown kernel family {cfg.family!r}")
    params = dict(cfg.params)
    if fam == "piecewise":
        pieces = []
        for i, piece in enumerate(params.get("pieces", [])):
            try:
                sub = FormConfig.model_validate(piece["W"])
            except (KeyError, TypeError, ValidationError) as exc:
                raise ConfigError(f"{where}.params.pieces[{i}].W: {exc}") from None
            pieces.append((piece.get("upto"), _kernel_spec(sub, f"{where}.params.pieces[{i}].W", base)))
        params = {"pieces": pieces}
    if fam == "tabulated" and "path" in params and base is not None:
        params["path"] = str((base / params["path"]).resolve())
    return KernelSpec(fam, params)


def _potential_spec(cfg: FormConfig, where: str, base: Path | None) -> PotentialSpec:
    fam = cfg.family.lower()
    if fam not in POTENTIAL_FAMILIES:
        raise ConfigError(f"{where}.family: unknown potential family {cfg.family!r}")
    params = dict(cfg.params)
    if fam == "tabulated" and "path" in params and base is not None:
        params["path"] = str((base / params["path"]).resolve())
    return PotentialSpec(fam, params)


def parse_instance_config(config: Union[str, dict, Path], base_dir: Path | None = None) -> InstanceConfig:
    """Validate a JSON text / dict / file against the instance schema."""
    if isinstance(config, Path):
        base_dir = base_dir or config.parent
        config = config.read_text()
    if isinstance(config, str):
        try:
            config = json.loads(config)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
    try:
        return InstanceConfig.model_validate(config)
    except ValidationError as exc:
        msgs = ["{}: {}".format(".".join(str(p) for p in e["loc"]) or "<root>", e["msg"]) for e in exc.errors()]
        raise ConfigError("; ".join(msgs)) from None


def instance_from_config(config: Union[str, dict, Path], base_dir: Path | None = None) -> ModelInstance:
    """Parse an instance config and realize W and V on its grid."""
    cfg = parse_instance_config(config, base_dir)
    if isinstance(config, Path):
        base_dir = base_dir or config.parent
    grid = PeriodicGrid(cfg.domain_length, cfg.grid_points)
    wspec = _kernel_spec(cfg.W, "W", base_dir)
    vspec = _potential_spec(cfg.V, "V", base_dir)
    try:
        W = realize_kernel(wspec, grid)
        V = realize_potential(vspec, grid)
    except KeyError as exc:
        raise ConfigError(f"missing parameter {exc.args[0]!r}") from None
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None
    return ModelInstance(grid, W, V, cfg.kappa, cfg.sigma, cfg.name)


# Named reference instances: (kernel, potential, kappa) with sigma = 1 on L = pi.
REFERENCE_INSTANCES: dict[str, tuple[KernelSpec, PotentialSpec, float]] = {
    "mm3_flat": (multimodal(3, 1), constant(), 8.0),
    "mm2_plateau": (multimodal(2, 1.5), plateau(2, 1.5), 5.0),
    "loss_A": (triangle(0.6), constant(), 10.0),
    "loss_B": (tophat(0.5), constant(), 6.0),
    "loss_C": (multimodal(5, 2), constant(), 10.0),
    "loss_D": (piecewise((0.25, tophat(0.5)), (None, multimodal(3, 1.5))), constant(), 20.0),
    "series_A": (exponential(), constant(), 10.0),
    "series_B": (piecewise((0.15, tophat(0.5)), (None, multimodal(3, 1.5))), constant(), 10.0),
    "series_C": (multimodal(5, 0.5), constant(), 20.0),
    "series_D": (multimodal(3, 2), constant(), 6.0),
    "kernel_A": (triangle(0.6), constant(), 10.0),
    "kernel_B": (tophat(0.5), constant(), 10.0),
    "kernel_C": (multimodal(5, 2), constant(), 10.0),
    "kernel_D": (piecewise((0.25, tophat(0.5)), (None, multimodal(3, 1.5))), constant(), 10.0),
    "kernel_noisy": (multimodal(1, 3), constant(), 30.0),
    "spectrum_1": (multimodal(3, 2), constant(), 8.0),
    "spectrum_2": (triangle(0.4), constant(), 19.0),
    "joint_A": (triangle(0.8), sink(1.0), 6.0),
    "joint_B": (triangle(0.8), wave(1, 1.0), 10.0),
    "joint_C": (multimodal(1, 3.0), plateau(2.0, 2), 20.0),
    "joint_D": (tophat(0.5), mountain(2, 2), 20.0),
}

# kappa values sampled along the branches of the mm2_plateau instance
BRANCH_SAMPLE_KAPPAS = (4.0, 4.02, 4.1, 4.5, 5.0, 6.0)


def reference_instance(name: str, grid: PeriodicGrid | None = None) -> ModelInstance:
    W, V, kappa = REFERENCE_INSTANCES[name]
    return ModelInstance.build(W, V, kappa, grid=grid, name=name)
