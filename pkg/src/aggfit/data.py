"""Synthetic observations and file I/O.

Clean steady states are resampled at n evenly spaced points, perturbed with
clipped Gaussian noise drawn from a counter-based generator, and mapped back
onto the solver grid before fitting.  Profiles travel as two-column CSV
files with an ``x,u`` header.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridFunction, PeriodicGrid

INTERP_METHODS = ("trig", "linear-periodic")


class DataError(ValueError):
    """Invalid samples, arguments or file contents."""


class CSVParseError(DataError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class Samples:
    """Point samples (x_i, u_i) of one periodic profile."""

    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        u = np.array(self.u, dtype=float).reshape(-1)
        if x.shape != u.shape:
            raise DataError(f"x and u differ in length ({x.size} vs {u.size})")
        x.setflags(write=False)
        u.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)

    def __len__(self):
        return self.x.size

    def __iter__(self):
        return iter(zip(self.x.tolist(), self.u.tolist()))


@dataclass
class Observation:
    samples: Samples
    meta: dict = field(default_factory=dict)
    grid_projection: GridFunction | None = None


# -- generation -------------------------------------------------------------------


def sample_points(n: int, length: float) -> np.ndarray:
    return -0.5 * length + length * np.arange(n) / n


def downsample(u: GridFunction, n: int) -> Samples:
    """Values of the band-limited interpolant of ``u`` at n evenly spaced points."""
    grid = u.grid
    if not 2 <= n <= grid.n_points:
        raise DataError(f"n must be in [2, {grid.n_points}], got {n}")
    x = sample_points(n, grid.length)
    if n == grid.n_points:
        return Samples(x, u.values.copy())
    return Samples(x, grid.trig_interpolate(u.values, x))


def _philox_normals(seed: int, n: int) -> np.ndarray:
    """Standard normals where draw i depends only on (seed, i).

    Raw Philox outputs 2i and 2i+1 feed a Box-Muller transform; the counter,
    not call order, fixes which raw words a point receives.
    """
    raw = np.random.Philox(key=int(seed) & (2**64 - 1)).random_raw(2 * n).reshape(n, 2)
    u1 = ((raw[:, 0] >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
    u2 = ((raw[:, 1] >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def add_noise(samples: Samples, noise_sigma: float, seed: int) -> Samples:
    """Independent N(u_i, sigma^2) draws, negatives set to 0."""
    if not noise_sigma >= 0:
        raise DataError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if noise_sigma == 0:
        return Samples(samples.x, samples.u.copy())
    z = _philox_normals(seed, len(samples))
    return Samples(samples.x, np.maximum(samples.u + noise_sigma * z, 0.0))


# -- projection onto the solver grid ------------------------------------------------


def _check_samples(s: Samples, length: float) -> None:
    if len(s) < 2:
        raise DataError("need at least two samples")
    d = np.diff(s.x)
    if np.any(d == 0):
        raise DataError("duplicate sample locations")
    if np.any(d < 0):
        raise DataError("sample locations must be increasing")
    if s.x[-1] - s.x[0] >= length:
        raise DataError("samples extend beyond one period")


def _trig_resample(s: Samples, grid: PeriodicGrid) -> np.ndarray:
    n = len(s)
    expected = sample_points(n, grid.length)
    if not np.allclose(s.x, expected, rtol=0, atol=1e-9 * grid.length):
        raise DataError("trig interpolation needs evenly spaced samples starting at -L/2")
    if n == grid.n_points:
        return s.u.copy()
    return _dft_interpolate(s.u, grid)


def _dft_interpolate(values: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """Band-limited interpolant of n equispaced samples (any n >= 2)."""
    n = values.size
    c = np.fft.rfft(values) / n
    k = np.arange(c.size)
    w = np.full(c.size, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    theta = 2.0 * np.pi * (grid.x + 0.5 * grid.length) / grid.length
    terms = w[None, :] * np.real(c[None, :] * np.exp(1j * np.outer(theta, k)))
    if n % 2 == 0:
        terms[:, -1] = np.real(c[-1]) * np.cos(k[-1] * theta)
    return terms.sum(axis=1)


def interpolate(obs: Observation | Samples, grid: PeriodicGrid, method: str = "trig",
                renormalize: bool = True) -> GridFunction:
    """Map samples onto the grid nodes; optionally rescale to unit mass.

    ``linear-periodic`` is the safer choice for noisy data, since the
    trigonometric interpolant spreads noise into every mode.
    """
    samples = obs.samples if isinstance(obs, Observation) else obs
    if method not in INTERP_METHODS:
        raise DataError(f"method must be one of {INTERP_METHODS}, got {method!r}")
    _check_samples(samples, grid.length)
    if method == "trig":
        vals = _trig_resample(samples, grid)
    else:
        vals = np.interp(grid.x, samples.x, samples.u, period=grid.length)
    if renormalize:
        mass = grid.integrate(vals)
        if not mass > 0:
            raise DataError("interpolated profile has non-positive mass")
        vals = vals / mass
    out = GridFunction(grid, vals)
    if isinstance(obs, Observation):
        obs.grid_projection = out
    return out


# -- files ----------------------------------------------------------------------------


def write_solution_csv(path, f: GridFunction | Samples) -> Path:
    path = Path(path)
    if isinstance(f, GridFunction):
        x, u = f.grid.x, f.values
    else:
        x, u = f.x, f.u
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "u"])
        for xi, ui in zip(x, u):
            w.writerow([f"{xi:.17g}", f"{ui:.17g}"])
    return path


def read_solution_csv(path) -> Samples:
    """Parse an ``x,u`` file; negative u is accepted with a warning."""
    path = Path(path)
    xs, us = [], []
    with path.open(newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or [h.strip() for h in header] != ["x", "u"]:
            raise CSVParseError(path, 1, f"expected header 'x,u', got {header!r}")
        for lineno, row in enumerate(rows, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise CSVParseError(path, lineno, f"expected 2 columns, got {len(row)}")
            try:
                xi, ui = float(row[0]), float(row[1])
            except ValueError as exc:
                raise CSVParseError(path, lineno, str(exc)) from None
            if not (np.isfinite(xi) and np.isfinite(ui)):
                raise CSVParseError(path, lineno, "non-finite value")
            if xs and xi <= xs[-1]:
                raise CSVParseError(path, lineno, "x values must be strictly increasing")
            xs.append(xi)
            us.append(ui)
    if not xs:
        raise CSVParseError(path, 2, "no data rows")
    if min(us) < 0:
        warnings.warn(f"{path}: {sum(v < 0 for v in us)} negative u values", stacklevel=2)
    return Samples(np.array(xs), np.array(us))


def samples_to_grid_function(samples: Samples, grid: PeriodicGrid, atol: float = 1e-9) -> GridFunction:
    """Samples that sit exactly on the grid nodes, as a GridFunction."""
    if len(samples) != grid.n_points or not np.allclose(samples.x, grid.x, rtol=0, atol=atol):
        raise DataError("samples are not on the grid nodes")
    return GridFunction(grid, samples.u)


def load_profile(path, grid: PeriodicGrid, method: str | None = None, renormalize: bool = True) -> GridFunction:
    """Read a CSV and bring it onto ``grid`` (node data is taken as is)."""
    s = read_solution_csv(path)
    if len(s) == grid.n_points and np.allclose(s.x, grid.x, rtol=0, atol=1e-9):
        return GridFunction(grid, s.u)
    return interpolate(s, grid, method or "linear-periodic", renormalize)


def write_manifest(path, files, noise_sigma: float, n_samples: int, seed: int, instance: str, **extra) -> Path:
    path = Path(path)
    data = {"files": [str(f) for f in files], "noise_sigma": noise_sigma, "n_samples": n_samples,
            "seed": seed, "instance": instance, **extra}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    data = json.loads(Path(path).read_text())
    missing = {"files", "noise_sigma", "n_samples", "seed", "instance"} - set(data)
    if missing:
        raise DataError(f"{path}: manifest lacks {sorted(missing)}")
    return data
