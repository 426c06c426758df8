"""Command-line front end: ``aggfit {solve,synth,fit,bifurcate,diagnose}``.

A run reads one JSON config, validates all of it, does its work and writes
CSV/JSON outputs plus a ``manifest.json`` into ``--out``.  Stochastic pieces
draw their seeds from the master seed through :func:`derive_seed`, so a
rerun with the same config and seed reproduces every output byte for byte.

Config layout (every section optional except ``instance``)::

    {"instance": "mm3_flat" | {InstanceConfig fields},
     "seed": 0,
     "solve": {...}, "synth": {...}, "fit": {...},
     "bifurcate": {...}, "diagnose": {...}}
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
from pydantic import AliasChoices, BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .approximators import default_approximator
from .data import (
    DataError,
    add_noise,
    downsample,
    load_profile,
    read_manifest,
    write_manifest,
    write_solution_csv,
)
from .grid import GridFunction
from .inference import (
    THRESHOLD_PRESETS,
    InferenceError,
    InferenceProblem,
    FitSchedule,
    deconvolve_kernel,
    derive_seed,
    identifiability_band,
    multistart_fit,
    nonidentifiability_construct,
    spectrum_report,
)
from .models import REFERENCE_INSTANCES, ConfigError, ModelInstance, instance_from_config, reference_instance
from .steady_state import (
    InputError,
    NoConvergence,
    NumericalBlowup,
    SteadyStateSet,
    bifurcation_points,
    continue_branch,
    enumerate_steady_states,
    fp_residual,
    free_energy,
    quotient_distance,
    symmetry_shifts,
)

log = logging.getLogger("aggfit")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_OPTIMIZER = 0, 2, 3, 4


class CLIError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


# -- config schema -------------------------------------------------------------------


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SolveSection(_Section):
    seed_count: int = Field(default=16, ge=1)
    dedup_tol: float = Field(default=1e-4, gt=0)
    tol: float = Field(default=1e-9, gt=0)
    k_max: int = Field(default=6, ge=1)


class NoiseLevel(_Section):
    n_samples: int = Field(ge=2)
    noise_sigma: float = Field(ge=0)


class SynthSection(_Section):
    levels: list[NoiseLevel] = Field(default_factory=lambda: [NoiseLevel(n_samples=100, noise_sigma=0.0)])
    repeats: int = Field(default=1, ge=1)
    states: list[str] = Field(default_factory=list)


class ApproxSection(_Section):
    kind: Literal["fourier", "network"] = "fourier"
    n_modes: Optional[int] = Field(default=None, ge=1)
    widths: Optional[list[int]] = None
    activation: Literal["softplus", "relu", "mixed"] = "softplus"

    def build(self, role: str, length: float):
        opts: dict[str, Any] = {"activation": self.activation}
        if self.n_modes is not None:
            opts["n_modes"] = self.n_modes
        if self.widths is not None:
            opts["widths"] = tuple(self.widths)
        return default_approximator(role, self.kind, length, **opts)


class AdamBlock(_Section):
    lr: float = Field(default=1e-3, ge=0)
    iters: int = Field(default=50_000, ge=1)


class FitSection(_Section):
    unknowns: list[Literal["W", "V", "kappa"]] = Field(default_factory=lambda: ["W"])
    loss: Literal["fp", "pde"] = "fp"
    observations: list[str] = Field(default_factory=list)
    manifest: Optional[str] = None
    interp: Optional[Literal["trig", "linear-periodic"]] = None
    renormalize: bool = True
    kappas: Optional[list[Optional[float]]] = None
    kernel: ApproxSection = Field(default_factory=ApproxSection)
    potential: ApproxSection = Field(default_factory=ApproxSection)
    kernel_depth: Optional[float] = Field(default=None, gt=0)
    kappa_init: float = Field(default=1.0, gt=0)
    n_starts: int = Field(default=8, ge=1, validation_alias=AliasChoices("n_starts", "starts"))
    adam: Optional[AdamBlock] = None
    adam_lr: float = Field(default=1e-3, ge=0)
    adam_iters: int = Field(default=50_000, ge=1)
    gauss_newton_evals: int = Field(default=200, ge=0)
    lbfgs_iters: int = Field(default=2_000, ge=0)
    trace_stride: int = Field(default=100, ge=1)
    threshold: Union[float, Literal["default", "loose", "strict"]] = "default"
    threshold_factor_: Optional[float] = Field(default=None, gt=0, validation_alias="threshold_factor")
    identifiable_rtol: float = Field(default=0.1, gt=0)

    @model_validator(mode="after")
    def _fold_aliases(self):
        if self.adam is not None:
            self.adam_lr, self.adam_iters = self.adam.lr, self.adam.iters
        if self.threshold_factor_ is not None:
            self.threshold = self.threshold_factor_
        return self

    @field_validator("unknowns")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("at least one unknown is required")
        return sorted(set(v))

    @property
    def threshold_factor(self) -> float:
        t = self.threshold
        return THRESHOLD_PRESETS[t] if isinstance(t, str) else float(t)


class BifurcateSection(_Section):
    kappa_range: Optional[tuple[float, float]] = None
    steps: int = Field(default=11, ge=2)
    kappas: Optional[list[float]] = None
    k_max: int = Field(default=20, ge=1)
    seed_count: int = Field(default=8, ge=1)


class DiagnoseSection(_Section):
    states: list[str] = Field(default_factory=list)
    blind_threshold: float = Field(default=1e-8, gt=0)
    q_mode: int = Field(default=2, ge=1)
    q_amplitude: float = 0.3


class RunConfig(_Section):
    instance: Union[str, dict[str, Any]]
    seed: int = 0
    solve: SolveSection = Field(default_factory=SolveSection)
    synth: SynthSection = Field(default_factory=SynthSection)
    fit: FitSection = Field(default_factory=FitSection)
    bifurcate: BifurcateSection = Field(default_factory=BifurcateSection)
    diagnose: DiagnoseSection = Field(default_factory=DiagnoseSection)


_FIT_KEYS = {"observations", "unknowns", "loss", "starts", "n_starts", "adam", "threshold_factor", "manifest"}


def load_run_config(path: Path) -> tuple[RunConfig, ModelInstance]:
    """Parse and fully validate a run config, including the model instance."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CLIError(f"cannot read config: {exc}", EXIT_CONFIG) from None
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: invalid JSON: {exc}", EXIT_CONFIG) from None
    if isinstance(raw, dict):
        # a flat fit-problem file: fit keys at the top level
        flat = {k: raw.pop(k) for k in list(raw) if k in _FIT_KEYS}
        if flat:
            fit = raw.setdefault("fit", {})
            if not isinstance(fit, dict):
                raise CLIError(f"{path}: fit must be an object", EXIT_CONFIG)
            fit.update(flat)
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        msgs = [f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors()]
        raise CLIError(f"{path}: " + "; ".join(msgs), EXIT_CONFIG) from None
    try:
        if isinstance(cfg.instance, str):
            if cfg.instance not in REFERENCE_INSTANCES:
                raise ConfigError(f"unknown instance name {cfg.instance!r}")
            inst = reference_instance(cfg.instance)
        else:
            inst = instance_from_config(cfg.instance, Path(path).parent)
    except (ConfigError, ValueError) as exc:
        raise CLIError(f"{path}: instance: {exc}", EXIT_CONFIG) from None
    b = cfg.bifurcate
    if b.kappa_range is not None and b.kappa_range[1] <= b.kappa_range[0]:
        raise CLIError(f"{path}: bifurcate.kappa_range must be ascending", EXIT_CONFIG)
    return cfg, inst


# -- run bookkeeping ----------------------------------------------------------------------


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, config_path: Path, seed: int, out: Path):
        self.command = command
        self.config_path = Path(config_path)
        self.seed = seed
        self.out = out
        self.inputs: list[Path] = [self.config_path]
        self.outputs: list[Path] = []
        self.t0 = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)

    def output(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def write_json(self, rel: str, data) -> Path:
        p = self.output(rel)
        p.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        return p

    def write_csv(self, rel: str, header: list[str], rows) -> Path:
        p = self.output(rel)
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(_fmt(v) for v in row))
        p.write_text("\n".join(lines) + "\n")
        return p

    def finish(self, status: int) -> Path:
        manifest = {
            "command": self.command,
            "config_path": str(self.config_path),
            "master_seed": self.seed,
            "tool_version": __version__,
            "exit_code": status,
            "inputs": [{"path": str(p), "sha256": file_hash(p)} for p in self.inputs if p.exists()],
            "outputs": [{"path": str(p.relative_to(self.out)), "sha256": file_hash(p)}
                        for p in self.outputs if p.exists()],
            "wall_clock_s": round(time.perf_counter() - self.t0, 3),
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


# -- shared steps -------------------------------------------------------------------------


def _solve(inst: ModelInstance, cfg: RunConfig) -> SteadyStateSet:
    s = cfg.solve
    try:
        states = enumerate_steady_states(inst, seed_count=s.seed_count, dedup_tol=s.dedup_tol, tol=s.tol,
                                         rng_seed=derive_seed(cfg.seed, "solve"), k_max=s.k_max)
    except (NoConvergence, NumericalBlowup, InputError) as exc:
        raise CLIError(f"steady-state solver failed: {exc}", EXIT_SOLVER) from None
    if len(states) == 0:
        raise CLIError("no steady state converged", EXIT_SOLVER)
    return states


def _load_states(paths: list[str], inst: ModelInstance, run: Run) -> list[np.ndarray]:
    base = run.config_path.parent
    out = []
    for rel in paths:
        p = (base / rel) if not Path(rel).is_absolute() else Path(rel)
        run.inputs.append(p)
        try:
            out.append(load_profile(p, inst.grid, "trig").values)
        except (OSError, DataError) as exc:
            raise CLIError(f"cannot load state {p}: {exc}", EXIT_CONFIG) from None
    return out


def _states_or_solve(paths: list[str], inst: ModelInstance, cfg: RunConfig, run: Run) -> list[np.ndarray]:
    if paths:
        return _load_states(paths, inst, run)
    return [s.profile.values for s in _solve(inst, cfg)]


# -- commands ---------------------------------------------------------------------------------


def cmd_solve(cfg: RunConfig, inst: ModelInstance, run: Run, threads: int) -> int:
    states = _solve(inst, cfg)
    records = []
    print(f"{'id':>3} {'residual_fp':>12} {'residual_pde':>12} {'branch_diag':>12} {'free_energy':>13}")
    for i, s in enumerate(states):
        path = run.output(f"states/state_{i}.csv")
        write_solution_csv(path, s.profile)
        fe = free_energy(s.profile.values, inst)
        records.append({"file": f"states/state_{i}.csv", "residual_fp": s.residual_fp,
                        "residual_pde": s.residual_pde, "branch_diag": s.branch_diag, "free_energy": fe})
        print(f"{i:>3} {s.residual_fp:12.3e} {s.residual_pde:12.3e} {s.branch_diag:12.6f} {fe:13.6f}")
    run.write_json("states.json", {"instance": inst.name, "kappa": inst.kappa, "states": records})
    return EXIT_OK


def cmd_synth(cfg: RunConfig, inst: ModelInstance, run: Run, threads: int) -> int:
    profiles = _states_or_solve(cfg.synth.states, inst, cfg, run)
    for li, level in enumerate(cfg.synth.levels):
        folder = f"level_{li}"
        files = []
        seeds = []
        for r in range(cfg.synth.repeats):
            for i, u in enumerate(profiles):
                seed = derive_seed(cfg.seed, "synth", li, r, i)
                try:
                    clean = downsample(GridFunction(inst.grid, u), level.n_samples)
                except DataError as exc:
                    raise CLIError(str(exc), EXIT_CONFIG) from None
                noisy = add_noise(clean, level.noise_sigma, seed)
                rel = f"{folder}/obs_r{r}_state{i}.csv"
                write_solution_csv(run.output(rel), noisy)
                files.append(f"obs_r{r}_state{i}.csv")
                seeds.append(seed)
        mpath = write_manifest(run.output(f"{folder}/manifest.json"), files, level.noise_sigma,
                               level.n_samples, cfg.seed, inst.name or "custom", point_seeds=seeds)
        print(f"level {li}: n={level.n_samples} sigma={level.noise_sigma} -> {len(files)} files ({mpath})")
    return EXIT_OK


def _observations(cfg: RunConfig, inst: ModelInstance, run: Run) -> list[np.ndarray]:
    f = cfg.fit
    base = run.config_path.parent
    entries: list[tuple[Path, str]] = []
    if f.manifest:
        mpath = base / f.manifest
        run.inputs.append(mpath)
        try:
            man = read_manifest(mpath)
        except (OSError, DataError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot read manifest: {exc}", EXIT_CONFIG) from None
        method = f.interp or ("trig" if man["noise_sigma"] == 0 else "linear-periodic")
        entries += [(mpath.parent / name, method) for name in man["files"]]
    entries += [(base / p, f.interp or "linear-periodic") for p in f.observations]
    if not entries:
        return [s.profile.values for s in _solve(inst, cfg)]
    out = []
    for p, method in entries:
        run.inputs.append(p)
        try:
            out.append(load_profile(p, inst.grid, method, f.renormalize).values)
        except (OSError, DataError) as exc:
            raise CLIError(f"cannot load observation {p}: {exc}", EXIT_CONFIG) from None
    return out


def cmd_fit(cfg: RunConfig, inst: ModelInstance, run: Run, threads: int, resolve: bool = False) -> int:
    f = cfg.fit
    obs = _observations(cfg, inst, run)
    L = inst.grid.length
    try:
        problem = InferenceProblem.from_instance(
            inst, obs, f.unknowns, kappas=f.kappas, loss_kind=f.loss,
            kernel_approx=f.kernel.build("kernel", L) if "W" in f.unknowns else None,
            potential_approx=f.potential.build("potential", L) if "V" in f.unknowns else None,
            kernel_depth=f.kernel_depth, kappa_init=f.kappa_init)
    except InferenceError as exc:
        raise CLIError(f"fit: {exc}", EXIT_CONFIG) from None
    schedule = FitSchedule(f.adam_lr, f.adam_iters, f.gauss_newton_evals, f.lbfgs_iters, f.trace_stride)
    ens = multistart_fit(problem, f.n_starts, schedule, cfg.seed, f.threshold_factor, threads)
    for i, r in enumerate(ens.runs):
        run.write_csv(f"traces/start_{i}.csv", ["iter", "best_loss"], r.trace)
    status = EXIT_OPTIMIZER if ens.all_failed else EXIT_OK
    summary: dict[str, Any] = {"unknowns": f.unknowns, "loss": f.loss, "n_observations": len(obs),
                               "threshold_factor": f.threshold_factor,
                               "runs": [r.to_json() for r in ens.runs]}
    if not ens.all_failed:
        best = ens.best
        band = identifiability_band(ens, problem)
        scale = max(float(np.abs(band.W_best).max()) if band.W_best is not None else 0.0,
                    float(np.abs(band.V_best).max()) if band.V_best is not None else 0.0, 1e-12)
        identifiable = None if band.n_accepted < 2 else bool(band.band_width <= f.identifiable_rtol * scale)
        summary.update({"best_seed": best.seed, "best_loss": best.final_loss, "kappa": best.recovered.get("kappa"),
                        "n_accepted": band.n_accepted, "band_width": band.band_width,
                        "kappa_range": band.kappa_range, "identifiable": identifiable})
        cols = [band.W_min, band.W_max, band.W_best, band.V_min, band.V_max, band.V_best]
        rows = ([x] + [None if c is None else c[j] for c in cols] for j, x in enumerate(band.x))
        run.write_csv("band.csv", ["x", "W_min", "W_max", "W_best", "V_min", "V_max", "V_best"], rows)
        print(f"best loss {best.final_loss:.3e} (seed {best.seed}), accepted {band.n_accepted}/{len(ens.runs)}, "
              f"band width {band.band_width:.3e}, identifiable: {identifiable}")
        if resolve:
            _resolve(cfg, inst, problem, best.recovered, obs, run)
    else:
        print("all optimizer starts failed", file=sys.stderr)
    run.write_json("fit_result.json", summary)
    return status


def _resolve(cfg: RunConfig, inst: ModelInstance, problem: InferenceProblem, rec: dict,
             obs: list[np.ndarray], run: Run) -> None:
    """Re-enumerate steady states of the fitted model and compare with the observations."""
    g = inst.grid
    kappa = rec["kappa"] if rec["kappa"] is not None else inst.kappa
    fitted = ModelInstance(g, GridFunction(g, rec["W"]), GridFunction(g, rec["V"]), kappa, inst.sigma,
                           (inst.name or "custom") + "-fitted")
    states = _solve(fitted, cfg)
    shifts = symmetry_shifts(fitted)
    for i, s in enumerate(states):
        write_solution_csv(run.output(f"resolved/state_{i}.csv"), s.profile)
    rows = []
    for j, u in enumerate(obs):
        d = [quotient_distance(u, s.profile.values, g, shifts) for s in states]
        k = int(np.argmin(d))
        rows.append((j, k, d[k]))
    run.write_csv("resolved/comparison.csv", ["observation", "nearest_resolved", "quotient_distance"], rows)


def cmd_bifurcate(cfg: RunConfig, inst: ModelInstance, run: Run, threads: int) -> int:
    b = cfg.bifurcate
    try:
        pred = bifurcation_points(inst.W, inst.sigma, k_max=min(b.k_max, inst.grid.n_points // 2 - 1))
    except InputError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from None
    run.write_csv("predictions.csv", ["mode", "kappa_star"], pred)
    if b.kappas is None and b.kappa_range is None:
        lo = 0.5 * pred[0][1] if pred else 0.0
        hi = 1.5 * pred[0][1] if pred else max(inst.kappa, 1.0)
        kappa_range = (lo, hi)
    else:
        kappa_range = b.kappa_range
    try:
        pts = continue_branch(inst, kappa_range, b.steps, kappas=b.kappas, seed_count=b.seed_count)
    except InputError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from None
    except (NoConvergence, NumericalBlowup) as exc:
        raise CLIError(f"continuation failed: {exc}", EXIT_SOLVER) from None
    run.write_csv("branches.csv", ["kappa", "branch_diag", "state_id"],
                  ((p.kappa, p.branch_diag, p.state_id) for p in pts))
    print(f"{len(pred)} predicted onsets; {len(pts)} branch points over {len({p.state_id for p in pts})} branches")
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig, inst: ModelInstance, run: Run, threads: int) -> int:
    d = cfg.diagnose
    g = inst.grid
    profiles = _states_or_solve(d.states, inst, cfg, run)
    true_coeffs = g.cosine_coeffs(inst.W.values)
    Q = d.q_amplitude * g.basis(d.q_mode)
    records = []
    for i, u in enumerate(profiles):
        rep = spectrum_report(u, g, d.blind_threshold)
        run.write_csv(f"spectrum/state_{i}.csv", ["k", "magnitude", "blind"],
                      ((k, m, k in rep.blind) for k, m in rep.modes))
        if inst.kappa > 0 and np.all(u > 0):
            coeffs = deconvolve_kernel(u, inst.V, inst.kappa, inst.sigma, g, d.blind_threshold)
            run.write_csv(f"deconvolution/state_{i}.csv", ["k", "coefficient", "true_coefficient"],
                          ((k, c, true_coeffs[k]) for k, c in sorted(coeffs.items())))
        W2, V2 = nonidentifiability_construct(inst.W, inst.V, u, Q, inst.kappa, g)
        alt = ModelInstance(g, GridFunction(g, W2), GridFunction(g, V2), inst.kappa, inst.sigma)
        residuals = [fp_residual(v, alt) for v in profiles]
        records.append({"state": i, "blind_modes": len(rep.blind), "residual_self": residuals[i],
                        "residual_others": {str(j): r for j, r in enumerate(residuals) if j != i}})
        print(f"state {i}: {len(rep.blind)} blind modes, constructed-pair residual {residuals[i]:.2e}")
    run.write_json("nonidentifiability.json", {"q_mode": d.q_mode, "q_amplitude": d.q_amplitude,
                                               "records": records})
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "synth": cmd_synth, "fit": cmd_fit,
            "bifurcate": cmd_bifurcate, "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="run config (JSON)")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--threads", type=int, default=1, help="parallel optimizer starts")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="aggfit", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"aggfit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="enumerate steady states")
    sub.add_parser("synth", parents=[common], help="generate downsampled noisy observations")
    fit = sub.add_parser("fit", parents=[common], help="multi-start fit of the unknown components")
    fit.add_argument("--resolve", action="store_true", help="re-solve the fitted model and compare")
    sub.add_parser("bifurcate", parents=[common], help="predicted onsets and branch continuation")
    sub.add_parser("diagnose", parents=[common], help="spectra, deconvolution, kernel/potential trade-off")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg, inst = load_run_config(args.config)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    seed = cfg.seed if args.seed is None else args.seed
    cfg = cfg.model_copy(update={"seed": seed})
    run = Run(args.command, args.config, seed, args.out)
    try:
        if args.command == "fit":
            status = cmd_fit(cfg, inst, run, args.threads, resolve=args.resolve)
        else:
            status = COMMANDS[args.command](cfg, inst, run, args.threads)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = exc.code
    run.finish(status)
    return status


if __name__ == "__main__":
    sys.exit(main())
