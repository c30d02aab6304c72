"""Configuration, problem construction and the end-to-end pipelines behind the CLI."""

from __future__ import annotations

import configparser
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, baselines, curvature, mesh_fem, prior_kl, samplers
from .errors import BudgetExhausted, ConfigError
from .optimize import (
    GridCascade,
    MultigridResult,
    OptimizationError,
    bfgs_minimize,
    multigrid_minimize,
    write_trace_csv,
)
from .posterior import PdePosterior, SolveLedger, synthesize_data

log = logging.getLogger(__name__)

DEFAULT_INI = """\
[grid]
sizes = 16, 32, 64
gtols = 1e-4, 1e-4, 1e-6
max_iter = 200

[prior]
sigma_x = 1.0
sigma_y = 1.0
l_x = 0.7071067811865476
l_y = 0.7071067811865476
mean = 0.0
modes = 30
fraction =

[problem]
source_amplitude = 200.0
stride = 4
margin = 19
noise_fraction = 0.3
noise_model = variance
reference_seed = 0
data_seed = 1

[curvature]
hessian = gauss_newton

[sampler]
method = linear
samples = 10000
max_newton = 20
newton_tol = 1e-8

[mcmc]
steps = 10000
proposal_std =
pilot_steps = 500
target_low = 0.2
target_high = 0.4
burn_in = 0

[run]
seed = 1
workers = 1
out = results
tracked = 1, 2, 5
budget =
"""

HESSIAN_KINDS = ("gauss_newton", "gradient", "central", "function")
METHODS = ("linear", "random", "symmetric")


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _opt(text: str, cast):
    text = text.strip()
    return None if text == "" or text.lower() == "none" else cast(text)


@dataclass
class ExperimentConfig:
    """Every knob of a run; defaults reproduce the reference configuration."""

    sizes: tuple = (16, 32, 64)
    gtols: tuple = (1e-4, 1e-4, 1e-6)
    max_iter: int = 200
    sigma_x: float = 1.0
    sigma_y: float = 1.0
    l_x: float = float(np.sqrt(0.5))
    l_y: float = float(np.sqrt(0.5))
    mean: float = 0.0
    modes: Optional[int] = 30
    fraction: Optional[float] = None
    source_amplitude: float = 200.0
    stride: int = 4
    margin: int = 19
    noise_fraction: float = 0.3
    noise_model: str = "variance"
    reference_seed: int = 0
    data_seed: int = 1
    hessian: str = "gauss_newton"
    method: str = "linear"
    samples: int = 10000
    max_newton: int = 20
    newton_tol: float = 1e-8
    steps: int = 10000
    proposal_std: Optional[float] = None
    pilot_steps: int = 500
    target_low: float = 0.2
    target_high: float = 0.4
    burn_in: int = 0
    seed: int = 1
    workers: int = 1
    out: str = "results"
    tracked: tuple = (1, 2, 5)
    budget: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        GridCascade(self.sizes, self.gtols)
        prior_kl.CovarianceSpec(self.sigma_x, self.sigma_y, self.l_x, self.l_y)
        if self.fraction is None and (self.modes is None or self.modes < 1):
            raise ConfigError("prior.modes must be a positive integer (or set prior.fraction)")
        if self.fraction is not None and not 0 < self.fraction <= 1:
            raise ConfigError("prior.fraction must lie in (0, 1]")
        if not self.source_amplitude > 0:
            raise ConfigError("problem.source_amplitude must be positive")
        mesh_fem.measurement_points(self.sizes[-1], self.stride, self.margin)
        if not self.noise_fraction > 0:
            raise ConfigError("problem.noise_fraction must be positive")
        if self.noise_model not in ("variance", "std"):
            raise ConfigError("problem.noise_model must be 'variance' or 'std'")
        if self.hessian not in HESSIAN_KINDS:
            raise ConfigError(f"curvature.hessian must be one of {', '.join(HESSIAN_KINDS)}")
        if self.method not in METHODS:
            raise ConfigError(f"sampler.method must be one of {', '.join(METHODS)}")
        if self.samples < 1 or self.steps < 1 or self.pilot_steps < 2:
            raise ConfigError("sample and step counts must be positive")
        if self.max_newton < 1 or not self.newton_tol > 0:
            raise ConfigError("sampler.max_newton and sampler.newton_tol must be positive")
        if self.proposal_std is not None and self.proposal_std < 0:
            raise ConfigError("mcmc.proposal_std must be non-negative")
        if not 0 < self.target_low < self.target_high < 1:
            raise ConfigError("mcmc.target_low < mcmc.target_high must lie in (0, 1)")
        if not 0 <= self.burn_in < self.steps:
            raise ConfigError("mcmc.burn_in must be smaller than mcmc.steps")
        if self.workers < 1:
            raise ConfigError("run.workers must be at least 1")
        m = self.modes if self.fraction is None else None
        if any(t < 1 or (m is not None and t > m) for t in self.tracked):
            raise ConfigError("run.tracked coordinates must lie in 1..modes")
        if self.budget is not None and self.budget < 1:
            raise ConfigError("run.budget must be positive")

    @classmethod
    def from_ini(cls, text: str = "") -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(DEFAULT_INI)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse configuration: {exc}") from exc
        known = configparser.ConfigParser()
        known.read_string(DEFAULT_INI)
        for sec in cp.sections():
            if not known.has_section(sec):
                raise ConfigError(f"unknown configuration section [{sec}]")
            for key in cp[sec]:
                if not known.has_option(sec, key):
                    raise ConfigError(f"unknown configuration key {sec}.{key}")
        g, p, q, c, s, mc, r = (cp[k] for k in ("grid", "prior", "problem", "curvature", "sampler", "mcmc", "run"))
        try:
            return cls(
                sizes=_ints(g["sizes"]),
                gtols=_floats(g["gtols"]),
                max_iter=int(g["max_iter"]),
                sigma_x=float(p["sigma_x"]),
                sigma_y=float(p["sigma_y"]),
                l_x=float(p["l_x"]),
                l_y=float(p["l_y"]),
                mean=float(p["mean"]),
                modes=_opt(p["modes"], int),
                fraction=_opt(p["fraction"], float),
                source_amplitude=float(q["source_amplitude"]),
                stride=int(q["stride"]),
                margin=int(q["margin"]),
                noise_fraction=float(q["noise_fraction"]),
                noise_model=q["noise_model"].strip(),
                reference_seed=int(q["reference_seed"]),
                data_seed=int(q["data_seed"]),
                hessian=c["hessian"].strip(),
                method=s["method"].strip(),
                samples=int(s["samples"]),
                max_newton=int(s["max_newton"]),
                newton_tol=float(s["newton_tol"]),
                steps=int(mc["steps"]),
                proposal_std=_opt(mc["proposal_std"], float),
                pilot_steps=int(mc["pilot_steps"]),
                target_low=float(mc["target_low"]),
                target_high=float(mc["target_high"]),
                burn_in=int(mc["burn_in"]),
                seed=int(r["seed"]),
                workers=int(r["workers"]),
                out=r["out"].strip(),
                tracked=_ints(r["tracked"]),
                budget=_opt(r["budget"], int),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid configuration value: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration file {path}: {exc}") from exc
        return cls.from_ini(text)

    def to_ini(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, tuple):
                return ", ".join(repr(x) for x in v)
            return repr(v) if isinstance(v, float) else str(v)

        cp = configparser.ConfigParser()
        layout = {
            "grid": ("sizes", "gtols", "max_iter"),
            "prior": ("sigma_x", "sigma_y", "l_x", "l_y", "mean", "modes", "fraction"),
            "problem": ("source_amplitude", "stride", "margin", "noise_fraction", "noise_model",
                        "reference_seed", "data_seed"),
            "curvature": ("hessian",),
            "sampler": ("method", "samples", "max_newton", "newton_tol"),
            "mcmc": ("steps", "proposal_std", "pilot_steps", "target_low", "target_high", "burn_in"),
            "run": ("seed", "workers", "out", "tracked", "budget"),
        }
        for sec, keys in layout.items():
            cp[sec] = {k: fmt(getattr(self, k)) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @property
    def covariance(self) -> prior_kl.CovarianceSpec:
        return prior_kl.CovarianceSpec(self.sigma_x, self.sigma_y, self.l_x, self.l_y)


@dataclass
class Problem:
    """Everything fixed by the configuration: basis, data and one posterior per grid."""

    config: ExperimentConfig
    basis: prior_kl.KLBasis
    data: object
    targets: list
    ledger: SolveLedger

    @property
    def fine(self) -> PdePosterior:
        return self.targets[-1]

    def target(self, N: int) -> PdePosterior:
        for t in self.targets:
            if t.level == N:
                return t
        return PdePosterior(
            mesh_fem.Mesh(N), self.basis, self.data, mesh_fem.paper_source(self.config.source_amplitude), self.ledger
        )


def build_problem(cfg: ExperimentConfig, ledger: Optional[SolveLedger] = None) -> Problem:
    """KL basis on the finest grid, a reference field drawn from the prior, synthetic data.

    The reference field uses ``reference_seed`` and the noise ``data_seed``;
    neither depends on the sampling seed.  Data synthesis is not charged.
    """
    ledger = SolveLedger(cfg.budget) if ledger is None else ledger
    fine = mesh_fem.Mesh(cfg.sizes[-1])
    basis = prior_kl.build_kl(
        cfg.covariance, fine, m=cfg.modes, target_fraction=cfg.fraction, mean_value=cfg.mean
    )
    reference = prior_kl.sample_prior(basis, np.random.default_rng(cfg.reference_seed))
    source = mesh_fem.paper_source(cfg.source_amplitude)
    points = mesh_fem.measurement_points(cfg.sizes[-1], cfg.stride, cfg.margin)
    data = synthesize_data(
        basis, fine, reference, cfg.noise_fraction, np.random.default_rng(cfg.data_seed),
        points=points, source=source, noise_model=cfg.noise_model,
    )
    targets = [PdePosterior(mesh_fem.Mesh(N), basis, data, source, ledger) for N in cfg.sizes]
    return Problem(cfg, basis, data, targets, ledger)


def find_map(problem: Problem, single_grid: Optional[int] = None) -> MultigridResult:
    """Grid cascade from the prior mean, or a single-grid minimization."""
    cfg = problem.config
    theta0 = problem.basis.prior_mean_theta
    if single_grid is None:
        return multigrid_minimize(problem.targets, theta0, cfg.gtols, max_iter=cfg.max_iter)
    tgt = problem.target(single_grid)
    res = bfgs_minimize(
        tgt.F, tgt.grad, theta0, gtol=cfg.gtols[-1], max_iter=cfg.max_iter,
        ledger=tgt.ledger, level=tgt.level, scale_initial=False,
    )
    if not res.converged:
        raise OptimizationError(f"grid {single_grid} did not converge: {res.message}", [res])
    return MultigridResult([res], float(res.solves) * (single_grid / cfg.sizes[-1]) ** 2, cfg.sizes[-1])


def hessian_at(problem: Problem, mu, phi, kind: str = "gauss_newton") -> curvature.HessianModel:
    tgt = problem.fine
    if kind == "gauss_newton":
        start = tgt.ledger.total
        Q = curvature.fd_jacobian(tgt, mu)
        return curvature.gauss_newton_hessian(Q, problem.data.noise_var, solves=tgt.ledger.total - start)
    return curvature.fd_hessian(tgt, mu, method=kind, phi=phi)


def map_point(mg: MultigridResult, hm: curvature.HessianModel) -> samplers.MapPoint:
    return samplers.MapPoint(mu=mg.mu, phi=mg.phi, L=hm.L, setup_solves=mg.fine_equivalent_solves + hm.solves)


# --- manifest and writers ----------------------------------------------------


@dataclass
class RunManifest:
    """Run record written as ``key: value`` lines."""

    command: str
    config: ExperimentConfig
    stages: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    values: dict = field(default_factory=dict)
    partial: bool = False
    started: float = field(default_factory=time.perf_counter)

    def stage(self, name: str, ledger: SolveLedger, before: int) -> None:
        self.stages[name] = ledger.total - before

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.txt"
        self.outputs.append(path.name)
        lines = [
            f"command: {self.command}",
            f"version: {__version__}",
            f"seed: {self.config.seed}",
            f"reference_seed: {self.config.reference_seed}",
            f"data_seed: {self.config.data_seed}",
            f"wall_clock_s: {time.perf_counter() - self.started:.3f}",
            f"partial: {str(self.partial).lower()}",
        ]
        for name, n in self.stages.items():
            lines.append(f"solves.{name}: {n}")
        lines.append(f"solves.total: {sum(self.stages.values())}")
        for k, v in self.values.items():
            lines.append(f"{k}: {v}")
        lines.append("outputs: " + ", ".join(self.outputs))
        lines.append("config:")
        lines += ["    " + ln for ln in self.config.to_ini().splitlines()]
        path.write_text("\n".join(lines) + "\n")
        return path


def config_from_manifest(path) -> ExperimentConfig:
    """Recover the configuration echoed in a manifest."""
    text = Path(path).read_text().splitlines()
    try:
        start = text.index("config:") + 1
    except ValueError as exc:
        raise ConfigError(f"{path} has no config section") from exc
    return ExperimentConfig.from_ini("\n".join(ln[4:] for ln in text[start:]))


def write_vector_csv(path, values, name="value") -> None:
    with open(path, "w") as fh:
        fh.write(f"index,{name}\n")
        for i, v in enumerate(values):
            fh.write(f"{i + 1},{samplers.repr_float(v)}\n")


def write_key_values(path, pairs: dict) -> None:
    with open(path, "w") as fh:
        for k, v in pairs.items():
            if isinstance(v, float):
                v = samplers.repr_float(v)
            fh.write(f"{k}: {v}\n")


class _Outputs:
    def __init__(self, out_dir, manifest: RunManifest):
        self.dir = Path(out_dir)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out_dir}: {exc}") from exc
        self.manifest = manifest

    def path(self, name: str) -> Path:
        self.manifest.outputs.append(name)
        return self.dir / name


# --- pipelines -----------------------------------------------------------------


def _map_stage(problem: Problem, man: RunManifest, out: _Outputs, single_grid=None) -> MultigridResult:
    before = problem.ledger.total
    mg = find_map(problem, single_grid)
    man.stage("map", problem.ledger, before)
    man.values["map.fine_equivalent_solves"] = samplers.repr_float(mg.fine_equivalent_solves)
    man.values["map.phi"] = samplers.repr_float(mg.phi)
    man.values["map.iterations"] = ",".join(str(r.iterations) for r in mg.levels)
    write_vector_csv(out.path("map.csv"), mg.mu, "theta")
    write_trace_csv(mg.trace, out.path("map_trace.csv"))
    return mg


def _hessian_stage(problem, mg, man, out, kind, debug=False, name="hessian"):
    before = problem.ledger.total
    hm = hessian_at(problem, mg.mu, mg.phi, kind)
    man.stage(name, problem.ledger, before)
    man.values[f"{name}.shift"] = samplers.repr_float(hm.shift)
    if debug:
        curvature.write_hessian_csv(hm, out.path(f"{name}.csv"))
    return hm


def cmd_map(cfg: ExperimentConfig, single_grid: Optional[int] = None, out_dir=None) -> MultigridResult:
    man = RunManifest("map", cfg)
    out = _Outputs(out_dir or cfg.out, man)
    problem = build_problem(cfg)
    mg = _map_stage(problem, man, out, single_grid)
    man.write(out.dir)
    return mg


def _sample(problem, mp, cfg, method):
    return samplers.run_sampler(
        method, problem.fine, mp, cfg.samples, cfg.seed, cfg.workers,
        **({"max_newton": cfg.max_newton, "newton_tol": cfg.newton_tol} if method == "random" else {}),
    )


def write_ensemble_outputs(ens, out: _Outputs, seed: int, prefix: str = "") -> dict:
    """Ensemble CSV, quality report, statistics, histograms and a resampled set."""
    q = samplers.quality(ens)
    stats = samplers.statistics(ens)
    ens.to_csv(out.path(f"{prefix}ensemble.csv"))
    report = {
        "method": ens.method,
        "M": ens.M,
        "R_hat": q.R_hat,
        "ess": q.ess,
        "weight_variance": q.weight_variance,
        "rejected": ens.rejected,
        "rejection_rate": ens.rejected / ens.M,
        "solves": ens.total_solves,
        "setup_solves": float(ens.setup_solves),
        "reliable": str(stats.reliable).lower(),
    }
    if ens.method == "random":
        report["newton_iters_mean"] = float(np.mean(ens.newton_iters))
        report["newton_le4_fraction"] = float(np.mean(ens.newton_iters <= 4))
    write_key_values(out.path(f"{prefix}quality.txt"), report)
    summary = {}
    for i in range(ens.m):
        summary[f"theta_{i + 1}.mean"] = float(stats.mean[i])
        summary[f"theta_{i + 1}.std"] = float(stats.std[i])
        summary[f"theta_{i + 1}.mean_se"] = float(stats.mean_se[i])
        summary[f"theta_{i + 1}.skewness"] = float(stats.skewness[i])
        summary[f"theta_{i + 1}.excess_kurtosis"] = float(stats.excess_kurtosis[i])
    summary["ess"] = stats.ess
    summary["reliable"] = str(stats.reliable).lower()
    write_key_values(out.path(f"{prefix}stats.txt"), summary)
    samplers.write_histograms_csv(stats, out.path(f"{prefix}histograms.csv"))
    idx = samplers.resample(ens, samplers.sample_rng(seed, "resample", 0))
    with open(out.path(f"{prefix}resampled.csv"), "w") as fh:
        fh.write("draw,sample_id," + ",".join(f"theta_{i + 1}" for i in range(ens.m)) + "\n")
        for k, j in enumerate(idx):
            fh.write(f"{k},{j}," + ",".join(samplers.repr_float(v) for v in ens.samples[j]) + "\n")
    return report


def cmd_sample(cfg: ExperimentConfig, method: Optional[str] = None, out_dir=None, debug: bool = False):
    method = method or cfg.method
    if method not in METHODS:
        raise ConfigError(f"unknown sampling method {method!r}; choose from {', '.join(METHODS)}")
    man = RunManifest(f"sample --method {method}", cfg)
    out = _Outputs(out_dir or cfg.out, man)
    problem = build_problem(cfg)
    mg = _map_stage(problem, man, out)
    hm = _hessian_stage(problem, mg, man, out, cfg.hessian, debug)
    mp = map_point(mg, hm)
    before = problem.ledger.total
    ens = _sample(problem, mp, cfg, method)
    man.stage("sampling", problem.ledger, before)
    if ens.M < 2:
        log.warning("ensemble has a single sample; statistics are degenerate")
    report = write_ensemble_outputs(ens, out, cfg.seed)
    man.values["R_hat"] = samplers.repr_float(report["R_hat"])
    man.write(out.dir)
    return ens, report


def cmd_lmap(cfg: ExperimentConfig, out_dir=None, debug: bool = False) -> baselines.LmapResult:
    man = RunManifest("lmap", cfg)
    out = _Outputs(out_dir or cfg.out, man)
    problem = build_problem(cfg)
    mg = _map_stage(problem, man, out)
    hm = _hessian_stage(problem, mg, man, out, cfg.hessian, debug)
    res = baselines.lmap(mg.mu, hm.H)
    with open(out.path("lmap.csv"), "w") as fh:
        fh.write("index,mean,std\n")
        for i, (a, b) in enumerate(zip(res.mu, res.std)):
            fh.write(f"{i + 1},{samplers.repr_float(a)},{samplers.repr_float(b)}\n")
    man.write(out.dir)
    return res


def _tuned_rwm(problem, mg, hm, cfg, man):
    tgt = problem.fine
    before = problem.ledger.total
    if cfg.proposal_std is None:
        initial = float(np.sqrt(np.min(np.diag(hm.covariance))))
        tune = baselines.tune_proposal(
            tgt, mg.mu, samplers.sample_rng(cfg.seed, "tune", 0), initial_std=initial,
            target_range=(cfg.target_low, cfg.target_high), pilot_steps=cfg.pilot_steps,
        )
        std = tune.proposal_std
        man.values["rwm.tuning_rounds"] = tune.rounds
        man.values["rwm.pilot_acceptance"] = samplers.repr_float(tune.acceptance_rate)
    else:
        std = cfg.proposal_std
    man.stage("rwm_tuning", problem.ledger, before)
    man.values["rwm.proposal_std"] = samplers.repr_float(std)
    before = problem.ledger.total
    chain = baselines.metropolis_rwm(tgt, mg.mu, std, cfg.steps, samplers.sample_rng(cfg.seed, "rwm", 0))
    man.stage("rwm", problem.ledger, before)
    man.values["rwm.acceptance_rate"] = samplers.repr_float(chain.acceptance_rate)
    return chain


def _ismap(problem, mp, cfg, man):
    before = problem.ledger.total
    chain = baselines.ismap(problem.fine, mp, cfg.steps, samplers.sample_rng(cfg.seed, "ismap", 0))
    man.stage("ismap", problem.ledger, before)
    man.values["ismap.acceptance_rate"] = samplers.repr_float(chain.acceptance_rate)
    return chain


def _chain_summary(chain, burn_in, path):
    kept = chain.discard(burn_in)
    se = baselines.batch_means_se(kept.states)
    with open(path, "w") as fh:
        fh.write("index,mean,std,batch_means_se\n")
        for i in range(kept.states.shape[1]):
            col = kept.states[:, i]
            fh.write(
                f"{i + 1},{samplers.repr_float(col.mean())},{samplers.repr_float(col.std())},"
                f"{samplers.repr_float(se[i])}\n"
            )


def cmd_mcmc(cfg: ExperimentConfig, method: str = "rwm", out_dir=None, burn_in: Optional[int] = None):
    if method not in ("rwm", "ismap"):
        raise ConfigError(f"unknown MCMC method {method!r}; choose rwm or ismap")
    burn_in = cfg.burn_in if burn_in is None else burn_in
    if not 0 <= burn_in < cfg.steps:
        raise ConfigError("burn-in must be smaller than the number of steps")
    man = RunManifest(f"mcmc --method {method}", cfg)
    out = _Outputs(out_dir or cfg.out, man)
    problem = build_problem(cfg)
    mg = _map_stage(problem, man, out)
    hm = _hessian_stage(problem, mg, man, out, cfg.hessian)
    if method == "rwm":
        chain = _tuned_rwm(problem, mg, hm, cfg, man)
    else:
        chain = _ismap(problem, map_point(mg, hm), cfg, man)
    chain.to_csv(out.path(f"{method}_chain.csv"))
    coords = tuple(t - 1 for t in cfg.tracked)
    baselines.convergence_trace(chain, coords).to_csv(out.path(f"{method}_trace.csv"))
    _chain_summary(chain, burn_in, out.path(f"{method}_summary.csv"))
    man.write(out.dir)
    return chain


def cmd_compare(cfg: ExperimentConfig, out_dir=None, debug: bool = False) -> dict:
    """All methods under one seed: running-mean traces and an LMAP-vs-sampled std table.

    If the solve budget runs out, the methods finished so far are written
    and the manifest is flagged partial.
    """
    man = RunManifest("compare", cfg)
    out = _Outputs(out_dir or cfg.out, man)
    problem = build_problem(cfg)
    coords = tuple(t - 1 for t in cfg.tracked)
    results: dict = {}
    try:
        mg = _map_stage(problem, man, out)
        hessians = {
            "gn": _hessian_stage(problem, mg, man, out, "gauss_newton", debug, "hessian_gn"),
            "fd": _hessian_stage(problem, mg, man, out, "gradient", debug, "hessian_fd"),
        }
        results["lmap"] = baselines.lmap(mg.mu, hessians["gn"].H)
        for hname, hm in hessians.items():
            mp = map_point(mg, hm)
            for method in ("linear", "random"):
                key = f"{method}_{hname}"
                before = problem.ledger.total
                ens = _sample(problem, mp, cfg, method)
                man.stage(key, problem.ledger, before)
                man.values[f"{key}.R_hat"] = samplers.repr_float(samplers.quality(ens).R_hat)
                baselines.convergence_trace(ens, coords).to_csv(out.path(f"trace_{key}.csv"))
                results[key] = ens
        results["rwm"] = _tuned_rwm(problem, mg, hessians["gn"], cfg, man)
        baselines.convergence_trace(results["rwm"], coords).to_csv(out.path("trace_rwm.csv"))
        results["ismap"] = _ismap(problem, map_point(mg, hessians["gn"]), cfg, man)
        baselines.convergence_trace(results["ismap"], coords).to_csv(out.path("trace_ismap.csv"))
    except BudgetExhausted as exc:
        log.warning("%s; writing partial results", exc)
        man.partial = True
        man.stages["unattributed"] = problem.ledger.total - sum(man.stages.values())
    _write_std_table(results, out, cfg.burn_in)
    man.write(out.dir)
    return results


def _write_std_table(results: dict, out: _Outputs, burn_in: int) -> None:
    rows = []
    for name, res in results.items():
        if isinstance(res, baselines.LmapResult):
            mean, std = res.mu, res.std
        elif isinstance(res, samplers.WeightedEnsemble):
            st = samplers.statistics(res)
            mean, std = st.mean, st.std
        else:
            kept = res.discard(burn_in).states
            mean, std = kept.mean(axis=0), kept.std(axis=0)
        rows.append((name, mean, std))
    if not rows:
        return
    with open(out.path("std_table.csv"), "w") as fh:
        fh.write("method,coordinate,mean,std\n")
        for name, mean, std in rows:
            for i in range(mean.size):
                fh.write(f"{name},{i + 1},{samplers.repr_float(mean[i])},{samplers.repr_float(std[i])}\n")


def cmd_spectrum(cfg: ExperimentConfig, out_dir=None) -> prior_kl.KLBasis:
    man = RunManifest("spectrum", cfg)
    out = _Outputs(out_dir or cfg.out, man)
    basis = prior_kl.build_kl(
        cfg.covariance, mesh_fem.Mesh(cfg.sizes[-1]), m=cfg.modes, target_fraction=cfg.fraction, mean_value=cfg.mean
    )
    prior_kl.write_spectrum_csv(basis, out.path("spectrum.csv"))
    man.values["modes"] = basis.m
    man.values["captured_fraction"] = samplers.repr_float(basis.captured_fraction)
    man.write(out.dir)
    return basis


def gradient_check(target, thetas, rel_step: float = 1e-3):
    """Adjoint gradient against a fourth-order central difference.

    The step ``rel_step * max(1, |theta_i|)`` balances truncation and
    roundoff for objectives of size 1e2 to 1e4.  Returns one row per theta:
    ``(max relative error, adjoint gradient, FD gradient)`` with the
    relative error taken componentwise against ``max(|fd_i|, 1e-8 * |fd|)``.
    """
    rows = []
    for theta in thetas:
        theta = np.asarray(theta, dtype=float)
        g = target.grad(theta)
        fd = np.empty_like(theta)
        for i in range(theta.size):
            h = rel_step * max(1.0, abs(theta[i]))
            vals = []
            for k in (-2, -1, 1, 2):
                x = theta.copy()
                x[i] += k * h
                vals.append(target.F(x))
            fd[i] = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
        denom = np.maximum(np.abs(fd), 1e-8 * np.linalg.norm(fd))
        rows.append((float(np.max(np.abs(g - fd) / denom)), g, fd))
    return rows


def cmd_gradcheck(cfg: ExperimentConfig, grid: int = 16, count: int = 5, out_dir=None):
    man = RunManifest(f"gradcheck --grid {grid}", cfg)
    out = _Outputs(out_dir or cfg.out, man)
    problem = build_problem(cfg)
    tgt = problem.target(grid)
    rng = samplers.sample_rng(cfg.seed, "tune", 1)
    thetas = rng.standard_normal((count, problem.basis.m))
    before = problem.ledger.total
    rows = gradient_check(tgt, thetas)
    man.stage("gradcheck", problem.ledger, before)
    with open(out.path("gradcheck.csv"), "w") as fh:
        fh.write("point,max_rel_error\n")
        for k, (err, _, _) in enumerate(rows):
            fh.write(f"{k},{samplers.repr_float(err)}\n")
    worst = max(r[0] for r in rows)
    man.values["max_rel_error"] = samplers.repr_float(worst)
    man.write(out.dir)
    return worst
