"""Command-line front end.

Example::

    adaptcp series.csv --column depth --model gaussian-mean --m 115000 \\
        --sigma2 6.25e6 --tau2 16 --prior geometric --p 0.013 \\
        --iterations 2000000 --compare-engine recursions --out results/

Exit status: 0 on success, 2 for configuration errors, 3 for data errors,
4 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata

import numpy as np
import scipy

from . import _backend
from .diagnostics import PosteriorSummary, divergence, save_summary
from .errors import ChangepointError, ConfigError, DataError, StateError
from .models import GaussianMean, GaussianPrecision, Geometric, NegativeBinomial, PoissonGamma, SegmentScorer, build_cache
from .recursions import LARGE_N_WARNING, compute_recursions, map_segmentation, simulate_posterior
from .sampler import SamplerConfig, run

log = logging.getLogger("adaptcp")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

OUTPUT_ENV = "ADAPTCP_OUTPUT_DIR"
ENGINES = ("adaptive", "non-adaptive", "recursions")
MODELS = ("poisson-gamma", "gaussian-mean", "gaussian-precision")
PRIORS = ("geometric", "negative-binomial")


@dataclass
class RunConfig:
    """Everything needed to reproduce one invocation (written to the manifest)."""

    input_path: str
    column: str | None = None
    engine: str = "adaptive"
    compare_engine: str | None = None
    model: str = "gaussian-mean"
    model_params: dict = field(default_factory=dict)
    prior: str = "geometric"
    prior_params: dict = field(default_factory=lambda: {"p": 0.01})
    sampler: dict = field(default_factory=dict)
    init_positions: list[int] = field(default_factory=list)
    truncation: float = 0.0
    draws: int = 100_000
    max_n: int = LARGE_N_WARNING
    allow_large_n: bool = False
    output_dir: str = "."
    seed: int = 0
    chains: int = 1
    delta: float = 1e-12

    def validate(self) -> None:
        for name, value, allowed in (("engine", self.engine, ENGINES), ("model", self.model, MODELS),
                                     ("prior", self.prior, PRIORS)):
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")
        if self.compare_engine is not None and self.compare_engine not in ENGINES:
            raise ConfigError(f"compare engine must be one of {ENGINES}, got {self.compare_engine!r}")
        if self.compare_engine == self.engine:
            raise ConfigError("compare engine must differ from the main engine")
        if self.chains < 1:
            raise ConfigError("chains must be >= 1")
        if self.draws < 1:
            raise ConfigError("draws must be >= 1")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        self.build_model()
        self.build_prior()
        self.sampler_config("adaptive")

    def build_model(self):
        cls = {"poisson-gamma": PoissonGamma, "gaussian-mean": GaussianMean, "gaussian-precision": GaussianPrecision}
        try:
            return cls[self.model](**self.model_params)
        except TypeError as exc:
            raise ConfigError(f"bad parameters for {self.model}: {exc}") from None

    def build_prior(self):
        try:
            if self.prior == "geometric":
                return Geometric(**self.prior_params)
            return NegativeBinomial(**self.prior_params)
        except TypeError as exc:
            raise ConfigError(f"bad parameters for {self.prior}: {exc}") from None

    def sampler_config(self, engine: str) -> SamplerConfig:
        opts = dict(self.sampler)
        opts["seed"] = self.seed
        if engine == "non-adaptive":
            opts["adaptation_enabled"] = False
            opts["thresholding_enabled"] = False
            opts["dual_adaptation_enabled"] = False
        try:
            return SamplerConfig(**opts)
        except TypeError as exc:
            raise ConfigError(f"bad sampler option: {exc}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown manifest fields: {sorted(unknown)}")
        return cls(**data)


def ingest(path: str, column: str | int | None = None) -> np.ndarray:
    """Read one numeric column from a delimited text file.

    A first row that does not parse as numbers is treated as a header.
    ``column`` is a header name or a 0-based index (default: first column).
    """
    if not os.path.isfile(path):
        raise DataError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise DataError(f"{path} contains no observations")
    try:
        dialect = csv.Sniffer().sniff(lines[0], delimiters=",\t; ")
        delim = dialect.delimiter
    except csv.Error:
        delim = ","
    rows = list(csv.reader(lines, delimiter=delim, skipinitialspace=True))
    header = None
    try:
        [float(v) for v in rows[0] if v.strip()]
    except ValueError:
        header = [h.strip() for h in rows[0]]
        rows = rows[1:]

    if column is None:
        idx = 0
    elif header is not None and str(column) in header:
        idx = header.index(str(column))
    else:
        try:
            idx = int(column)
        except ValueError:
            raise DataError(f"column {column!r} not found in header {header}") from None
    first_row = 2 if header is not None else 1
    values = []
    for r, row in enumerate(rows, start=first_row):
        cells = [c for c in row if c.strip()] if delim == " " else row
        if idx >= len(cells):
            raise DataError(f"row {r}: no column {idx}")
        cell = cells[idx].strip()
        try:
            v = float(cell)
        except ValueError:
            raise DataError(f"row {r}: cannot parse {cell!r} as a number") from None
        if not math.isfinite(v):
            raise DataError(f"row {r}: non-finite value {cell!r}")
        values.append(v)
    if not values:
        raise DataError(f"{path} contains no observations")
    return np.array(values)


def _chain_worker(args):
    y, model, prior, cfg, seed_seq, init = args
    cache = build_cache(y, model)
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    return run(cfg, cache, model, prior, init or None, rng=rng)


def _run_sampler(config: RunConfig, engine: str, y, model, prior, scorer):
    cfg = config.sampler_config(engine)
    init = config.init_positions or None
    if config.chains == 1:
        res = run(cfg, scorer.cache, model, prior, init, scorer=scorer)
        return res.summary, [res.stats]
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    jobs = [(y, model, prior, cfg, s, init) for s in seeds]
    with ProcessPoolExecutor(max_workers=min(config.chains, os.cpu_count() or 1)) as pool:
        results = list(pool.map(_chain_worker, jobs))
    summary = results[0].summary
    for res in results[1:]:
        summary = summary.merge(res.summary)
    return summary, [r.stats for r in results]


def _run_recursions(config: RunConfig, scorer) -> tuple[PosteriorSummary, dict]:
    n = scorer.n
    if n > config.max_n and not config.allow_large_n:
        raise ConfigError(
            f"recursions engine refuses n={n} > {config.max_n}; use the adaptive sampler "
            "or pass --allow-large-n"
        )
    backend = config.sampler.get("backend", "auto")
    t0 = time.perf_counter()
    table = compute_recursions(scorer.cache, scorer.model, scorer.prior, config.truncation, scorer=scorer,
                               backend=backend)
    t1 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    samples = simulate_posterior(table, n_samples=config.draws, rng=rng, scorer=scorer)
    t2 = time.perf_counter()
    summary = samples.summary()
    map_lp, map_pos = map_segmentation(scorer=scorer, backend=backend)
    summary.map_log_post = map_lp
    summary.map_positions = map_pos
    summary.map_trace = [(0, time.perf_counter() - t0, map_lp)]
    info = {
        "log_evidence": table.log_evidence,
        "truncation": config.truncation,
        "dropped_terms": int(np.sum(table.truncated_counts)),
        "precompute_seconds": t1 - t0,
        "simulation_seconds": t2 - t1,
    }
    return summary, info


def _engine(config: RunConfig, engine: str, y, model, prior, scorer) -> tuple[PosteriorSummary, dict]:
    if engine == "recursions":
        return _run_recursions(config, scorer)
    summary, stats = _run_sampler(config, engine, y, model, prior, scorer)
    info = {
        "backend": stats[0].backend,
        "chains": len(stats),
        "iterations_done": [s.iterations_done for s in stats],
        "seconds": [s.elapsed for s in stats],
        "acceptance_rates": [s.acceptance_rates for s in stats],
        "max_adapt_ratio": max(s.max_adapt_ratio for s in stats),
        "log_weight_range": [min(s.log_weight_min for s in stats), max(s.log_weight_max for s in stats)],
        "max_drift": max(s.max_drift for s in stats),
    }
    return summary, info


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {
        "package": pkg,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "compiled_core": _backend.COMPILED,
    }


def execute(config: RunConfig) -> int:
    """Run the configured engine(s) and write results; returns the exit status."""
    config.validate()
    y = ingest(config.input_path, config.column)
    model = config.build_model()
    prior = config.build_prior()
    cache = build_cache(y, model)
    scorer = SegmentScorer(cache, model, prior)
    out = config.output_dir
    os.makedirs(out, exist_ok=True)

    t0 = time.perf_counter()
    summary, info = _engine(config, config.engine, y, model, prior, scorer)
    paths = save_summary(summary, out)
    manifest = {
        "config": config.to_dict(),
        "n": int(cache.n),
        "versions": _versions(),
        "engine": {config.engine: info},
        "summary": summary.to_dict(),
        "files": paths,
    }
    if config.compare_engine:
        other, other_info = _engine(config, config.compare_engine, y, model, prior, scorer)
        manifest["engine"][config.compare_engine] = other_info
        manifest["files"].update({f"compare_{k}": v for k, v in save_summary(other, out, "compare_").items()})
        p, q = summary.count_hist, other.count_hist
        report = {
            "engine_p": config.engine,
            "engine_q": config.compare_engine,
            "delta": config.delta,
            "D_p_q": divergence(p, q, config.delta),
            "D_q_p": divergence(q, p, config.delta),
        }
        div_path = os.path.join(out, "divergence.json")
        with open(div_path, "w") as fh:
            json.dump(report, fh, indent=2)
        manifest["divergence"] = report
        manifest["files"]["divergence"] = div_path
    manifest["total_seconds"] = time.perf_counter() - t0
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, default=_json_default)
    log.info("wrote results to %s", out)
    return EXIT_OK


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _positions(text: str) -> list[int]:
    if not text:
        return []
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad changepoint list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adaptcp", description="Bayesian multiple changepoint detection.")
    ap.add_argument("input", nargs="?", help="delimited text file with the series")
    ap.add_argument("--manifest", help="re-run the configuration stored in a manifest.json")
    ap.add_argument("--column", help="column name or 0-based index (default: first)")
    ap.add_argument("--engine", choices=ENGINES, default="adaptive")
    ap.add_argument("--compare-engine", choices=ENGINES, help="also run this engine and report D_delta both ways")
    ap.add_argument("--out", "--output-dir", dest="output_dir", default=None,
                    help=f"output directory (default: ${OUTPUT_ENV} or the current directory)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--chains", type=int, default=1, help="independent chains, run in parallel and merged")
    ap.add_argument("--backend", choices=_backend.BACKENDS, default="auto")
    ap.add_argument("-v", "--verbose", action="store_true")

    m = ap.add_argument_group("segment model")
    m.add_argument("--model", choices=MODELS, default="gaussian-mean")
    m.add_argument("--alpha", type=float, help="poisson-gamma: Gamma shape")
    m.add_argument("--beta", type=float, help="poisson-gamma: Gamma rate")
    m.add_argument("--m", type=float, help="gaussian-mean: prior mean of the segment means")
    m.add_argument("--sigma2", type=float, help="gaussian-mean: observation variance")
    m.add_argument("--tau2", type=float, help="gaussian-mean: prior variance of a mean, in units of sigma2")
    m.add_argument("--mu", type=float, help="gaussian-precision: known mean")
    m.add_argument("--alpha0", type=float, help="gaussian-precision: Gamma shape of the precision")
    m.add_argument("--beta0", type=float, help="gaussian-precision: Gamma rate of the precision")

    p = ap.add_argument_group("gap prior")
    p.add_argument("--prior", choices=PRIORS, default="geometric")
    p.add_argument("--p", type=float, default=0.01, help="success probability")
    p.add_argument("--k", type=int, help="negative-binomial: number of successes")

    s = ap.add_argument_group("sampler")
    s.add_argument("--iterations", type=int, default=1_000_000)
    s.add_argument("--time-budget", type=float, help="wall-clock seconds; iterations becomes an upper bound")
    s.add_argument("--burn-in", type=int)
    s.add_argument("--thin", type=int)
    s.add_argument("--p-add", type=float, default=0.5)
    s.add_argument("--alpha-target", type=float, default=0.15)
    s.add_argument("--h", type=float, default=0.001, help="initial adaptation intensity")
    s.add_argument("--no-adjust", action="store_true")
    s.add_argument("--no-thresholding", action="store_true")
    s.add_argument("--dual", action="store_true", help="dual adaptation")
    s.add_argument("--dual-weight", type=float, default=0.5)
    s.add_argument("--init", type=_positions, default=[], help="initial changepoints, e.g. '40,95,230'")

    r = ap.add_argument_group("recursions")
    r.add_argument("--truncation", type=float, default=0.0, help="0 = exact; 1e-10 is a sensible truncation")
    r.add_argument("--draws", type=int, default=100_000, help="perfect-simulation draws")
    r.add_argument("--max-n", type=int, default=LARGE_N_WARNING)
    r.add_argument("--allow-large-n", action="store_true")
    ap.add_argument("--delta", type=float, default=1e-12, help="smoothing of the divergence report")
    return ap


def config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.manifest:
        with open(args.manifest) as fh:
            cfg = RunConfig.from_dict(json.load(fh)["config"])
        if args.output_dir:
            cfg.output_dir = args.output_dir
        return cfg
    if not args.input:
        raise ConfigError("an input file (or --manifest) is required")
    keys = {"poisson-gamma": ("alpha", "beta"), "gaussian-mean": ("m", "sigma2", "tau2"),
            "gaussian-precision": ("mu", "alpha0", "beta0")}[args.model]
    model_params = {k: getattr(args, k) for k in keys if getattr(args, k) is not None}
    prior_params = {"p": args.p}
    if args.prior == "negative-binomial":
        if args.k is None:
            raise ConfigError("negative-binomial prior needs --k")
        prior_params["k"] = args.k
    sampler = {
        "iterations": args.iterations,
        "time_budget": args.time_budget,
        "burn_in": args.burn_in,
        "thin": args.thin,
        "p_add": args.p_add,
        "alpha_target": args.alpha_target,
        "h": args.h,
        "adjust_enabled": not args.no_adjust,
        "thresholding_enabled": not args.no_thresholding,
        "dual_adaptation_enabled": args.dual,
        "dual_weight": args.dual_weight,
        "backend": args.backend,
    }
    return RunConfig(
        input_path=args.input,
        column=args.column,
        engine=args.engine,
        compare_engine=args.compare_engine,
        model=args.model,
        model_params=model_params,
        prior=args.prior,
        prior_params=prior_params,
        sampler=sampler,
        init_positions=args.init,
        truncation=args.truncation,
        draws=args.draws,
        max_n=args.max_n,
        allow_large_n=args.allow_large_n,
        output_dir=args.output_dir or os.environ.get(OUTPUT_ENV, "."),
        seed=args.seed,
        chains=args.chains,
        delta=args.delta,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = config_from_args(args)
        return execute(config)
    except (ConfigError, StateError) as exc:
        print(f"adaptcp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"adaptcp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ChangepointError, OSError, RuntimeError, MemoryError) as exc:
        print(f"adaptcp: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
