"""Command-line driver.

Every command reads a JSON config (``--config``), writes JSON/CSV outputs
under ``--out`` and prints a short table. Exit codes: 0 success,
1 numerical failure, 2 usage or configuration error; failures are also
reported on stderr as a JSON object.

Config layout (all commands)::

    {
      "data": {"path": "file.csv", "roles": {...}}    # or
      "dgp":  {"kind": "example1", "n": 250, "seed": 1, "params": {}},
      "model": {"kind": "linear", ...}                # or
      "model": {"template": "example1", "K": 5, "params": {...}},
      "prior": {"location": 0, "scale": 5, "dof": 2.5},
      "mcmc": {"sampler": "one_block", "draws": 20000, "burn_in": 1000},
      "seed": 0
    }

plus command-specific sections: ``models`` (compare), ``volume``,
``search``, ``experiment`` (simulate) and ``pseudo_true``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde

from . import __version__
from .basis import BasisError, k_rule
from .data import DataError, Dataset, ingest_csv
from .dgp import ExperimentSpec, generate, iv_conditioning_model, pseudo_true_value, run_repeated, template_models
from .etel import dump_evaluation, evaluate, hull_check
from .marglik import (MlConfig, OrdinateError, compare_models, hull_volume, sparsity_search,
                      write_search_series)
from .model import ModelError, basis_spec_from_config, build_model
from .posterior import (LogPosterior, McmcConfig, StudentTPrior, TailoringError, run_mcmc,
                        training_sample_prior)

log = logging.getLogger("betel")

COMMANDS = ("estimate", "compare", "volume", "search", "simulate", "pseudo-true")
EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config ---

def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def require(cfg: dict, key: str, where: str = "config"):
    if key not in cfg:
        raise ConfigError(f"{where} is missing required field {key!r}")
    return cfg[key]


def load_data(cfg: dict, seed: int) -> Dataset:
    has_data, has_dgp = "data" in cfg, "dgp" in cfg
    if has_data == has_dgp:
        raise ConfigError("config needs exactly one of 'data' and 'dgp'")
    if has_data:
        d = cfg["data"]
        return ingest_csv(require(d, "path", "data"), d.get("roles"))
    d = cfg["dgp"]
    return generate(require(d, "kind", "dgp"), int(require(d, "n", "dgp")), int(d.get("seed", seed)),
                    **d.get("params", {}))


def models_from_config(data: Dataset, mcfg: dict, K_override: int | None = None) -> dict:
    """``{id: MomentModel}`` from a model section (template or explicit kind)."""
    if "template" in mcfg:
        K = mcfg.get("K", "auto") if K_override is None else K_override
        K = None if K in (None, "auto") else int(K)
        return template_models(mcfg["template"], data, K, **mcfg.get("params", {}))
    mcfg = dict(mcfg)
    if K_override is not None and "basis" in mcfg:
        mcfg["basis"] = {**mcfg["basis"], "K": K_override}
    return {mcfg.get("id", "model"): build_model(data, mcfg)}


def effective_K(data: Dataset, mcfg: dict):
    if "template" in mcfg:
        K = mcfg.get("K", "auto")
    elif "basis" in mcfg:
        return basis_spec_from_config(mcfg["basis"], data.n).knot_count
    else:
        K = mcfg.get("K")
    return k_rule(data.n) if K in (None, "auto") else K


def prior_for(model, pcfg: dict | None) -> StudentTPrior:
    pcfg = pcfg or {}
    return StudentTPrior.default(model.p, names=model.param_names) if not pcfg else StudentTPrior(
        np.broadcast_to(np.asarray(pcfg.get("location", 0.0), float), (model.p,)),
        pcfg.get("scale", 5.0), pcfg.get("dof", 2.5), model.param_names)


def posteriors_from_config(data: Dataset, cfg: dict, mcfg: dict | None = None, K_override=None) -> dict:
    """``{id: LogPosterior}``; a training-sample prior splits the data first."""
    mcfg = require(cfg, "model") if mcfg is None else mcfg
    pcfg = cfg.get("prior") or {}
    train = pcfg.get("training")
    if not train:
        return {m: LogPosterior(mod, prior_for(mod, pcfg))
                for m, mod in models_from_config(data, mcfg, K_override).items()}
    count = int(train["count"]) if "count" in train else int(round(train.get("fraction", 0.1) * data.n))
    if not 0 < count < data.n:
        raise ConfigError("training sample must leave observations for estimation")
    train_models = models_from_config(data.head(count), mcfg, K_override)
    est_models = models_from_config(data.tail(count), mcfg, K_override)
    out = {}
    for m, mod in est_models.items():
        prior = training_sample_prior(train_models[m], train.get("estimator", "gmm"),
                                      train.get("multiplier", 2.0), train.get("dof", 2.5),
                                      train.get("dispersion", 5.0))
        out[m] = LogPosterior(mod, prior)
    return out


def mcmc_config(cfg: dict, seed: int) -> McmcConfig:
    m = dict(cfg.get("mcmc", {}))
    m["seed"] = seed
    try:
        return McmcConfig(**m)
    except TypeError as exc:
        raise ConfigError(f"mcmc section: {exc}") from None


def ml_config(cfg: dict, seed: int) -> MlConfig:
    m = dict(cfg.get("ml", {}))
    mc = cfg.get("mcmc", {})
    m.setdefault("draws", mc.get("draws", 20000))
    m.setdefault("burn_in", mc.get("burn_in", 1000))
    m["seed"] = seed
    try:
        return MlConfig(**m)
    except TypeError as exc:
        raise ConfigError(f"ml section: {exc}") from None


# ---------------------------------------------------------------- output ---

def metadata(cfg: dict, seed: int, n=None, K=None) -> dict:
    return {"config": cfg, "seed": seed, "K": K, "n": n, "version": __version__}


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def density_grid(x, points: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE of a chain on a grid spanning its range plus 10%."""
    x = np.asarray(x, float)
    lo, hi = x.min(), x.max()
    pad = 0.1 * (hi - lo) if hi > lo else 1.0
    grid = np.linspace(lo - pad, hi + pad, points)
    if np.ptp(x) == 0.0:
        return grid, np.zeros(points)
    return grid, gaussian_kde(x)(grid)


def export_basis(model, out: Path, prefix: str = "basis") -> None:
    for j, block in enumerate(model.blocks):
        if block.basis is None:
            continue
        np.savetxt(out / f"{prefix}_block{j}.csv", block.basis, delimiter=",",
                   header=",".join(block.labels), comments="")


def print_table(rows: list[dict], columns: list[str]) -> None:
    widths = [max(len(c), *(len(_fmt(r.get(c))) for r in rows)) for c in columns]
    print("  ".join(c.rjust(w) for c, w in zip(columns, widths)))
    for r in rows:
        print("  ".join(_fmt(r.get(c)).rjust(w) for c, w in zip(columns, widths)))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}" if abs(v) < 1e4 else f"{v:.2f}"
    return "" if v is None else str(v)


# -------------------------------------------------------------- commands ---

def cmd_estimate(cfg: dict, args) -> int:
    data = load_data(cfg, args.seed)
    posts = posteriors_from_config(data, cfg)
    if len(posts) != 1:
        raise ConfigError("estimate needs a single model; use 'compare' for several")
    (mid, lp), = posts.items()
    out = args.out
    if args.export_basis:
        export_basis(lp.model, out)
    res = run_mcmc(lp, mcmc_config(cfg, args.seed))
    res.to_csv(out / "draws.csv")
    summary = res.summary_dict()
    summary["model"] = mid
    summary["meta"] = metadata(cfg, args.seed, lp.model.n, effective_K(data, cfg["model"]))
    write_json(out / "summary.json", summary)
    for j, nm in enumerate(res.param_names):
        grid, dens = density_grid(res.draws[:, j])
        np.savetxt(out / f"density_{nm}.csv", np.column_stack([grid, dens]), delimiter=",",
                   header="theta,density", comments="")
    if args.debug_dump:
        G = lp.model.expand(res.mean)
        dump_evaluation(out / "etel_dump.csv", evaluate(G), hull_check(G))
    rows = [{"param": nm, **{k: v for k, v in s.items()}} for nm, s in res.summaries.items()]
    print_table(rows, ["param", "mean", "sd", "median", "q05", "q95", "ineff"])
    print(f"acceptance rate {res.acceptance_rate:.3f}")
    return EXIT_OK


def cmd_compare(cfg: dict, args) -> int:
    data = load_data(cfg, args.seed)
    if "models" in cfg:
        posts = {}
        for i, mcfg in enumerate(cfg["models"]):
            for m, lp in posteriors_from_config(data, cfg, mcfg).items():
                posts[mcfg.get("id", f"{m}{i}") if len(cfg["models"]) > 1 else m] = lp
    else:
        posts = posteriors_from_config(data, cfg)
    comp = compare_models(list(posts.items()), ml_config(cfg, args.seed), args.jobs)
    comp.meta.update(metadata(cfg, args.seed, data.n))
    comp.write(args.out, "comparison")
    print_table(comp.rows(), ["rank", "model", "log_ml", "se", "probability"])
    if comp.failures:
        for m, err in comp.failures.items():
            print(f"failed: {m}: {err}", file=sys.stderr)
        return EXIT_NUMERICAL if len(comp.failures) == len(comp.model_ids) else EXIT_OK
    return EXIT_OK


def cmd_volume(cfg: dict, args) -> int:
    data = load_data(cfg, args.seed)
    vcfg = cfg.get("volume", {})
    grid = vcfg.get("K_grid") or [None]
    rows = []
    for K in grid:
        posts = posteriors_from_config(data, cfg, K_override=K)
        for m, lp in posts.items():
            v = hull_volume(lp.model, lp.prior, int(vcfg.get("draws", 2000)), args.seed, args.jobs)
            rows.append({"model": m, "K": K if K is not None else effective_K(data, cfg["model"]),
                         "volume": v.volume, "se": v.standard_error, "draws": v.draws})
    write_json(args.out / "volume.json", {"volumes": rows, "meta": metadata(cfg, args.seed, data.n)})
    with open(args.out / "volume.csv", "w") as fh:
        fh.write("model,K,volume,se,draws\n")
        for r in rows:
            fh.write(f"{r['model']},{r['K']},{r['volume']!r},{r['se']!r},{r['draws']}\n")
    print_table(rows, ["model", "K", "volume", "se"])
    return EXIT_OK


def cmd_search(cfg: dict, args) -> int:
    data = load_data(cfg, args.seed)
    s = require(cfg, "search")
    K = int(s.get("K", 3))
    forced = list(s.get("forced", []))
    binary = set(s.get("binary", [c for c in forced if np.all(np.isin(data[c], (0.0, 1.0)))]))
    pcfg = cfg.get("prior") or {}

    def build(d, subset):
        cont = [c for c in subset if c not in binary]
        bins = [c for c in subset if c in binary]
        model = iv_conditioning_model(d, cont, bins, K)
        return LogPosterior(model, prior_for(model, pcfg))

    comp = sparsity_search(data, require(s, "candidates", "search"), forced, build, int(s.get("max_size", 3)),
                           ml_config(cfg, args.seed), s.get("expected_count"), s.get("include_forced_only", True),
                           args.jobs)
    comp.meta.update(metadata(cfg, args.seed, data.n, K))
    comp.write(args.out, "search")
    write_search_series(comp, args.out / "search_series.csv")
    print_table(comp.rows()[:10], ["rank", "model", "log_ml", "se", "probability"])
    return EXIT_OK


def cmd_simulate(cfg: dict, args) -> int:
    e = dict(require(cfg, "experiment"))
    e.setdefault("seed_base", args.seed)
    try:
        spec = ExperimentSpec.from_dict(e)
    except TypeError as exc:
        raise ConfigError(f"experiment section: {exc}") from None
    res = run_repeated(spec, args.jobs)
    res.write(args.out, "experiment")
    out = res.to_dict()
    out["meta"].update(metadata(cfg, args.seed, spec.n, spec.effective_K))
    write_json(args.out / "experiment.json", out)
    print(json.dumps(res.aggregates, indent=2))
    return EXIT_OK if res.failures < spec.repetitions else EXIT_NUMERICAL


def cmd_pseudo_true(cfg: dict, args) -> int:
    p = dict(cfg.get("pseudo_true", {}))
    res = pseudo_true_value(int(p.get("N", 500_000)), int(p.get("K", 26)), p.get("fixed_intercept", 0.5),
                            int(p.get("seed", args.seed)), int(p.get("restarts", 5)))
    out = res.to_dict()
    out["meta"] = metadata(cfg, args.seed, res.N, res.K)
    write_json(args.out / "pseudo_true.json", out)
    print_table([{"param": k, "value": v} for k, v in out["theta"].items()], ["param", "value"])
    return EXIT_OK


HANDLERS = {"estimate": cmd_estimate, "compare": cmd_compare, "volume": cmd_volume, "search": cmd_search,
            "simulate": cmd_simulate, "pseudo-true": cmd_pseudo_true}


# ------------------------------------------------------------------ main ---

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="betel", description="Bayesian ETEL estimation and model comparison")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} command")
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--jobs", type=int, default=None, help="parallel workers (env BETEL_JOBS)")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--debug-dump", action="store_true", help="write lambda, p and the LP margin")
        p.add_argument("--export-basis", action="store_true", help="write basis matrices as CSV")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigError(f"missing command; choose one of {', '.join(COMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        if args.jobs is None:
            env = os.environ.get("BETEL_JOBS")
            try:
                args.jobs = int(env) if env else 1
            except ValueError:
                raise ConfigError(f"BETEL_JOBS must be an integer, got {env!r}") from None
        if args.jobs == 0 or args.jobs < -1:
            raise ConfigError("--jobs must be a positive integer or -1")
        args.out = Path(args.out)
        try:
            args.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {args.out}: {exc}") from None
        return HANDLERS[args.command](cfg, args)
    except (ConfigError, DataError, ModelError, BasisError, KeyError) as exc:
        return _fail(EXIT_USAGE, exc)
    except (TailoringError, OrdinateError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except ValueError as exc:
        return _fail(EXIT_USAGE, exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
