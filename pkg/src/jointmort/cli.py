"""Command-line entry point: ``jointmort <decompose|simulate|fit|validate|summarize>``.

Resolved settings come from built-in defaults, then the ``--config`` JSON file
(top-level keys apply to every subcommand, a section named after the subcommand
overrides them), then command-line flags. Every run writes ``run.json`` in the
output directory echoing the resolved settings.

Exit codes: 0 success, 1 data or runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .evalharness import LEVELS, EvalReport, holdout_report, truth_report, write_reports
from .hiermodel import BETA_PARAMS, ModelSpec
from .mortdata import (CurveCollection, DataError, MortalityDataset, curves_from_dataset, holdout_split,
                       load_cells, load_curves, load_dataset, save_cells, save_dataset)
from .pcbasis import (DEFAULT_VARIANCE_FLOOR, ComponentSeparation, SelectionReport, explained_variance,
                      recommend_P, selection_report, svd_basis)
from .runio import (RUN_SCHEMA_VERSION, SUMMARY_PROBS, load_run, summary_tables, write_csv, write_fit_outputs,
                    write_json)
from .sampler import SamplerConfig, SamplerError, sample, summarize
from .simgen import SimConfig, StandardCurves, load_basis, load_truth, save_basis, save_truth, simulate

log = logging.getLogger("jointmort")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _names(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(str(x).strip() for x in text)
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _quantities(text) -> tuple[str, ...]:
    """Split ``"mu_beta[0,1,3],sigma_mu[0]"`` at commas outside brackets."""
    if isinstance(text, (list, tuple)):
        return tuple(str(x).strip() for x in text)
    return tuple(m.strip() for m in re.findall(r"[^,\[]+(?:\[[^\]]*\])?", str(text)) if m.strip())


def _flag(x) -> bool:
    if isinstance(x, str):
        return x.strip().lower() in ("1", "true", "yes")
    return bool(x)


# (key, converter, default, help); converter None marks a boolean switch
GLOBAL_OPTS = [
    ("out", str, "out", "output directory"),
    ("seed", int, 0, "random seed (sampler, simulation and holdout split)"),
    ("threads", int, 1, "worker processes for chains"),
]
MODEL_OPTS = [
    ("P", int, None, "number of basis components (default: all rows of the basis)"),
    ("variant", str, "joint", "joint | independent"),
    ("share_correlations", None, False, "one correlation matrix shared by all years"),
    ("beta_param", str, "anchored", "|".join(BETA_PARAMS)),
    ("basis", str, "from-truth", "from-truth (simulation curves) or a basis CSV (age,pc1,...)"),
]
SAMPLER_OPTS = [
    ("chains", int, 4, "number of chains"),
    ("warmup", int, 500, "warm-up iterations per chain"),
    ("samples", int, 2500, "post-warm-up draws per chain"),
    ("target_accept", float, 0.9, "step-size adaptation target"),
    ("max_treedepth", int, 10, "maximum NUTS tree depth"),
    ("init_jitter", float, 0.5, "uniform jitter added to the data-based initial point"),
]
COMMAND_OPTS = {
    "decompose": [
        ("curves", str, None, "curve-collection CSV (subpop,area,year,<ages>)"),
        ("data", str, None, "alternatively, a long-CSV dataset whose empirical log rates are decomposed"),
        ("p_max", int, 8, "components to keep"),
        ("alpha", float, 0.05, "significance level for subpopulation separation"),
        ("min_p", int, 3, "smallest recommended number of components"),
        ("variance_floor", float, DEFAULT_VARIANCE_FLOOR, "explained-variance share that counts as real"),
        ("unscaled", None, False, "report left singular vectors without singular-value scaling"),
    ],
    "simulate": [
        ("areas", int, 25, "number of areas"),
        ("years", int, 10, "number of years"),
        ("subgroups", int, 5, "number of subpopulations"),
        ("base_pop_unit", float, 100000.0, "population of area 1 in year 1"),
        ("growth", float, 0.01, "annual population growth"),
        ("shares", _floats, None, "comma-separated subgroup population shares"),
        ("rho", float, 0.5, "default exchangeable correlation"),
        ("regimes", _names, None, "comma-separated correlation regime per year, or one regime for all years"),
        ("baseline_coef_sd", float, 0.1, "spread of baseline-curve coefficients"),
        ("hump_coef_sd", float, 0.5, "spread of hump-curve coefficients"),
    ],
    "fit": [
        ("data", str, None, "long-CSV dataset"),
        *MODEL_OPTS,
        *SAMPLER_OPTS,
        ("probs", _floats, SUMMARY_PROBS, "summary quantiles (median always added)"),
        ("holdout", float, None, "hold out this fraction of cells per area before fitting"),
        ("emit_draws", None, False, "also write draws.csv"),
    ],
    "validate": [
        ("run", str, None, "existing fit output directory to evaluate"),
        ("data", str, None, "long-CSV dataset to fit when no run is given"),
        ("against_truth", str, None, "simulation output directory with truth files"),
        ("holdout", float, None, "holdout fraction per area"),
        ("compare", None, False, "fit and score both variants on identical holdout cells"),
        ("replicates", int, 1, "independent holdout splits (seeds seed, seed+1, ...)"),
        *MODEL_OPTS,
        *SAMPLER_OPTS,
        ("levels", _floats, LEVELS, "credible-interval levels"),
    ],
    "summarize": [
        ("run", str, None, "fit output directory"),
        ("quantity", _quantities, (), "comma-separated quantities, e.g. mu_beta[0,1,3] (0-based indices)"),
        ("probs", _floats, SUMMARY_PROBS, "quantiles to report"),
    ],
}
HELP = {
    "decompose": "principal-component basis and component-selection report",
    "simulate": "synthetic dataset with known rates and correlations",
    "fit": "sample the hierarchical model and write draws, diagnostics and summaries",
    "validate": "coverage against a simulation truth or holdout predictive scores",
    "summarize": "posterior quantiles of named quantities from a fit",
}


def _add(parser: argparse.ArgumentParser, key: str, conv, help_: str) -> None:
    flag = "--" + key.replace("_", "-")
    if conv is None:
        parser.add_argument(flag, dest=key, action="store_true", default=argparse.SUPPRESS, help=help_)
    else:
        parser.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar=key.upper(), help=help_)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="progress messages on standard error")
    for key, conv, _, h in GLOBAL_OPTS:
        _add(common, key, conv, h)
    parser = _Parser(prog="jointmort", parents=[common],
                     description="Joint small-area mortality estimation across subpopulations.")
    parser.add_argument("--version", action="version", version=f"jointmort {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in COMMAND_OPTS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name], parents=[common])
        for key, conv, _, h in opts:
            _add(p, key, conv, h)
    return parser


def resolve(command: str, flags: dict, config_path: str | None = None) -> dict:
    """Merge defaults, the config file and flags into one settings dict."""
    opts = GLOBAL_OPTS + COMMAND_OPTS[command]
    conv = {k: c for k, c, _, _ in opts}
    cfg = {k: d for k, _, d, _ in opts}
    layers = []
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        layers.append({k: v for k, v in file_cfg.items() if k in conv})
        section = file_cfg.get(command, {})
        unknown = set(section) - set(conv)
        if unknown:
            raise UsageError(f"unknown {command} settings in config: {', '.join(sorted(unknown))}")
        layers.append(section)
    layers.append(flags)
    for layer in layers:
        for k, v in layer.items():
            if k not in conv:
                continue
            if v is None:
                cfg[k] = None
                continue
            c = conv[k]
            try:
                cfg[k] = _flag(v) if c is None else c(v)
            except (TypeError, ValueError):
                raise UsageError(f"invalid value for {k}: {v!r}") from None
    if cfg["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    if cfg["seed"] < 0 or cfg["seed"] >= 2 ** 64:
        raise UsageError("--seed must be an unsigned 64-bit integer")
    return cfg


def _jsonable(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


def write_run_json(out: Path, command: str, cfg: dict, started: float, extra: dict | None = None) -> None:
    """``timestamp`` and ``elapsed_seconds`` are the only fields that vary between identical runs."""
    write_json(out / "run.json", {
        "schema_version": RUN_SCHEMA_VERSION,
        "command": command,
        "version": __version__,
        "config": _jsonable(cfg),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "elapsed_seconds": round(time.perf_counter() - started, 3),
        **(extra or {}),
    })


# -- decompose ---------------------------------------------------------------

def _selection(basis, curves: CurveCollection, cfg) -> SelectionReport:
    if len(set(curves.subpops)) >= 2:
        return selection_report(basis, curves.row_meta, cfg["alpha"], min(cfg["min_p"], basis.p_max),
                                cfg["variance_floor"])
    log.warning("fewer than two subpopulations; selection uses explained variance only")
    share = explained_variance(basis)
    rep = SelectionReport([ComponentSeparation(i, float(share[i]), {}, {}) for i in range(basis.p_max)])
    rep.recommended_P = recommend_P(rep, cfg["alpha"], min(cfg["min_p"], basis.p_max), basis.p_max,
                                    cfg["variance_floor"])
    return rep


def cmd_decompose(cfg: dict, out: Path) -> dict:
    if bool(cfg["curves"]) == bool(cfg["data"]):
        raise UsageError("give exactly one of --curves or --data")
    curves = load_curves(cfg["curves"]) if cfg["curves"] else curves_from_dataset(load_dataset(cfg["data"]))
    A = len(curves.age_grid)
    if not 1 <= cfg["p_max"] <= A:
        raise UsageError(f"--p-max must satisfy 1 <= p_max <= A (number of age groups = {A}), got {cfg['p_max']}")
    if cfg["p_max"] > len(curves.rows):
        raise DataError(f"need at least p_max = {cfg['p_max']} curves, the input has {len(curves.rows)}")
    basis = svd_basis(curves, cfg["p_max"], scaled=not cfg["unscaled"])
    out.mkdir(parents=True, exist_ok=True)
    save_basis(basis.components, curves.age_grid, out / "components.csv")
    total = float(np.sum(basis.all_singular_values ** 2))
    write_csv(out / "singular_values.csv", ["component", "singular_value", "explained_variance", "retained"],
              ((i + 1, float(s), float(s * s / total) if total else 0.0, int(i < basis.p_max))
               for i, s in enumerate(basis.all_singular_values)))
    rep = _selection(basis, curves, cfg)
    rows = []
    for r in rep.rows:
        if not r.pairs:
            rows.append((r.component + 1, r.explained_share, "", "", "", "", "", ""))
        for (g, h), res in r.pairs.items():
            t, p = res if res is not None else ("", "")
            rows.append((r.component + 1, r.explained_share, g, h, r.means[g], r.means[h], t, p))
    write_csv(out / "selection_report.csv",
              ["component", "explained_variance", "group_a", "group_b", "mean_a", "mean_b", "t", "p_value"], rows)
    return {"recommended_P": rep.recommended_P,
            "outputs": ["components.csv", "singular_values.csv", "selection_report.csv"]}


# -- simulate ----------------------------------------------------------------

def sim_config(cfg: dict) -> SimConfig:
    regimes = cfg["regimes"]
    if regimes is not None and len(regimes) == 1:
        regimes = regimes * cfg["years"]
    try:
        return SimConfig(areas=cfg["areas"], years=cfg["years"], subgroups=cfg["subgroups"],
                         base_pop_unit=cfg["base_pop_unit"], growth=cfg["growth"], shares=cfg["shares"],
                         baseline_coef_sd=cfg["baseline_coef_sd"], hump_coef_sd=cfg["hump_coef_sd"],
                         regime_schedule=regimes, exchangeable_rho=cfg["rho"], seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_simulate(cfg: dict, out: Path) -> dict:
    sim = sim_config(cfg)
    data, truth = simulate(sim)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(data, out / "dataset.csv")
    files = ["dataset.csv", *save_truth(truth, data, out, sim.regime_schedule)]
    write_json(out / "sim_config.json", sim.to_dict())
    return {"outputs": files + ["sim_config.json"]}


# -- fit ---------------------------------------------------------------------

def _basis_for(cfg: dict, data: MortalityDataset) -> np.ndarray:
    if cfg["basis"] == "from-truth":
        return StandardCurves.default(data.age_grid).basis
    return load_basis(cfg["basis"], data.age_grid)


def model_spec(cfg: dict, data: MortalityDataset) -> ModelSpec:
    basis = _basis_for(cfg, data)
    try:
        return ModelSpec.for_data(basis, data, P=cfg["P"], variant=cfg["variant"],
                                  share_correlations_over_time=cfg["share_correlations"],
                                  beta_param=cfg["beta_param"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def sampler_config(cfg: dict, seed: int | None = None) -> SamplerConfig:
    try:
        return SamplerConfig(chains=cfg["chains"], warmup=cfg["warmup"], samples=cfg["samples"],
                             seed=cfg["seed"] if seed is None else seed, target_accept=cfg["target_accept"],
                             max_treedepth=cfg["max_treedepth"], init_jitter=cfg["init_jitter"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _need(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise UsageError(f"--{key.replace('_', '-')} is required")
    return cfg[key]


def _check_fraction(f) -> None:
    if f is not None and not 0.0 < f < 1.0:
        raise UsageError(f"--holdout must lie in (0, 1), got {f}")


def _fit(spec: ModelSpec, train: MortalityDataset, cfg: dict, seed: int | None = None):
    scfg = sampler_config(cfg, seed)
    log.info("sampling %s variant: %d chains x (%d warm-up + %d draws)",
             spec.variant, scfg.chains, scfg.warmup, scfg.samples)
    return sample(spec, train, scfg, threads=cfg["threads"], progress=log.isEnabledFor(logging.INFO))


def cmd_fit(cfg: dict, out: Path) -> dict:
    data = load_dataset(_need(cfg, "data"))
    _check_fraction(cfg["holdout"])
    spec = model_spec(cfg, data)
    sampler_config(cfg)
    out.mkdir(parents=True, exist_ok=True)
    train, extra = data, []
    if cfg["holdout"] is not None:
        train, test = holdout_split(data, cfg["holdout"], cfg["seed"])
        save_cells(test, data, out / "test_cells.csv")
        extra.append("test_cells.csv")
    s, diag = _fit(spec, train, cfg)
    files = write_fit_outputs(out, s, diag, data, cfg["probs"], cfg["emit_draws"],
                              config={"sampler": sampler_config(cfg).to_dict(), "variant": spec.variant})
    warnings = diag.warnings()
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return {"outputs": files + extra, "warnings": warnings, "warning_count": len(warnings),
            "diagnostics": diag.summary()}


# -- validate ----------------------------------------------------------------

def _write_eval(out: Path, reports: list[EvalReport]) -> list[str]:
    write_reports(reports, out, "eval")
    return ["eval.json", "eval.csv"]


def _validate_truth(cfg: dict, out: Path) -> dict:
    sim_dir = Path(cfg["against_truth"])
    if cfg["run"]:
        s, diag, data = load_run(cfg["run"], load_dataset(sim_dir / "dataset.csv"))
    else:
        data = load_dataset(sim_dir / "dataset.csv")
        s, diag = _fit(model_spec(cfg, data), data, cfg)
    truth = load_truth(sim_dir, data)
    rep = truth_report(s, truth, cfg["levels"], label="truth")
    rep.counts["divergences"] = diag.divergences
    out.mkdir(parents=True, exist_ok=True)
    return {"outputs": _write_eval(out, [rep]), "warnings": diag.warnings()}


def _validate_holdout(cfg: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    reports: list[EvalReport] = []
    warnings: list[str] = []
    files: list[str] = []
    if cfg["run"]:
        data = load_dataset(cfg["data"]) if cfg["data"] else None
        s, diag, data = load_run(cfg["run"], data)
        cells_path = Path(cfg["run"]) / "test_cells.csv"
        if not cells_path.exists():
            raise UsageError(f"{cfg['run']} was not fitted with --holdout; no test_cells.csv")
        rep, _ = holdout_report(s, data, load_cells(cells_path, data), cfg["seed"], cfg["levels"], label="run")
        return {"outputs": _write_eval(out, [rep]), "warnings": diag.warnings()}
    data = load_dataset(_need(cfg, "data"))
    if cfg["holdout"] is None:
        raise UsageError("--holdout is required unless --run names a holdout fit")
    if cfg["replicates"] < 1:
        raise UsageError("--replicates must be >= 1")
    variants = ("joint", "independent") if cfg["compare"] else (cfg["variant"],)
    for r in range(cfg["replicates"]):
        seed = cfg["seed"] + r
        train, test = holdout_split(data, cfg["holdout"], seed)
        name = "test_cells.csv" if cfg["replicates"] == 1 else f"test_cells_rep{r + 1}.csv"
        save_cells(test, data, out / name)
        files.append(name)
        for variant in variants:
            spec = model_spec({**cfg, "variant": variant}, data)
            s, diag = _fit(spec, train, cfg, seed)
            rep, _ = holdout_report(s, data, test, seed, cfg["levels"], label=f"rep{r + 1}")
            rep.counts["divergences"] = diag.divergences
            reports.append(rep)
            warnings += [f"rep{r + 1} {variant}: {w}" for w in diag.warnings()]
    return {"outputs": files + _write_eval(out, reports), "warnings": warnings}


def cmd_validate(cfg: dict, out: Path) -> dict:
    _check_fraction(cfg["holdout"])
    if any(not 0.0 <= lv < 1.0 for lv in cfg["levels"]):
        raise UsageError("--levels must lie in [0, 1)")
    if cfg["against_truth"]:
        res = _validate_truth(cfg, out)
    elif cfg["run"] or cfg["data"]:
        res = _validate_holdout(cfg, out)
    else:
        raise UsageError("give --against-truth, --run or --data")
    for w in res["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    res["warning_count"] = len(res["warnings"])
    return res


# -- summarize ---------------------------------------------------------------

def cmd_summarize(cfg: dict, out: Path) -> dict:
    s, _, data = load_run(_need(cfg, "run"))
    out.mkdir(parents=True, exist_ok=True)
    probs = sorted(set(cfg["probs"]) - {0.5})
    if not cfg["quantity"]:
        files = []
        for stem, (header, rows) in summary_tables(s, data, probs).items():
            write_csv(out / f"{stem}.csv", header, rows)
            files.append(f"{stem}.csv")
        return {"outputs": files}
    rows = []
    for q in cfg["quantity"]:
        try:
            row = summarize(s, q, probs)
        except (ValueError, IndexError) as exc:
            raise UsageError(f"{q}: {exc}") from None
        rows.append((q, *row.values()))
    header = ["quantity", *(f"q{p:g}" for p in probs), "median"]
    write_csv(out / "quantities.csv", header, rows)
    print(",".join(header))
    for row in rows:
        print(",".join(str(x) for x in row))
    return {"outputs": ["quantities.csv"]}


COMMANDS = {"decompose": cmd_decompose, "simulate": cmd_simulate, "fit": cmd_fit,
            "validate": cmd_validate, "summarize": cmd_summarize}


def main(argv=None) -> int:
    started = time.perf_counter()
    try:
        ns = vars(build_parser().parse_args(argv))
        command = ns.pop("command", None)
        if command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if ns.pop("verbose", False) else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        cfg = resolve(command, ns, ns.pop("config", None))
        out = Path(cfg["out"])
        extra = COMMANDS[command](cfg, out)
        write_run_json(out, command, cfg, started, extra)
        return EXIT_OK
    except UsageError as exc:
        print(f"jointmort: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SamplerError, ArithmeticError, OSError, ValueError, KeyError) as exc:
        print(f"jointmort: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
