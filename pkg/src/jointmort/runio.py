"""Run-directory files: chain checkpoints, diagnostics, summaries and reloading a fitted run.

Chain checkpoint layout (``chain_<k>.bin``, all integers and floats little-endian)::

    bytes 0-7    magic  b"JMCHAIN1"
    bytes 8-15   uint64 number of draws N
    bytes 16-23  uint64 parameter-vector length D
    bytes 24-    N x D float64, one parameter vector per draw in sampling order

Each vector follows the layout documented in :mod:`jointmort.hiermodel`.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .hiermodel import HierModel, ModelSpec
from .mortdata import MortalityDataset, format_number, load_dataset
from .sampler import Diagnostics, PosteriorSamples, compute_diagnostics
from .sampler.core import STAT_FIELDS

CHAIN_MAGIC = b"JMCHAIN1"
RUN_SCHEMA_VERSION = 1
SUMMARY_PROBS = (0.025, 0.05, 0.1, 0.9, 0.95, 0.975)


def write_chain(path, draws: np.ndarray) -> None:
    draws = np.ascontiguousarray(draws, dtype="<f8")
    n, d = draws.shape
    with Path(path).open("wb") as fh:
        fh.write(CHAIN_MAGIC)
        fh.write(struct.pack("<QQ", n, d))
        fh.write(draws.tobytes())


def read_chain(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:8] != CHAIN_MAGIC:
        raise ValueError(f"{path}: not a chain checkpoint")
    n, d = struct.unpack("<QQ", buf[8:24])
    body = buf[24:]
    if len(body) != 8 * n * d:
        raise ValueError(f"{path}: truncated checkpoint ({len(body)} bytes for {n} x {d} draws)")
    return np.frombuffer(body, dtype="<f8").astype(float).reshape(n, d)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_number(x) if isinstance(x, (float, np.floating)) else x for x in row])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n",
                          encoding="utf-8")


def _json_default(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def draw_quantiles(x: np.ndarray, probs: Sequence[float], chunk: int = 2000) -> np.ndarray:
    """Quantiles over the leading (draw) axis, computed a block of columns at a time.

    Returns ``len(probs) x x.shape[1:]``.
    """
    flat = x.reshape(len(x), -1)
    out = np.empty((len(probs), flat.shape[1]))
    for k in range(0, flat.shape[1], chunk):
        out[:, k:k + chunk] = np.quantile(flat[:, k:k + chunk], probs, axis=0)
    return out.reshape((len(probs),) + x.shape[1:])


def _prob_header(probs) -> list[str]:
    return [f"q{p:g}" for p in probs] + ["median"]


def _pooled(s: PosteriorSamples, family: str) -> np.ndarray:
    x = s.constrained(family)
    return x.reshape((-1,) + x.shape[2:])


def summary_tables(s: PosteriorSamples, data: MortalityDataset, probs=SUMMARY_PROBS) -> dict[str, tuple]:
    """Plot-ready quantile tables keyed by file stem; each value is ``(header, rows)``."""
    spec: ModelSpec = s.model.spec
    probs = sorted(set(float(p) for p in probs) - {0.5})
    qs = list(probs) + [0.5]
    head = _prob_header(probs)
    ages, subs, areas, years = data.age_grid.labels, data.subpop_names, data.area_names, data.year_labels
    tables = {}

    q = draw_quantiles(_pooled(s, "log_rate"), qs)
    rows = [(ages[a], subs[si], areas[c], years[t], *q[:, a, si, c, t])
            for c in range(spec.C) for si in range(spec.S) for t in range(spec.T) for a in range(spec.A)]
    tables["summary_log_rate"] = (["age", "subpop", "area", "year", *head], rows)

    q = draw_quantiles(_pooled(s, "mu_beta"), qs)
    rows = [(i + 1, subs[si], years[t], *q[:, i, si, t])
            for i in range(spec.P) for si in range(spec.S) for t in range(spec.T)]
    tables["summary_mu_beta"] = (["component", "subpop", "year", *head], rows)

    rows = []
    q = draw_quantiles(_pooled(s, "sigma_beta"), qs)
    rows += [(f"sigma_beta[{i + 1},{years[t]}]", *q[:, i, t]) for i in range(spec.P) for t in range(spec.T)]
    q = draw_quantiles(_pooled(s, "sigma_mu"), qs)
    rows += [(f"sigma_mu[{i + 1}]", *q[:, i]) for i in range(spec.P)]
    q = draw_quantiles(_pooled(s, "sigma_a"), qs)
    rows += [(f"sigma_a[{ages[a]}]", *q[:, a]) for a in range(spec.A)]
    tables["summary_sigma"] = (["parameter", *head], rows)

    if spec.correlated:
        il = np.tril_indices(spec.S, -1)
        rows = []
        for family, labels in (("R_beta", [str(i + 1) for i in range(spec.P)]), ("R_gamma", list(ages))):
            R = _pooled(s, family)[..., il[0], il[1]]
            q = draw_quantiles(R, qs)
            for i, lab in enumerate(labels):
                for t in range(spec.T):
                    for k, (r, c) in enumerate(zip(*il)):
                        rows.append((family, lab, years[t], subs[r], subs[c], *q[:, i, t, k]))
        tables["summary_correlation"] = (["family", "index", "year", "row", "col", *head], rows)
    return tables


def write_fit_outputs(out: Path, s: PosteriorSamples, diag: Diagnostics, data: MortalityDataset,
                      probs=SUMMARY_PROBS, emit_draws: bool = False, config: dict | None = None) -> list[str]:
    """Write checkpoints, diagnostics and summaries; returns the file names written."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    width = len(str(s.n_chains))
    for k in range(s.n_chains):
        name = f"chain_{k + 1:0{width}d}.bin"
        write_chain(out / name, s.draws[k])
        written.append(name)
    write_csv(out / "sampler_stats.csv", ["chain", "iter", *STAT_FIELDS],
              ((k + 1, i + 1, *(float(s.stats[f][k, i]) for f in STAT_FIELDS))
               for k in range(s.n_chains) for i in range(s.n_samples)))
    write_csv(out / "diagnostics.csv", ["parameter", "rhat", "rhat_rank", "ess"],
              ((n, float(r), float(rr), float(e)) for n, r, rr, e in
               zip(diag.names, diag.rhat, diag.rhat_rank, diag.ess)))
    write_json(out / "diagnostics.json", {
        **diag.summary(),
        "step_sizes": [float(x) for x in s.step_sizes],
        "warnings": diag.warnings(),
        "leapfrog_per_draw": float(s.stats["n_leapfrog"].mean()),
        "config": config or {},
    })
    (out / "model_spec.json").write_text(s.model.spec.dumps() + "\n", encoding="utf-8")
    written += ["sampler_stats.csv", "diagnostics.csv", "diagnostics.json", "model_spec.json"]
    for stem, (header, rows) in summary_tables(s, data, probs).items():
        write_csv(out / f"{stem}.csv", header, rows)
        written.append(f"{stem}.csv")
    if emit_draws:
        names = s.names or [f"v[{i}]" for i in range(s.draws.shape[-1])]
        write_csv(out / "draws.csv", ["chain", "iter", "parameter", "value"],
                  ((k + 1, i + 1, names[j], float(s.draws[k, i, j]))
                   for k in range(s.n_chains) for i in range(s.n_samples) for j in range(len(names))))
        written.append("draws.csv")
    return written


def load_run(run_dir, data: MortalityDataset | None = None) -> tuple[PosteriorSamples, Diagnostics, MortalityDataset]:
    """Rebuild posterior samples from a ``fit`` output directory.

    The dataset is reloaded from the path recorded in ``run.json`` unless given.
    """
    run_dir = Path(run_dir)
    run = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    spec = ModelSpec.loads((run_dir / "model_spec.json").read_text(encoding="utf-8"))
    if data is None:
        data = load_dataset(run["config"]["data"])
    if data.shape != spec.dims:
        raise ValueError(f"run {run_dir} was fitted to dimensions {spec.dims}, data has {data.shape}")
    chains = sorted(run_dir.glob("chain_*.bin"))
    if not chains:
        raise ValueError(f"{run_dir}: no chain checkpoints")
    draws = np.stack([read_chain(p) for p in chains])
    model = HierModel(spec, data)
    if draws.shape[-1] != model.dim:
        raise ValueError(f"checkpoints hold vectors of length {draws.shape[-1]}, model needs {model.dim}")
    stats = {f: np.zeros(draws.shape[:2]) for f in STAT_FIELDS}
    stats_path = run_dir / "sampler_stats.csv"
    if stats_path.exists():
        with stats_path.open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                k, i = int(row["chain"]) - 1, int(row["iter"]) - 1
                for f in STAT_FIELDS:
                    stats[f][k, i] = float(row[f])
    s = PosteriorSamples(draws, stats, np.zeros(len(chains)), np.ones((len(chains), model.dim)),
                         model.layout.names(), model)
    return s, compute_diagnostics(s), data
