"""Command-line entry point.

``lhfi fit --config run.json [--preset model1] [--seed N] [--out DIR]``
``lhfi simulate --design design.json --out DIR``
``lhfi dd --geometry sites.csv --west 1 --east 18``

Exit codes: 0 success, 2 validation error, 3 sampler error, 4 I/O error.
Set ``LHFI_LOG_LEVEL`` (DEBUG, INFO, WARNING, ...) to control verbosity.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diagnostics as dg
from . import model_core as mc
from . import synth
from .covariates import CovariateTable, SiteGeometry, compute_dd, default_anchors, engineer, parse_interaction
from .errors import (
    DuplicateKeyError,
    InvalidArgumentError,
    LHFIError,
    MissingColumnError,
    NotApplicableError,
    ParseError,
    SamplerStateError,
    ValidationError,
)
from .sampler import SamplerConfig, run_chains

log = logging.getLogger("lhfi")

EXIT_OK, EXIT_VALIDATION, EXIT_SAMPLER, EXIT_IO = 0, 2, 3, 4
LOG_ENV = "LHFI_LOG_LEVEL"

COUNT_COLUMNS = ("site", "replicate", "m1", "m2", "m3", "m4", "m5", "cardinality")
GEOMETRY_COLUMNS = ("site", "easting", "northing")


class StageError(Exception):
    """Wraps a failure with the pipeline stage it happened in."""

    def __init__(self, stage: str, exc: BaseException):
        self.stage, self.exc = stage, exc
        super().__init__(f"[{stage}] {exc}")


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _read_rows(path: Path, required: Sequence[str]) -> tuple[list[str], list[tuple[int, dict]]]:
    """Rows keyed by header with their 1-based file line numbers."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in required if c not in header]
        if missing:
            raise MissingColumnError(f"missing column(s) {', '.join(missing)}", location=str(path))
        reader.fieldnames = header
        rows = []
        for row in reader:
            if None in row:
                raise ParseError("too many fields", location=f"{path}:{reader.line_num}")
            rows.append((reader.line_num, {k: (v or "").strip() for k, v in row.items()}))
    if not rows:
        raise ValidationError("no data rows", location=str(path))
    return header, rows


def _parse(value: str, kind, path, line, col):
    where = f"{path}:{line} column {col!r}"
    if value == "":
        raise ParseError("empty value", location=where)
    try:
        if kind is int:
            out = int(value)
        else:
            out = float(value)
            if not math.isfinite(out):
                raise ValueError
    except ValueError:
        raise ParseError(f"cannot parse {value!r} as {kind.__name__}", location=where) from None
    return out


def read_counts(path) -> list[mc.SiteObservation]:
    path = Path(path)
    _, rows = _read_rows(path, COUNT_COLUMNS)
    seen: dict[tuple[int, int], int] = {}
    out = []
    for line, row in rows:
        v = {c: _parse(row[c], int, path, line, c) for c in COUNT_COLUMNS}
        key = (v["site"], v["replicate"])
        where = f"{path}:{line} (site {key[0]}, replicate {key[1]})"
        if key in seen:
            raise DuplicateKeyError(f"duplicate site-replicate pair, first seen on line {seen[key]}", location=where)
        seen[key] = line
        for c in COUNT_COLUMNS[2:7]:
            if v[c] < 0:
                raise ValidationError(f"negative count in column {c!r}", location=where)
        try:
            out.append(mc.SiteObservation(key[0], key[1], tuple(v[f"m{j}"] for j in range(1, 6)), v["cardinality"]))
        except InvalidArgumentError as exc:
            raise ValidationError(str(exc), location=where) from None
    return out


def read_covariates(path) -> CovariateTable:
    path = Path(path)
    header, rows = _read_rows(path, ("site",))
    names = [h for h in header if h != "site"]
    sites, cols = [], {n: [] for n in names}
    seen = {}
    for line, row in rows:
        s = _parse(row["site"], int, path, line, "site")
        if s in seen:
            raise DuplicateKeyError(f"duplicate site {s}, first seen on line {seen[s]}", location=f"{path}:{line}")
        seen[s] = line
        sites.append(s)
        for n in names:
            x = _parse(row[n], float, path, line, n)
            if n == "sc" and not 0 < x <= 1:
                raise ValidationError("silt-clay fraction must lie in (0, 1]", location=f"{path}:{line} column 'sc'")
            if n == "depth" and x <= 0:
                raise ValidationError("depth must be positive", location=f"{path}:{line} column 'depth'")
            cols[n].append(x)
    order = np.argsort(sites, kind="stable")
    return CovariateTable(tuple(sites[i] for i in order), {n: np.asarray(c)[order] for n, c in cols.items()})


def read_geometry(path) -> list[SiteGeometry]:
    path = Path(path)
    _, rows = _read_rows(path, GEOMETRY_COLUMNS)
    out, seen = [], set()
    for line, row in rows:
        s = _parse(row["site"], int, path, line, "site")
        if s in seen:
            raise DuplicateKeyError(f"duplicate site {s}", location=f"{path}:{line}")
        seen.add(s)
        out.append(SiteGeometry(s, _parse(row["easting"], float, path, line, "easting"), _parse(row["northing"], float, path, line, "northing")))
    return out


@dataclass
class Ingested:
    observations: list[mc.SiteObservation]
    covariates: CovariateTable
    geometry: list[SiteGeometry] | None


def ingest(counts, covariates, geometry=None) -> Ingested:
    """Read and cross-check the three input tables."""
    obs = read_counts(counts)
    table = read_covariates(covariates)
    geom = read_geometry(geometry) if geometry is not None else None
    observed = sorted({o.site_id for o in obs})
    missing = sorted(set(observed) - set(table.site_ids))
    if missing:
        raise ValidationError(f"no covariates for site(s) {missing}", location=str(covariates))
    extra = sorted(set(table.site_ids) - set(observed))
    if extra:
        raise ValidationError(f"site(s) {extra} have covariates but no counts", location=str(covariates))
    if geom is not None:
        gmissing = sorted(set(observed) - {g.site_id for g in geom})
        if gmissing:
            raise ValidationError(f"no geometry for site(s) {gmissing}", location=str(geometry))
    return Ingested(obs, table, geom)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

PRESETS = {
    "model1": {"model_covariates": ["salinity"], "level": mc.TWO_LEVEL, "prior_correlation": mc.INDEPENDENT, "covariance": mc.DIAGONAL},
    "model2": {"model_covariates": ["salinity"], "level": mc.TWO_LEVEL, "prior_correlation": mc.CORRELATED, "covariance": mc.DIAGONAL},
    "model3": {
        "model_covariates": ["log_depth", "salinity", "log_sc", "log_depth_x_log_sc"],
        "level": mc.TWO_LEVEL,
        "prior_correlation": mc.INDEPENDENT,
        "covariance": mc.DIAGONAL,
    },
    "model4": {"model_covariates": ["dd"], "level": mc.SINGLE, "prior_correlation": mc.INDEPENDENT, "covariance": mc.DIAGONAL},
    "model5": {"model_covariates": ["salinity"], "level": mc.SINGLE, "prior_correlation": mc.INDEPENDENT, "covariance": mc.DIAGONAL},
}


@dataclass
class RunConfig:
    """Flat run configuration; relative paths resolve against the config file's folder."""

    counts: Path
    covariates: Path
    geometry: Path | None = None
    out: Path = Path("lhfi_out")
    model_covariates: tuple[str, ...] = ()
    covariance: str = mc.DIAGONAL
    level: str = mc.SINGLE
    prior_correlation: str = mc.INDEPENDENT
    upstream: tuple[str, str] = ("salinity", "dd")
    west: int | None = None
    east: int | None = None
    ci_levels: tuple[float, ...] = dg.DEFAULT_LEVELS
    plot_data: bool = True
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    @property
    def spec(self) -> mc.ModelSpec:
        return mc.ModelSpec(
            covariates=tuple(self.model_covariates),
            covariance=mc.CovarianceSpec(self.covariance),
            level=self.level,
            upstream=tuple(self.upstream),
            prior_correlation=self.prior_correlation,
        )


_SAMPLER_KEYS = {f.name for f in dataclasses.fields(SamplerConfig)}
_PATH_KEYS = ("counts", "covariates", "geometry", "out")


def load_config(path, preset: str | None = None, seed: int | None = None, out=None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", location=f"{path}:{exc.lineno}") from None
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object", location=str(path))
    if preset is not None:
        if preset not in PRESETS:
            raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        raw.update(PRESETS[preset])
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = str(Path(out).resolve())
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"sampler"}
    unknown = sorted(set(raw) - known - _SAMPLER_KEYS)
    if unknown:
        raise ValidationError(f"unknown key(s) {unknown}", location=str(path))
    for k in ("counts", "covariates"):
        if k not in raw:
            raise ValidationError(f"missing key {k!r}", location=str(path))
    kw = {k: v for k, v in raw.items() if k in known}
    base = path.parent
    for k in _PATH_KEYS:
        if kw.get(k) is not None:
            p = Path(kw[k])
            kw[k] = p if p.is_absolute() else base / p
    for k in ("model_covariates", "upstream", "ci_levels"):
        if k in kw:
            kw[k] = tuple(kw[k])
    try:
        kw["sampler"] = SamplerConfig(**{k: v for k, v in raw.items() if k in _SAMPLER_KEYS})
        cfg = RunConfig(**kw)
        cfg.spec  # validates the model keys
    except (TypeError, InvalidArgumentError) as exc:
        raise ValidationError(str(exc), location=str(path)) from None
    return cfg


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------


def build_data(cfg: RunConfig, inp: Ingested) -> tuple[mc.LHFIData, CovariateTable]:
    """Engineer covariates and align them with the observations."""
    spec = cfg.spec
    needed = spec.required_columns()
    dd = None
    if any(c == "dd" or "dd" in (parse_interaction(c) or ()) for c in needed) and "dd" not in inp.covariates:
        if inp.geometry is None:
            raise ValidationError("model uses 'dd' but no geometry file was given")
        west, east = default_anchors(inp.geometry)
        west = cfg.west if cfg.west is not None else west
        east = cfg.east if cfg.east is not None else east
        dd = compute_dd(inp.geometry, west, east)
    interactions = [p for p in map(parse_interaction, needed) if p is not None]
    table = engineer(inp.covariates, dd=dd, interactions=interactions)
    missing = [c for c in needed if c not in table]
    if missing:
        raise ValidationError(f"model covariate(s) {missing} not found after engineering")
    data = mc.LHFIData(inp.observations, {c: table[c] for c in needed}, site_ids=table.site_ids)
    return data, table


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".10g")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if not isinstance(v, str) else v for v in r])
    return buf.getvalue()


def summary_table(summaries: dict[str, dg.PosteriorSummary], levels) -> str:
    lo_hi = sorted({p for lv in levels for p in dg._tail_probs(lv)})
    header = ["parameter", "mean", "median", "sd"] + [f"q{p:g}" for p in lo_hi] + ["rhat", "ess", "mcse"]
    header += [f"credible_{lv:g}" for lv in levels]
    rows = []
    for s in summaries.values():
        rows.append(
            [s.name, s.mean, s.median, s.sd]
            + [s.quantiles[p] for p in lo_hi]
            + [s.rhat, s.ess, s.mcse]
            + [s.credible[lv] for lv in levels]
        )
    return _csv_text(header, rows)


def health_table(ranking: dg.SiteRanking) -> str:
    rows = [(r.site_id, r.mean, r.lower, r.upper, r.rank) for r in sorted(ranking.sites, key=lambda r: r.site_id)]
    return _csv_text(["site", "lhfi", "lower", "upper", "rank"], rows)


def bgr_table(draws: dict[str, np.ndarray]) -> str:
    rows = []
    for name, X in draws.items():
        try:
            _, curves = dg.bgr_statistic(X)
        except (InvalidArgumentError,):
            continue
        for it, p, w in zip(curves.iterations, curves.pooled, curves.within):
            rows.append((name, int(it), p, w, p / w))
    return _csv_text(["parameter", "draw", "pooled_width", "within_width", "ratio"], rows)


def trace_table(chains, draws: dict[str, np.ndarray]) -> str:
    names = list(draws)
    beta = np.stack([c.draws["beta"] for c in chains])
    header = ["chain", "draw"] + names + [f"beta_{j + 1}" for j in range(mc.N_METRICS)] + ["deviance"]
    rows = []
    for c, ch in enumerate(chains):
        for t in range(ch.n_draws):
            rows.append([ch.chain_id, t] + [draws[n][c, t] for n in names] + list(beta[c, t]) + [ch.deviance[t]])
    return _csv_text(header, rows)


def write_outputs(out_dir: Path, files: dict[str, str]) -> None:
    """Stage every file in a temporary folder inside ``out_dir``, then rename into place."""
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    try:
        for name, text in files.items():
            (stage / name).write_text(text)
        for name in files:
            os.replace(stage / name, out_dir / name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def fit(cfg: RunConfig) -> dict[str, str]:
    """Run the whole pipeline and return the output files as text, keyed by file name."""
    try:
        inp = ingest(cfg.counts, cfg.covariates, cfg.geometry)
    except OSError:
        raise
    except LHFIError as exc:
        raise StageError("ingest", exc) from exc
    try:
        data, table = build_data(cfg, inp)
    except LHFIError as exc:
        raise StageError("covariates", exc) from exc
    spec = cfg.spec
    log.info("fitting %s with %d chains x %d iterations", spec, cfg.sampler.n_chains, cfg.sampler.n_iterations)
    try:
        chains = run_chains(data, spec, cfg.sampler, progress=_log_progress)
    except LHFIError as exc:
        raise StageError("sampler", exc) from exc
    try:
        levels = tuple(cfg.ci_levels)
        if 0.95 not in levels:
            levels = levels + (0.95,)
        summaries = dg.fit_summary(chains, data, levels)
        ranking = dg.rank_sites({s: summaries[f"H_{s}"] for s in data.site_ids}, 0.95)
        d = dg.fit_dic(chains, data)
    except LHFIError as exc:
        raise StageError("diagnostics", exc) from exc
    files = {
        "summary.csv": summary_table(summaries, levels),
        "health.csv": health_table(ranking),
        "overlap.csv": _csv_text(["site_a", "site_b"], ranking.distinguishable),
        "dic.txt": f"DIC {_fmt(d.dic)}\np_D {_fmt(d.p_D)}\nDbar {_fmt(d.mean_deviance)}\n",
        "centring.json": json.dumps({k: table.centring[k] for k in sorted(table.centring)}, indent=2) + "\n",
    }
    if cfg.plot_data:
        draws = dg.parameter_draws(chains)
        for s, x in dg.health_draws(chains, data.site_ids).items():
            draws[f"H_{s}"] = x
        files["bgr.csv"] = bgr_table(draws)
        files["trace.csv"] = trace_table(chains, draws)
    return files


def _log_progress(info):
    log.debug("chain %d iteration %d acceptance %s", info["chain"], info["iteration"], info["acceptance"])


# ---------------------------------------------------------------------------
# Simulate
# ---------------------------------------------------------------------------

_DESIGN_KEYS = {
    "n_sites", "replicates", "cardinality_min", "cardinality_max", "seed",
    "alpha0", "alpha_salinity", "alpha_dd", "sigma_H", "sigma_delta", "theta_minus", "sigma_beta",
}


def load_design(path) -> synth.SynthDesign:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", location=f"{path}:{exc.lineno}") from None
    unknown = sorted(set(raw) - _DESIGN_KEYS)
    if unknown:
        raise ValidationError(f"unknown key(s) {unknown}", location=str(path))
    t0 = synth.SynthTruth()
    truth = synth.SynthTruth(
        alpha0=raw.get("alpha0", t0.alpha0),
        coefficients={"salinity": raw.get("alpha_salinity", t0.coefficients["salinity"])},
        alpha_dd=raw.get("alpha_dd", t0.alpha_dd),
        sigma_H=raw.get("sigma_H", t0.sigma_H),
        sigma_delta=raw.get("sigma_delta", t0.sigma_delta),
        theta_minus=raw.get("theta_minus", t0.theta_minus),
        sigma_beta=raw.get("sigma_beta", t0.sigma_beta),
    )
    d0 = synth.SynthDesign()
    try:
        return synth.SynthDesign(
            n_sites=raw.get("n_sites", d0.n_sites),
            replicates=raw.get("replicates", d0.replicates),
            cardinality=(raw.get("cardinality_min", d0.cardinality[0]), raw.get("cardinality_max", d0.cardinality[1])),
            truth=truth,
            seed=raw.get("seed", d0.seed),
        )
    except InvalidArgumentError as exc:
        raise ValidationError(str(exc), location=str(path)) from None


def simulate_files(design: synth.SynthDesign) -> dict[str, str]:
    """Dataset in the fit input formats, with DD encoded as easting along a straight channel."""
    ds = synth.generate(design)
    sites = ds.covariates.site_ids
    counts = _csv_text(
        COUNT_COLUMNS,
        [(o.site_id, o.replicate_id, *o.counts, o.cardinality) for o in ds.observations],
    )
    cov = _csv_text(["site", "salinity"], zip(sites, ds.covariates["salinity"]))
    geom = _csv_text(GEOMETRY_COLUMNS, [(s, e, 0.0) for s, e in zip(sites, ds.covariates["dd"])])
    t = ds.truth
    truth = {
        "alpha0": t.alpha0,
        "alpha_salinity": float(t.alpha[0]),
        "alpha_dd": float(t.alpha[1]),
        "sigma_H": math.sqrt(t.sigma_H2),
        "sigma_delta": math.sqrt(t.sigma_delta2),
        "theta_minus": t.theta_minus,
        "beta": [float(b) for b in t.beta],
        "H": {str(s): float(h) for s, h in zip(sites, t.H)},
    }
    config = {"counts": "counts.csv", "covariates": "covariates.csv", "geometry": "geometry.csv", **PRESETS["model1"]}
    return {
        "counts.csv": counts,
        "covariates.csv": cov,
        "geometry.csv": geom,
        "truth.json": json.dumps(truth, indent=2) + "\n",
        "config.json": json.dumps(config, indent=2) + "\n",
    }


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lhfi", description="Latent health factor index models.")
    sub = p.add_subparsers(dest="command", required=True)
    f = sub.add_parser("fit", help="fit a model and write result tables")
    f.add_argument("--config", required=True, type=Path)
    f.add_argument("--preset", choices=sorted(PRESETS))
    f.add_argument("--seed", type=int)
    f.add_argument("--out", type=Path)
    s = sub.add_parser("simulate", help="write a synthetic dataset in the input formats")
    s.add_argument("--design", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    d = sub.add_parser("dd", help="print distance downstream for every site")
    d.add_argument("--geometry", required=True, type=Path)
    d.add_argument("--west", required=True, type=int)
    d.add_argument("--east", required=True, type=int)
    return p


def _configure_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.exc
    if isinstance(exc, SamplerStateError):
        return EXIT_SAMPLER
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ValidationError, InvalidArgumentError, NotApplicableError)):
        return EXIT_VALIDATION
    return EXIT_SAMPLER if isinstance(exc, LHFIError) else 1


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    args = _parser().parse_args(argv)
    try:
        if args.command == "fit":
            try:
                cfg = load_config(args.config, args.preset, args.seed, args.out)
            except LHFIError as exc:
                raise StageError("config", exc) from exc
            write_outputs(cfg.out, fit(cfg))
            log.info("wrote results to %s", cfg.out)
        elif args.command == "simulate":
            try:
                design = load_design(args.design)
            except LHFIError as exc:
                raise StageError("config", exc) from exc
            write_outputs(args.out, simulate_files(design))
        else:
            try:
                geom = read_geometry(args.geometry)
                dd = compute_dd(geom, args.west, args.east)
            except LHFIError as exc:
                raise StageError("dd", exc) from exc
            sys.stdout.write(_csv_text(["site", "dd"], sorted(dd.items())))
    except (StageError, OSError) as exc:
        print(f"lhfi: error {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
