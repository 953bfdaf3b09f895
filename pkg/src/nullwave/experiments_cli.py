"""Experiment configuration, orchestration and the ``nullwave`` command line.

Configuration is TOML with the sections ``[metric]``, ``[solver]``,
``[nonlinearity]``, ``[schedule]`` and ``[output]``.  Every key has a
default; unknown sections or keys are errors.  Exit codes: 0 pass,
1 checked failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .diagnostics import (FoliationObserver, TOL_H, commuted_energy, D_norm, dyadic_schedule,
                          energy_flux, fit_decay, hardy_check, merge_schedules,
                          p_weighted_flux, psi_phi_equivalence, spherical_average_check)
from .evolve import (Solver, SolverConfig, empirical_orders, manufactured_error, picard_run)
from .grid_fields import (Grid, SphereSampling, make_initial_data, random_bump_field,
                          write_checkpoint)
from .metric import HypothesisReport, MetricSpec, check_A1
from .nullform import NullFormSpec

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

CSV_HEADER = ("tau", "E_interior", "E_null", "E_total", "null_complete", "p1_flux",
              "p2ma_flux", "D_cum", "max_phi_inner", "max_phi_outer_weighted", "E_T",
              "E_Omega", "hardy_ratio")

# null run bounded within this factor, contrast run growing by at least CONTRAST_GROWTH
NULL_BOUND_FACTOR = 2.0
CONTRAST_GROWTH = 10.0
CONVERGENCE_ORDER = 1.9

_MINK_NULL = [1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0]
_A00_ONLY = [1.0] + [0.0] * 15

# section -> key -> default; the default fixes the accepted type
SCHEMA: dict[str, dict] = {
    "metric": {
        "family": "minkowski", "a": 0.0, "a2": 0.0, "omega": 0.0,
        "theta": [0.0, 0.0, 0.0], "R": 2.0, "lambda": 1.0, "alpha": 0.5,
        "sample_count": 33, "temporal": 64,
    },
    "solver": {
        "n": 49, "T_max": 4.0, "cfl": 0.25, "epsilon": 0.1, "profile": "compact_bump",
        "sigma": 0.0, "phi1_scale": 0.0, "mode": "direct", "picard_iters": 1,
        "manufactured": "", "breach_level": 0.25, "history_budget_mb": 2048,
        "resolutions": [49, 97, 193], "corpus_size": 100, "log_every": 0,
        "checkpoint": False,
    },
    "nonlinearity": {
        "enabled": True, "A": _MINK_NULL, "kappa": 0.0, "require_null": True,
        "contrast_A": _A00_ONLY,
    },
    "schedule": {
        "gamma": 2.0, "tau_max": -1.0, "uniform": [], "p_extra": [], "commuted": True,
        "n_theta": 16, "n_phi": 32,
    },
    "output": {"dir": "out", "seed": 0, "tol_h": TOL_H},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending location."""


def _coerce(loc: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{loc}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{loc}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{loc}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{loc}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{loc}: expected an array, got {value!r}")
        if loc.endswith("channels"):
            return value
        if loc.endswith("resolutions"):
            return [_coerce(f"{loc}[{i}]", 0, v) for i, v in enumerate(value)]
        return [_coerce(f"{loc}[{i}]", 0.0, v) for i, v in enumerate(value)]
    raise TypeError(default)


@dataclass
class ExperimentConfig:
    """Validated experiment configuration, one dict per section."""

    metric: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    nonlinearity: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown section [{sorted(unknown)[0]}]")
        sections = {}
        for name, keys in SCHEMA.items():
            given = data.get(name, {})
            if not isinstance(given, dict):
                raise ConfigError(f"[{name}] must be a table")
            extra = set(given) - set(keys)
            if extra:
                raise ConfigError(f"{name}.{sorted(extra)[0]}: unknown key")
            sec = {}
            for key, default in keys.items():
                val = given.get(key, default)
                sec[key] = _coerce(f"{name}.{key}", default, val)
            sections[name] = sec
        cfg = cls(**sections)
        cfg.check()
        return cfg

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {name: dict(getattr(self, name)) for name in SCHEMA}

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def config_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def check(self):
        """Cross-field checks that need no computation."""
        m, s, nl, sc = self.metric, self.solver, self.nonlinearity, self.schedule
        try:
            self.metric_spec()
        except ValueError as exc:
            raise ConfigError(f"metric: {exc}") from None
        if not 0 < m["alpha"] < 1:
            raise ConfigError("metric.alpha: must lie in (0, 1)")
        if not 0 < m["lambda"] <= 1:
            raise ConfigError("metric.lambda: must lie in (0, 1]")
        if len(nl["A"]) != 16 or len(nl["contrast_A"]) != 16:
            raise ConfigError("nonlinearity.A: expected 16 row-major entries")
        if s["n"] < 7 or s["n"] % 2 == 0:
            raise ConfigError("solver.n: must be odd and at least 7")
        if not s["T_max"] > 0:
            raise ConfigError("solver.T_max: must be positive")
        if s["mode"] not in ("direct", "picard"):
            raise ConfigError(f"solver.mode: unknown mode {s['mode']!r}")
        if s["manufactured"] not in ("", "cos_bump"):
            raise ConfigError(f"solver.manufactured: unknown id {s['manufactured']!r}")
        if s["profile"] not in ("compact_bump", "gaussian_bump"):
            raise ConfigError(f"solver.profile: unknown profile {s['profile']!r}")
        if s["corpus_size"] < 1:
            raise ConfigError("solver.corpus_size: must be at least 1")
        if sc["gamma"] != 0.0 and sc["gamma"] < 1.2:
            raise ConfigError("schedule.gamma: must be 0 (off) or at least 1.2")
        for p in sc["p_extra"]:
            if not 0 < p <= 2:
                raise ConfigError("schedule.p_extra: values must lie in (0, 2]")
        if self.output["tol_h"] < 0:
            raise ConfigError("output.tol_h: must be nonnegative")

    # -- builders -----------------------------------------------------------
    def metric_spec(self) -> MetricSpec:
        m = self.metric
        return MetricSpec(m["family"], m["a"], m["a2"], m["omega"], tuple(m["theta"]), m["R"])

    def nullform(self, slot: str = "A") -> NullFormSpec:
        nl = self.nonlinearity
        if not nl["enabled"]:
            return NullFormSpec.disabled()
        spec = NullFormSpec(np.array(nl[slot]).reshape(4, 4), nl["kappa"] if slot == "A" else 0.0)
        spec.certify()
        return spec

    @property
    def R(self) -> float:
        return self.metric["R"]

    def leaves(self) -> list[float]:
        sc, T = self.schedule, self.solver["T_max"]
        top = T - self.R
        tau_max = top if sc["tau_max"] < 0 else min(sc["tau_max"], top)
        dy = dyadic_schedule(sc["gamma"], tau_max) if sc["gamma"] and tau_max >= sc["gamma"] else []
        leaves = merge_schedules(dy, sc["uniform"])
        bad = [t for t in leaves if t < 0 or t > top + 1e-12]
        if bad:
            raise ConfigError(f"schedule: leaf {bad[0]} outside [0, T_max - R]")
        return leaves

    def p_values(self) -> tuple:
        a = self.metric["alpha"]
        return tuple(dict.fromkeys([1.0, 2.0 - a, *self.schedule["p_extra"]]))

    def sampling(self) -> SphereSampling:
        return SphereSampling(self.schedule["n_theta"], self.schedule["n_phi"])

    def solver_config(self, report: HypothesisReport, n: int | None = None,
                      nullform: NullFormSpec | None = None, T_max: float | None = None,
                      schedule=None) -> SolverConfig:
        s = self.solver
        lam1 = report.lambda1 if report.lambda1 > 0 else 1.0
        lam1 = min(lam1, 1.0)
        T = s["T_max"] if T_max is None else T_max
        grid = Grid.for_run(s["n"] if n is None else n, self.R, T, 1.0 / lam1)
        return SolverConfig(
            grid=grid, T_max=T, R=self.R, metric=self.metric_spec(),
            nullform=self.nullform() if nullform is None else nullform,
            epsilon=s["epsilon"], cfl=s["cfl"],
            schedule=self.leaves() if schedule is None else schedule,
            mode=s["mode"], picard_iters=s["picard_iters"],
            manufactured=s["manufactured"] or None, lambda1=lam1,
            history_budget=int(s["history_budget_mb"]) * 2**20, log_every=s["log_every"],
            breach_level=s["breach_level"] if s["breach_level"] > 0 else None)

    def initial_data(self, grid: Grid):
        s = self.solver
        return make_initial_data(grid, s["epsilon"], s["profile"], self.R,
                                 sigma=s["sigma"] if s["sigma"] > 0 else None,
                                 phi1_scale=s["phi1_scale"])


def hypothesis_report(cfg: ExperimentConfig) -> HypothesisReport:
    m = cfg.metric
    return check_A1(cfg.metric_spec(), m["lambda"], m["sample_count"], m["alpha"], m["temporal"])


# ---------------------------------------------------------------------------
# persistence


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_csv(path: Path, rows: list[dict]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in rows:
        w.writerow([_fmt(row[k]) for k in CSV_HEADER])
    _atomic_write(path, buf.getvalue().encode())


def read_csv(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"tau", "E_total", "max_phi_inner"} - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"{path}: missing column {sorted(missing)[0]}")
        rows = list(reader)
    return {k: np.array([float(r[k]) for r in rows]) for k in reader.fieldnames}


def write_json(path: Path, obj):
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    wall_time: float
    status: str
    files: list

    def to_json(self) -> dict:
        return {"config_hash": self.config_hash, "code_version": self.code_version,
                "wall_time": self.wall_time, "status": self.status, "files": self.files}


def _inventory(out: Path, names) -> list:
    files = []
    for name in sorted(names):
        p = out / name
        data = p.read_bytes()
        files.append({"name": name, "bytes": len(data),
                      "sha256": hashlib.sha256(data).hexdigest()})
    return files


def write_manifest(out: Path, cfg: ExperimentConfig, t0: float, status: str, names) -> RunManifest:
    man = RunManifest(cfg.config_hash(), __version__, time.time() - t0, status,
                      _inventory(out, names))
    write_json(out / "manifest.json", man.to_json())
    return man


# ---------------------------------------------------------------------------
# diagnostics rows


def leaf_row(obs: FoliationObserver, tau: float, reached: bool, alpha: float,
             commuted: bool) -> dict:
    nan = float("nan")
    if not reached:
        return {"tau": tau, **{k: nan for k in CSV_HEADER[1:]}}
    eb = energy_flux(obs, tau)
    h = hardy_check(obs, tau)
    rec = obs.leaf(tau)
    row = {
        "tau": tau, "E_interior": eb.interior, "E_null": eb.null_truncated,
        "E_total": eb.E_total, "null_complete": bool(eb.null_complete),
        "p1_flux": p_weighted_flux(obs, tau, 1.0),
        "p2ma_flux": p_weighted_flux(obs, tau, 2.0 - alpha),
        "D_cum": D_norm(obs, alpha, 0.0, tau) if obs.nf is not None else 0.0,
        "max_phi_inner": rec.max_phi_inner, "max_phi_outer_weighted": rec.outer_weighted,
        "E_T": nan, "E_Omega": nan,
        # a zero field satisfies the inequality with both sides zero
        "hardy_ratio": h.ratio if h.defined else (0.0 if h.value == 0 else nan),
    }
    if commuted:
        row["E_T"] = commuted_energy(obs, 0, 1, tau).E_total
        row["E_Omega"] = commuted_energy(obs, 1, 0, tau).E_total
    return row


@dataclass
class RunResult:
    status: str
    rows: list
    fit: dict
    files: list


def execute_run(cfg: ExperimentConfig, out: Path | None = None, log=None) -> RunResult:
    """Validate, evolve, accumulate, and (with ``out``) persist one run."""
    report = hypothesis_report(cfg)
    if not report.passed_A1:
        raise ConfigError(f"metric: hypothesis fails at lambda = {cfg.metric['lambda']} "
                          f"(measured {report.lam:.6g})")
    nf = cfg.nullform()
    if nf.enabled and cfg.nonlinearity["require_null"] and not nf.is_null:
        raise ConfigError("nonlinearity.A: not a null form (set require_null = false to run it)")
    scfg = cfg.solver_config(report, nullform=nf)
    try:
        scfg.validate()
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from None
    out_files = []
    state = cfg.initial_data(scfg.grid)
    alpha = cfg.metric["alpha"]
    leaves = list(scfg.schedule)
    if scfg.mode == "picard":
        res = picard_run(scfg, state, log)
        status = res.records[-1].status
        summary = {"increments": res.increments, "statuses": [r.status for r in res.records]}
        if out is not None:
            write_json(out / "picard.json", summary)
            out_files.append("picard.json")
        return RunResult(status, [], summary, out_files)
    commuted = bool(cfg.schedule["commuted"])
    channels = [(1, 0), (0, 1)] if commuted else []
    obs = FoliationObserver(leaves, cfg.R, alpha, cfg.p_values(), channels,
                            nullform=nf if nf.enabled else None, sampling=cfg.sampling())
    solver = Solver(scfg)
    rec = solver.run(state, [obs], log)
    rows = [leaf_row(obs, tau, tau <= rec.t + 1e-12, alpha, commuted) for tau in leaves]
    E = [r["E_total"] for r in rows]
    M = [r["max_phi_inner"] for r in rows]
    fit = fit_decay(leaves, E, M, alpha).to_json()
    fit["status"] = rec.status
    if out is not None:
        write_csv(out / "diagnostics.csv", rows)
        write_json(out / "fit.json", fit)
        out_files += ["diagnostics.csv", "fit.json"]
        if cfg.solver["checkpoint"]:
            write_checkpoint(out / "final.ckpt", rec.final, scfg.grid)
            out_files.append("final.ckpt")
    return RunResult(rec.status, rows, fit, out_files)


# ---------------------------------------------------------------------------
# commands


def cmd_validate_metric(cfg: ExperimentConfig, args) -> int:
    report = hypothesis_report(cfg)
    doc = report.to_json()
    print(json.dumps(doc, sort_keys=True))
    if args.out:
        out = _outdir(args.out)
        write_json(out / "hypothesis.json", doc)
    return EXIT_OK if report.passed_A1 else EXIT_FAIL


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(cfg: ExperimentConfig, args) -> int:
    t0 = time.time()
    out = _outdir(cfg.output["dir"])
    _atomic_write(out / "config.toml", cfg.dumps().encode())
    res = execute_run(cfg, out, log=print if cfg.solver["log_every"] else None)
    write_manifest(out, cfg, t0, res.status, ["config.toml", *res.files])
    print(json.dumps({"status": res.status, "out": str(out)}, sort_keys=True))
    return EXIT_OK if res.status == "completed" else EXIT_FAIL


@dataclass
class CorpusEntry:
    index: int
    hardy: float
    spherical: float
    psi_phi: float
    passed: bool
    defined: bool


def check_inequalities(cfg: ExperimentConfig, seed: int | None = None,
                       size: int | None = None) -> list[CorpusEntry]:
    """Hardy, spherical-average and psi/phi checks on a seeded random corpus.

    Each field is evolved linearly (flat metric) to ``T_max`` so the cone
    parts of the leaves are populated; every scheduled leaf is checked and
    the worst ratio per field is reported.
    """
    seed = cfg.output["seed"] if seed is None else seed
    size = cfg.solver["corpus_size"] if size is None else size
    tol = cfg.output["tol_h"]
    rng = np.random.default_rng(seed)
    flat = HypothesisReport(1.0, 0.0, 1.0, 0.0, True, cfg.metric["alpha"])
    scfg = cfg.solver_config(flat, nullform=NullFormSpec.disabled())
    scfg.metric = MetricSpec(R=cfg.R)
    leaves = list(scfg.schedule) or [0.0]
    scfg.schedule = tuple(leaves)
    scfg.validate()
    entries = []
    for i in range(size):
        state = random_bump_field(scfg.grid, rng, cfg.R)
        obs = FoliationObserver(leaves, cfg.R, cfg.metric["alpha"], bands=False,
                                sampling=cfg.sampling())
        Solver(scfg).run(state, [obs])
        h = [hardy_check(obs, t) for t in leaves]
        s = [spherical_average_check(obs, t) for t in leaves]
        q = [psi_phi_equivalence(obs, t) for t in leaves]
        defined = all(x.defined for x in h + s + q)
        if not defined:
            entries.append(CorpusEntry(i, math.nan, math.nan, math.nan, True, False))
            continue
        hr, sr, qr = (max(x.ratio for x in v) for v in (h, s, q))
        ok = hr <= 1 + tol and sr <= 1 + tol and qr <= 1 + tol
        entries.append(CorpusEntry(i, hr, sr, qr, ok, True))
    return entries


def cmd_check_inequalities(cfg: ExperimentConfig, args) -> int:
    entries = check_inequalities(cfg, args.seed)
    print(f"{'field':>5} {'hardy/6':>10} {'sph_avg/1':>10} {'psi_phi/2':>10}  result")
    for e in entries:
        if not e.defined:
            print(f"{e.index:5d} {'-':>10} {'-':>10} {'-':>10}  skipped-undefined")
            continue
        print(f"{e.index:5d} {e.hardy:10.4g} {e.spherical:10.4g} {e.psi_phi:10.4g}  "
              f"{'pass' if e.passed else 'FAIL'}")
    if args.out:
        out = _outdir(args.out)
        write_json(out / "inequalities.json", [e.__dict__ for e in entries])
    return EXIT_OK if all(e.passed for e in entries) else EXIT_FAIL


def convergence_study(cfg: ExperimentConfig, resolutions=None):
    """Manufactured-solution errors and empirical orders over the resolutions."""
    res = list(cfg.solver["resolutions"] if resolutions is None else resolutions)
    if len(res) < 3:
        raise ConfigError("solver.resolutions: a convergence study needs three resolutions")
    report = hypothesis_report(cfg)
    if not report.passed_A1:
        raise ConfigError("metric: hypothesis fails")
    nf = cfg.nullform()
    results = []
    for n in sorted(res):
        scfg = cfg.solver_config(report, n=n, nullform=nf, schedule=())
        scfg.manufactured = cfg.solver["manufactured"] or "cos_bump"
        scfg.breach_level = None
        results.append(manufactured_error(scfg))
    orders = empirical_orders([r.h for r in results], [r.error for r in results])
    return results, orders


def convergence_passed(results, orders, target: float = CONVERGENCE_ORDER) -> bool:
    """Finest-pair order at least ``target`` with errors decreasing monotonically."""
    errs = [r.error for r in results]
    monotone = all(b < a for a, b in zip(errs, errs[1:]))
    return bool(monotone and orders[-1] >= target and all(r.status == "completed" for r in results))


def cmd_convergence(cfg: ExperimentConfig, args) -> int:
    results, orders = convergence_study(cfg)
    print(f"{'n':>5} {'h':>10} {'max error':>12} {'order':>7}")
    for i, r in enumerate(results):
        o = f"{orders[i - 1]:7.3f}" if i else f"{'-':>7}"
        print(f"{r.n:5d} {r.h:10.5g} {r.error:12.5e} {o}")
    ok = convergence_passed(results, orders)
    if args.out:
        out = _outdir(args.out)
        write_json(out / "convergence.json", {
            "n": [r.n for r in results], "h": [r.h for r in results],
            "error": [r.error for r in results], "orders": orders, "pass": ok})
    return EXIT_OK if ok else EXIT_FAIL


def blowup_contrast(cfg: ExperimentConfig, stride: int = 1) -> dict:
    """Run the null slot and the contrast slot from the same data and ``epsilon``."""
    null_nf = cfg.nullform("A")
    if not null_nf.is_null:
        raise PermissionError("null slot is not certified as a null form")
    other = cfg.nullform("contrast_A")
    report = hypothesis_report(cfg)
    out = {"epsilon": cfg.solver["epsilon"], "T_max": cfg.solver["T_max"]}
    for name, nf in (("null", null_nf), ("contrast", other)):
        scfg = cfg.solver_config(report, nullform=nf, schedule=())
        state = cfg.initial_data(scfg.grid)
        rec = Solver(scfg).run(state)
        m0 = rec.initial_max_phi
        out[name] = {
            "status": rec.status, "blowup": rec.blowup, "t_end": rec.t,
            "initial_max_phi": m0, "peak_max_phi": rec.peak_max_phi,
            "growth": rec.peak_max_phi / m0 if m0 > 0 else 0.0,
            "times": rec.times[::stride], "max_phi": rec.max_phi[::stride],
            "certified_null": bool(nf.is_null),
        }
    n, c = out["null"], out["contrast"]
    out["null_bounded"] = bool(n["status"] == "completed" and n["growth"] <= NULL_BOUND_FACTOR)
    out["contrast_grows"] = bool(c["blowup"] or c["growth"] >= CONTRAST_GROWTH)
    out["contrast_established"] = out["null_bounded"] and out["contrast_grows"]
    return out


def cmd_blowup_contrast(cfg: ExperimentConfig, args) -> int:
    try:
        res = blowup_contrast(cfg)
    except PermissionError as exc:
        print(f"refusing to label runs: {exc}", file=sys.stderr)
        return EXIT_FAIL
    summary = {k: res[k] for k in ("epsilon", "null_bounded", "contrast_grows",
                                   "contrast_established")}
    for name in ("null", "contrast"):
        summary[name] = {k: res[name][k] for k in ("status", "blowup", "growth", "t_end")}
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        out = _outdir(args.out)
        write_json(out / "contrast.json", res)
    return EXIT_OK


def cmd_fit_decay(args) -> int:
    alpha = 0.5
    if args.config:
        alpha = ExperimentConfig.from_toml(args.config).metric["alpha"]
    data = read_csv(args.csv)
    ok_rows = np.isfinite(data["E_total"]) & np.isfinite(data["max_phi_inner"])
    rep = fit_decay(data["tau"][ok_rows], data["E_total"][ok_rows],
                    data["max_phi_inner"][ok_rows], alpha)
    doc = rep.to_json()
    print(json.dumps(doc, sort_keys=True))
    if args.out:
        write_json(_outdir(args.out) / "fit.json", doc)
    return EXIT_OK if all(doc["pass"].values()) else EXIT_FAIL


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    def common(default):
        c = argparse.ArgumentParser(add_help=False)
        c.add_argument("--config", default=default, help="experiment TOML file")
        c.add_argument("--out", default=default, help="output directory (overrides output.dir)")
        c.add_argument("--seed", type=int, default=default,
                       help="corpus seed (overrides output.seed)")
        c.add_argument("--threads", type=int, default=default,
                       help="worker threads for compiled kernels")
        return c

    # flags are accepted before or after the subcommand
    p = argparse.ArgumentParser(prog="nullwave", parents=[common(None)],
                                description="Wave-equation decay experiments.")
    sub_common = common(argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("validate-metric", "run", "check-inequalities", "convergence",
                 "blowup-contrast"):
        sub.add_parser(name, parents=[sub_common])
    fd = sub.add_parser("fit-decay", parents=[sub_common])
    fd.add_argument("csv", help="diagnostics CSV")
    return p


def _set_threads(n: int):
    import numba
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


_COMMANDS = {
    "validate-metric": cmd_validate_metric,
    "run": cmd_run,
    "check-inequalities": cmd_check_inequalities,
    "convergence": cmd_convergence,
    "blowup-contrast": cmd_blowup_contrast,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be positive", file=sys.stderr)
            return EXIT_USAGE
        _set_threads(args.threads)
    try:
        if args.command == "fit-decay":
            return cmd_fit_decay(args)
        if not args.config:
            print("error: --config is required", file=sys.stderr)
            return EXIT_USAGE
        cfg = ExperimentConfig.from_toml(args.config)
        if args.out:
            cfg.output["dir"] = args.out
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be a nonnegative integer")
            cfg.output["seed"] = args.seed
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
