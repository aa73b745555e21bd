"""Convergence study: cell constants, macroscopic terms, near field, direct solves, EOC fits."""
from __future__ import annotations

import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cell import TransmissionConstants, transmission_constants
from .expansion import (LEVELS, MatchedConstants, approximation_error, build_composite,
                        match_low_order)
from .geometry import CutoffProfile, DomainSpec, GeometryError, PeriodicityCell, hole_count
from .macro import build_u20, solve_limit, solve_macro_correction, solve_singularity
from .mesh import SectorSpec, mesh_layer_pair
from .nearfield import solve_direct, solve_S1


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class StudyConfig:
    domain: DomainSpec = field(default_factory=DomainSpec)
    cell: PeriodicityCell = field(default_factory=PeriodicityCell)
    profile: CutoffProfile = field(default_factory=CutoffProfile)
    deltas: tuple = (0.25, 0.125, 0.0625)
    h0: float = 0.05
    layer_ratio: float = 8.0  # h = min(h0, delta / layer_ratio) near the layer and corners
    alpha: float = 0.15
    levels: tuple = ("2/3", "1", "4/3")
    L_band: float = 8.0
    h_cell: float = 1.0 / 64
    P: int = 2
    hole_flux: bool = True
    R_max: float = 16.0
    h_near: float = 0.05
    h_far: float = 0.5
    window_factor: float = 3.0
    richardson: bool = True
    eoc_min: float = 0.8
    eoc_gap: float = 0.3
    u20_tolerance: float = 0.05
    threads: int = 1
    out_dir: Optional[str] = None

    def __post_init__(self):
        d = list(self.deltas)
        if len(d) == 0 or any(b >= a for a, b in zip(d, d[1:])):
            raise GeometryError("deltas must be strictly decreasing")
        for x in d:
            hole_count(self.domain, x)
            if x >= min(self.domain.H_B, self.domain.H_T):
                raise GeometryError("delta must be smaller than both heights")
        if not 0 < self.alpha < 0.5 * min(self.domain.H_B, self.domain.H_T):
            raise GeometryError("alpha must lie in (0, min(H_B, H_T) / 2)")
        for lv in self.levels:
            if lv not in LEVELS:
                raise ValueError(f"unknown level {lv!r}; choose from {sorted(LEVELS)}")

    def h_layer(self, delta: float) -> float:
        return min(self.h0, delta / self.layer_ratio)


@dataclass
class ConvergenceReport:
    rows: list  # dicts: delta, level, l2, h1
    eoc: dict
    metadata: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)  # (name, passed, detail)

    def csv(self) -> str:
        buf = io.StringIO()
        buf.write("delta,level,l2,h1\n")
        for r in sorted(self.rows, key=lambda r: (-r["delta"], _level_key(r["level"]))):
            buf.write(f"{r['delta']:.10g},{r['level']},{r['l2']:.10e},{r['h1']:.10e}\n")
        return buf.getvalue()

    def summary(self) -> str:
        lines = []
        for lv in sorted(self.eoc, key=_level_key):
            for norm in ("l2", "h1"):
                e = self.eoc[lv][norm]
                lines.append(f"level {lv} {norm}: EOC {e['slope']:.4f} +- {e['halfwidth']:.4f}"
                             f"{' [' + ','.join(e['flags']) + ']' if e['flags'] else ''}")
        for name, ok, detail in self.checks:
            lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return "\n".join(lines) + "\n"

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "convergence.csv").write_text(self.csv())
        (out / "summary.txt").write_text(self.summary())


def _level_key(lv: str) -> float:
    a, _, b = lv.partition("/")
    return float(a) / float(b or 1)


def fit_eoc(deltas: Sequence[float], errors: Sequence[float]) -> dict:
    """Least-squares slope of log(error) against log(delta) with a residual half-width."""
    d = np.asarray(deltas, float)
    e = np.asarray(errors, float)
    if len(d) < 3:
        raise ValueError("an EOC fit needs at least 3 rows")
    flags = []
    if np.all(e < 1e-10):
        return {"slope": 0.0, "halfwidth": 0.0, "flags": ["degenerate"]}
    if np.any(e < 1e-10):
        # an error at roundoff level makes the log-log slope meaningless
        flags.append("degenerate")
    e = np.maximum(e, 1e-300)
    x, y = np.log(d), np.log(e)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    dof = len(d) - 2
    s2 = float(res @ res) / dof if dof > 0 else 0.0
    sxx = float(((x - x.mean()) ** 2).sum())
    half = math.sqrt(s2 / sxx) if sxx > 0 else float("inf")
    slope = float(coef[0])
    if abs(slope) < 0.1:
        flags.append("stagnant")
    if dof > 0 and math.sqrt(s2) > 0.25:
        flags.append("large-residual")
    return {"slope": slope, "halfwidth": half, "flags": flags}


def monotone_flags(deltas, errors, tol: float = 0.05) -> list:
    """Inversions (error growing as delta shrinks); one inversion within tol is tolerated."""
    out = []
    for i in range(1, len(deltas)):
        if errors[i] > errors[i - 1]:
            rel = errors[i] / max(errors[i - 1], 1e-300) - 1.0
            out.append({"delta": deltas[i], "relative_increase": rel, "tolerated": rel <= tol})
    if sum(1 for f in out if f["tolerated"]) > 1:
        for f in out:
            f["tolerated"] = False
    return out


# ---------------------------------------------------------------------------
# pipeline stages


def stage(name: str):
    def wrap(fn):
        def inner(*a, **k):
            try:
                return fn(*a, **k)
            except StageError:
                raise
            except Exception as exc:  # tag and re-raise
                raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        return inner
    return wrap


@stage("cell")
def run_cell(cfg: StudyConfig) -> TransmissionConstants:
    return transmission_constants(cfg.cell, cfg.profile, cfg.L_band, cfg.h_cell, cfg.P,
                                  hole_flux=cfg.hole_flux)


@stage("nearfield")
def run_nearfield(cfg: StudyConfig, tc: TransmissionConstants) -> dict:
    out = {}
    for c in ("plus", "minus"):
        if cfg.cell.empty:
            out[c] = {"L_minus1": 0.0, "uncertainty": 0.0, "skipped": True}
            continue
        spec = SectorSpec(c, cfg.R_max, cfg.cell, cfg.h_near, cfg.h_far)
        res = solve_S1(spec, tc, cfg.richardson, cfg.window_factor)
        out[c] = {"L_minus1": res.L_minus1, "uncertainty": res.diagnostics["uncertainty"],
                  "runs": res.diagnostics["runs"]}
    return out


@stage("direct")
def _direct(cfg, perf):
    return solve_direct(cfg.domain, perf)


@stage("limit")
def _limit(cfg, lim):
    return solve_limit(cfg.domain, lim)


@stage("correct")
def _correct(cfg, u00, tc):
    return solve_macro_correction(u00, tc, cfg.domain, cfg.profile)


@stage("singularity")
def _singular(cfg, lim):
    return (solve_singularity(cfg.domain, lim, "plus", cfg.profile),
            solve_singularity(cfg.domain, lim, "minus", cfg.profile))


@stage("expand")
def _errors(cfg, ud, ap, delta, node_map):
    return {lv: approximation_error(ud, ap, delta, cfg.alpha, lv, node_map) for lv in cfg.levels}


def run_delta(cfg: StudyConfig, delta: float, tc: TransmissionConstants, Lm1: dict,
              keep_fields: bool = False) -> dict:
    """All delta-dependent work for one delta: meshes, direct solve, macro terms, errors."""
    t0 = time.perf_counter()
    try:
        perf, lim, node_map = mesh_layer_pair(cfg.domain, cfg.cell, delta, cfg.h0,
                                              _size(cfg, delta))
    except Exception as exc:
        raise StageError("mesh", f"{type(exc).__name__}: {exc}") from exc
    ud = _direct(cfg, perf)
    u00 = _limit(cfg, lim)
    u01 = _correct(cfg, u00, tc)
    matched = match_low_order(u01.diagnostics["ells"], Lm1)
    sp, sm = _singular(cfg, lim)
    u20 = build_u20(sp, sm, matched.lm1_u20_plus, matched.lm1_u20_minus)
    ap = build_composite(cfg.domain, tc, u00, u01, u20, profile=cfg.profile, matched=matched)
    errs = _errors(cfg, ud, ap, delta, node_map)
    size_u01 = float(np.abs(u01.nodal_total()).max())
    size_u20 = float(np.abs(u20.nodal_total()).max())
    size_u00 = float(np.abs(u00.nodal_total()).max())
    out = {"delta": delta, "errors": errs, "matched": matched,
           "max_u00": size_u00, "max_u01": size_u01, "max_u20": size_u20,
           "n_vertices": int(perf.n_vertices), "n_holes": int(perf.meta.get("n_holes", 0)),
           "seconds": time.perf_counter() - t0}
    if keep_fields:
        out["fields"] = (ud, ap, node_map)
    return out


def _size(cfg: StudyConfig, delta: float):
    from .mesh import layer_size
    return layer_size(cfg.domain, cfg.cell, delta, cfg.h0, ratio=cfg.layer_ratio)


def acceptance_checks(cfg: StudyConfig, results: list, eoc: dict) -> list:
    """Rate criteria for the u00-only, first-order and u20 levels (those present)."""
    checks = []
    rows = [{"delta": r["delta"], "level": lv, **e} for r in results for lv, e in r["errors"].items()]
    by = {(r["delta"], r["level"]): r for r in rows}
    deltas = sorted({r["delta"] for r in rows}, reverse=True)
    if cfg.cell.empty:
        size = max(max(r["max_u01"], r["max_u20"]) / max(r["max_u00"], 1e-300) for r in results)
        checks.append(("empty hole: u01 and u20 vanish", size <= 1e-9,
                       f"max(|u01|, |u20|) / max |u00| = {size:.2e}"))
        return checks
    if "2/3" in eoc:
        s = eoc["2/3"]["h1"]["slope"]
        checks.append(("EOC u00 only", s >= cfg.eoc_min, f"{s:.3f} >= {cfg.eoc_min}"))
    if "2/3" in eoc and "1" in eoc:
        s0, s1 = eoc["2/3"]["h1"]["slope"], eoc["1"]["h1"]["slope"]
        smaller = all(by[(d, "1")]["h1"] < by[(d, "2/3")]["h1"] for d in deltas)
        checks.append(("EOC gain from u01", s1 - s0 >= cfg.eoc_gap and smaller,
                       f"{s1:.3f} - {s0:.3f} = {s1 - s0:.3f} >= {cfg.eoc_gap}, "
                       f"errors strictly smaller: {smaller}"))
    if "1" in eoc and "4/3" in eoc:
        worst = max(max(by[(d, "4/3")][n] / by[(d, "1")][n] - 1.0 for n in ("l2", "h1"))
                    for d in deltas)
        d_last = deltas[-1]
        dec = by[(d_last, "4/3")]["h1"] < by[(d_last, "1")]["h1"]
        checks.append(("u20 term", worst <= cfg.u20_tolerance and dec,
                       f"worst relative increase {worst:+.4f} <= {cfg.u20_tolerance}, "
                       f"decrease at delta={d_last:g}: {dec}"))
    return checks


def run_convergence(cfg: StudyConfig, cache: Optional[dict] = None) -> ConvergenceReport:
    """Full pipeline; delta-independent artifacts (constants, L_{-1}) are cached in `cache`."""
    cache = {} if cache is None else cache
    timings = {}
    t = time.perf_counter()
    if "constants" not in cache:
        cache["constants"] = run_cell(cfg)
    tc = cache["constants"]
    timings["cell"] = time.perf_counter() - t
    t = time.perf_counter()
    if "nearfield" not in cache:
        cache["nearfield"] = run_nearfield(cfg, tc)
    nf = cache["nearfield"]
    timings["nearfield"] = time.perf_counter() - t
    Lm1 = {c: nf[c]["L_minus1"] for c in ("plus", "minus")}

    results, failure = [], None
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            futs = [ex.submit(run_delta, cfg, d, tc, Lm1) for d in cfg.deltas]
            for f in futs:
                try:
                    results.append(f.result())
                except StageError as exc:
                    failure = failure or exc
    else:
        for d in cfg.deltas:
            try:
                results.append(run_delta(cfg, d, tc, Lm1))
            except StageError as exc:
                failure = exc
                break
    results.sort(key=lambda r: -r["delta"])
    rows = [{"delta": r["delta"], "level": lv, "l2": e["l2"], "h1": e["h1"]}
            for r in results for lv, e in r["errors"].items()]
    eoc, mono = {}, {}
    if len(results) >= 3:
        ds = [r["delta"] for r in results]
        for lv in cfg.levels:
            eoc[lv] = {n: fit_eoc(ds, [r["errors"][lv][n] for r in results]) for n in ("l2", "h1")}
            mono[lv] = monotone_flags(ds, [r["errors"][lv]["h1"] for r in results])
    meta = {"constants": tc.record(), "nearfield": {c: {k: v for k, v in nf[c].items()
                                                        if k != "runs"} for c in nf},
            "matched": results[-1]["matched"].record() if results else {},
            "meshes": {r["delta"]: {"n_vertices": r["n_vertices"], "n_holes": r["n_holes"],
                                    "max_u01": r["max_u01"], "max_u20": r["max_u20"]}
                       for r in results},
            "monotonicity": mono,
            "timings": dict(timings, **{f"delta={r['delta']:g}": r["seconds"] for r in results})}
    report = ConvergenceReport(rows, eoc, meta)
    if failure is None and len(results) >= 3:
        report.checks = acceptance_checks(cfg, results, eoc)
    if cfg.out_dir:
        report.write(cfg.out_dir)
    if failure is not None:
        report.metadata["failure"] = str(failure)
        failure.report = report
        raise failure
    return report
