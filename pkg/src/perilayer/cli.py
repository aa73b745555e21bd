"""Command-line front end: INI config, subcommands, constants file, field export, manifest."""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import platform
import re
import sys
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .geometry import (CutoffProfile, Disk, DomainSpec, GeometryError, PeriodicityCell,
                       Polygon, SourceSpec)
from .study import StageError, StudyConfig

SCHEMA_VERSION = 1

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 2, 3, 4, 5

COMMANDS = ("cell", "limit", "singularity", "correct", "nearfield", "direct", "expand",
            "study", "export")

# section -> key -> parser name; every key is optional except perilayer.schema
SCHEMA = {
    "perilayer": {"schema": "int"},
    "domain": {"L": "float", "L_top": "float", "H_B": "float", "H_T": "float",
               "source_center": "pair", "source_radius": "float", "source_amplitude": "float"},
    "cell": {"hole": "str", "center": "pair", "radius": "float", "vertices": "points",
             "hole_vertices": "int", "profile": "str", "L_band": "float", "h": "number",
             "P": "int", "hole_flux": "bool"},
    "study": {"deltas": "numbers", "h0": "float", "layer_ratio": "float", "alpha": "float",
              "levels": "strs", "eoc_min": "float", "eoc_gap": "float",
              "u20_tolerance": "float", "threads": "int"},
    "nearfield": {"R_max": "float", "h_near": "float", "h_far": "float",
                  "window_factor": "float", "richardson": "bool"},
    "output": {"dir": "str", "export_fields": "bool", "format": "str"},
}


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    study: StudyConfig
    out_dir: str = "perilayer_out"
    export_fields: bool = False
    field_format: str = "vtk"
    schema: int = SCHEMA_VERSION
    canonical: str = ""  # normalized config text, hashed into the manifest
    source: Optional[str] = None

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical.encode()).hexdigest()

    def section_hash(self, *sections) -> str:
        keep = [ln for ln in self.canonical.splitlines() if ln.split(".", 1)[0] in sections]
        return hashlib.sha256("\n".join(keep).encode()).hexdigest()


# ---------------------------------------------------------------------------
# parsing


def _number(s: str) -> float:
    return float(Fraction(s.strip()))


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "yes", "true", "on"):
        return True
    if v in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _pair(s: str) -> tuple:
    parts = [p for p in re.split(r"[,\s]+", s.strip()) if p]
    if len(parts) != 2:
        raise ValueError(f"expected two numbers, got {s!r}")
    return (_number(parts[0]), _number(parts[1]))


def _points(s: str) -> tuple:
    pts = tuple(_pair(p) for p in s.split(";") if p.strip())
    if len(pts) < 3:
        raise ValueError("a polygon needs at least 3 vertices")
    return pts


PARSERS = {
    "int": lambda s: int(s.strip()),
    "float": lambda s: float(s.strip()),
    "number": _number,
    "numbers": lambda s: tuple(_number(p) for p in s.split(",") if p.strip()),
    "strs": lambda s: tuple(p.strip() for p in s.split(",") if p.strip()),
    "str": lambda s: s.strip(),
    "bool": _bool,
    "pair": _pair,
    "points": _points,
}


def _line_of(text: str, section: str, key: str) -> int:
    """1-based line of `key` inside [section], 0 if not found."""
    cur = None
    for i, ln in enumerate(text.splitlines(), 1):
        s = ln.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            cur = m.group(1).strip()
        elif cur == section and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return i
    return 0


def _section_line(text: str, section: str) -> int:
    for i, ln in enumerate(text.splitlines(), 1):
        if ln.strip() == f"[{section}]":
            return i
    return 0


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values: dict = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}:{_section_line(text, sec)}: unknown section [{sec}]")
        for key, raw in cp.items(sec):
            line = _line_of(text, sec, key)
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}:{line}: unknown key '{key}' in [{sec}]")
            try:
                values[(sec, key)] = PARSERS[SCHEMA[sec][key]](raw)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"{source}:{line}: [{sec}] {key}: {exc}") from exc
    if ("perilayer", "schema") not in values:
        raise ConfigError(f"{source}: missing [perilayer] schema = {SCHEMA_VERSION}")
    if values[("perilayer", "schema")] != SCHEMA_VERSION:
        line = _line_of(text, "perilayer", "schema")
        raise ConfigError(f"{source}:{line}: unsupported schema version "
                          f"{values[('perilayer', 'schema')]} (expected {SCHEMA_VERSION})")
    canonical = "\n".join(f"{s}.{k}={values[(s, k)]!r}" for s, k in sorted(values))
    try:
        return _build(values, canonical, source)
    except ConfigError:
        raise
    except (GeometryError, ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return parse_config_text(text, str(path))


def _build(v: dict, canonical: str, source: str) -> RunConfig:
    def g(sec, key, default):
        return v.get((sec, key), default)

    d0 = DomainSpec()
    src = SourceSpec(g("domain", "source_center", d0.source.center),
                     g("domain", "source_radius", d0.source.radius),
                     g("domain", "source_amplitude", d0.source.amplitude))
    domain = DomainSpec(g("domain", "L", d0.L), g("domain", "L_top", d0.L_top),
                        g("domain", "H_B", d0.H_B), g("domain", "H_T", d0.H_T), src)
    kind = g("cell", "hole", "none").lower()
    if kind == "none":
        hole = None
    elif kind == "disk":
        hole = Disk(g("cell", "center", (0.5, 0.0)), g("cell", "radius", 0.25))
    elif kind == "polygon":
        if ("cell", "vertices") not in v:
            raise ConfigError(f"{source}: [cell] hole = polygon needs 'vertices'")
        hole = Polygon(v[("cell", "vertices")])
    else:
        raise ConfigError(f"{source}: [cell] hole must be none, disk or polygon, got {kind!r}")
    cell = PeriodicityCell(hole, g("cell", "hole_vertices", 32))
    profile = CutoffProfile(g("cell", "profile", "quintic"))
    s0 = StudyConfig()
    study = StudyConfig(
        domain=domain, cell=cell, profile=profile,
        deltas=g("study", "deltas", s0.deltas), h0=g("study", "h0", s0.h0),
        layer_ratio=g("study", "layer_ratio", s0.layer_ratio),
        alpha=g("study", "alpha", s0.alpha), levels=g("study", "levels", s0.levels),
        L_band=g("cell", "L_band", s0.L_band), h_cell=g("cell", "h", s0.h_cell),
        P=g("cell", "P", s0.P), hole_flux=g("cell", "hole_flux", s0.hole_flux),
        R_max=g("nearfield", "R_max", s0.R_max), h_near=g("nearfield", "h_near", s0.h_near),
        h_far=g("nearfield", "h_far", s0.h_far),
        window_factor=g("nearfield", "window_factor", s0.window_factor),
        richardson=g("nearfield", "richardson", s0.richardson),
        eoc_min=g("study", "eoc_min", s0.eoc_min), eoc_gap=g("study", "eoc_gap", s0.eoc_gap),
        u20_tolerance=g("study", "u20_tolerance", s0.u20_tolerance),
        threads=g("study", "threads", s0.threads))
    if not 2 <= study.P <= 4:
        raise ConfigError(f"{source}: [cell] P must be in 2..4")
    if study.R_max < 8:
        raise ConfigError(f"{source}: [nearfield] R_max must be at least 8")
    if study.threads < 1:
        raise ConfigError(f"{source}: [study] threads must be positive")
    fmt = g("output", "format", "vtk").lower()
    if fmt not in ("vtk", "xyz"):
        raise ConfigError(f"{source}: [output] format must be vtk or xyz")
    return RunConfig(study, g("output", "dir", "perilayer_out"),
                     g("output", "export_fields", False), fmt, SCHEMA_VERSION, canonical, source)


# ---------------------------------------------------------------------------
# outputs


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def constants_text(rc: RunConfig, tc) -> str:
    """key=value record of the transmission constants; timing keys are left out."""
    rec = {k: v for k, v in tc.record().items() if k != "seconds"}
    lines = [f"# perilayer constants, schema {rc.schema}",
             f"cell_config_hash={rc.section_hash('cell')}"]
    lines += [f"{k}={_fmt(rec[k])}" for k in sorted(rec)]
    return "\n".join(lines) + "\n"


def _write_constants(rc: RunConfig, tc, out: Path) -> Path:
    """Writes constants.txt; an existing file for the same cell config must match exactly."""
    path = out / "constants.txt"
    text = constants_text(rc, tc)
    if path.exists():
        old = path.read_text()
        if old.splitlines()[1:2] == text.splitlines()[1:2] and old != text:
            raise StageError("cell", f"{path} was written for this cell config but differs "
                                     "from the recomputed constants")
    path.write_text(text)
    return path


def read_constants(path) -> dict:
    out = {}
    for ln in Path(path).read_text().splitlines():
        if not ln or ln.startswith("#"):
            continue
        k, _, v = ln.partition("=")
        out[k] = v
    return out


def _csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(_fmt(x) for x in r))
    path.write_text("\n".join(lines) + "\n")


def export_field(path: Path, mesh, data: dict, fmt: str = "vtk") -> Path:
    """Nodal fields on a mesh: legacy ASCII VTK, or plain 'x y f1 f2 ...' columns."""
    from .mesh import write_vtk
    if fmt == "vtk":
        path = path.parent / (path.name + ".vtk")
        write_vtk(path, mesh, data)
        return path
    path = path.parent / (path.name + ".xyz")
    names = list(data)
    cols = [mesh.vertices[:, 0], mesh.vertices[:, 1]] + [np.asarray(data[n]) for n in names]
    with open(path, "w") as fh:
        fh.write("# x y " + " ".join(names) + "\n")
        for row in np.column_stack(cols).tolist():
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
    return path


def _versions() -> dict:
    import scipy
    out = {"perilayer": __version__, "python": platform.python_version(),
           "numpy": np.__version__, "scipy": scipy.__version__}
    try:
        import pyamg
        out["pyamg"] = pyamg.__version__
    except ImportError:  # pragma: no cover
        out["pyamg"] = None
    return out


def write_manifest(out: Path, rc: RunConfig, command: str, timings: dict, files: list,
                   status: str, extra: Optional[dict] = None) -> Path:
    man = {"command": command, "status": status, "schema": rc.schema,
           "config": rc.source, "config_hash": rc.config_hash, "config_canonical": rc.canonical,
           "threads": rc.study.threads, "versions": _versions(),
           "stage_seconds": {k: round(v, 3) for k, v in timings.items()},
           "outputs": sorted(str(Path(f).name) for f in files)}
    if extra:
        man.update(extra)
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommands


class _Run:
    def __init__(self, rc: RunConfig, out: Path):
        self.rc, self.cfg, self.out = rc, rc.study, out
        self.timings: dict = {}
        self.files: list = []
        self.extra: dict = {}
        self._cache: dict = {}

    def timed(self, name, fn, *a, **k):
        t = time.perf_counter()
        try:
            return fn(*a, **k)
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t

    def constants(self):
        from .study import run_cell
        if "tc" not in self._cache:
            self._cache["tc"] = self.timed("cell", run_cell, self.cfg)
            self.files.append(_write_constants(self.rc, self._cache["tc"], self.out))
        return self._cache["tc"]

    def limit_mesh(self):
        from .mesh import layer_size, mesh_limit_split
        if "lim" not in self._cache:
            d = self.cfg.deltas[-1]
            size = layer_size(self.cfg.domain, self.cfg.cell, d, self.cfg.h0,
                              ratio=self.cfg.layer_ratio)
            self._cache["lim"] = self.timed("mesh", _staged("mesh", mesh_limit_split),
                                            self.cfg.domain, self.cfg.h0, size)
        return self._cache["lim"]

    def u00(self):
        from .study import _limit
        if "u00" not in self._cache:
            self._cache["u00"] = self.timed("limit", _limit, self.cfg, self.limit_mesh())
        return self._cache["u00"]

    def export(self, name, mesh, data):
        if self.rc.export_fields:
            self.files.append(export_field(self.out / name, mesh, data, self.rc.field_format))


def _staged(name, fn):
    def inner(*a, **k):
        try:
            return fn(*a, **k)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    return inner


def cmd_cell(run: _Run) -> int:
    tc = run.constants()
    rows = []
    for (kind, p), prof in sorted(run.constants().profiles.items()):
        rows.append((kind, p, prof.decay_report, prof.interior_mass,
                     float(np.abs(prof.field.values).max())))
    path = run.out / "cell_diagnostics.csv"
    _csv(path, ("kind", "p", "decay_report", "interior_mass", "max_abs"), rows)
    run.files.append(path)
    for (kind, p), prof in sorted(tc.profiles.items()):
        run.export(f"profile_{kind}{p}", prof.mesh, {f"W_{kind}{p}": prof.field.values})
    return EXIT_OK


def _ells_rows(ells: dict) -> list:
    return [(c, q, ells[c][q]) for c in ("plus", "minus") for q in sorted(ells[c])]


def cmd_limit(run: _Run) -> int:
    from .macro import corner_ells
    u00 = run.u00()
    ells = run.timed("limit", _staged("limit", corner_ells), u00, run.cfg.domain)
    path = run.out / "corner_coeffs_u00.csv"
    _csv(path, ("corner", "q", "coefficient"), _ells_rows(ells))
    run.files.append(path)
    run.export("u00", u00.mesh, {"u00": u00.nodal_total()})
    return EXIT_OK


def cmd_singularity(run: _Run) -> int:
    from .macro import CornerFrame, extract_corner_coeffs
    from .study import _singular
    sp, sm = run.timed("singularity", _singular, run.cfg, run.limit_mesh())
    rows = []
    for c, s in (("plus", sp), ("minus", sm)):
        cc = extract_corner_coeffs(s, CornerFrame(c, run.cfg.domain.L), (-1, 1, 2))
        rows += [(c, q, cc[q]) for q in (-1, 1, 2)]
        run.export(f"s_minus1_{c}", s.mesh, {f"s_minus1_{c}": s.nodal_total()})
    path = run.out / "corner_coeffs_singular.csv"
    _csv(path, ("corner", "q", "coefficient"), rows)
    run.files.append(path)
    return EXIT_OK


def cmd_correct(run: _Run) -> int:
    from .study import _correct
    tc = run.constants()
    u01 = run.timed("correct", _correct, run.cfg, run.u00(), tc)
    path = run.out / "corner_coeffs_u01.csv"
    _csv(path, ("corner", "q", "coefficient"), _ells_rows(u01.diagnostics["ells"]))
    run.files.append(path)
    run.export("u01", u01.mesh, {"u01": u01.nodal_total()})
    return EXIT_OK


def _nearfield_text(nf: dict) -> str:
    lines = []
    for c in ("plus", "minus"):
        for k in ("L_minus1", "uncertainty"):
            lines.append(f"{k}_{c}={_fmt(float(nf[c][k]))}")
    return "\n".join(lines) + "\n"


def cmd_nearfield(run: _Run) -> int:
    from .study import run_nearfield
    tc = run.constants()
    nf = run.timed("nearfield", run_nearfield, run.cfg, tc)
    path = run.out / "nearfield.txt"
    path.write_text(_nearfield_text(nf))
    run.files.append(path)
    rows = [(c, r["R_max"], r["L_minus1"], r["residual"], r["n_vertices"])
            for c in ("plus", "minus") for r in nf[c].get("runs", [])]
    path = run.out / "nearfield_runs.csv"
    _csv(path, ("corner", "R_max", "L_minus1", "residual", "n_vertices"), rows)
    run.files.append(path)
    return EXIT_OK


def cmd_direct(run: _Run) -> int:
    from .mesh import mesh_perforated
    from .study import _direct, _size
    rows = []
    for d in run.cfg.deltas:
        mesh = run.timed("mesh", _staged("mesh", mesh_perforated), run.cfg.domain, run.cfg.cell,
                         d, run.cfg.h0, _size(run.cfg, d))
        u = run.timed("direct", _direct, run.cfg, mesh)
        rows.append((d, mesh.n_vertices, int(mesh.meta.get("n_holes", 0)),
                     float(np.abs(u.values).max())))
        run.export(f"direct_delta_{d:g}", mesh, {"u_delta": u.values})
    path = run.out / "direct.csv"
    _csv(path, ("delta", "n_vertices", "n_holes", "max_abs_u"), rows)
    run.files.append(path)
    return EXIT_OK


def _expand_rows(run: _Run, export: bool):
    from .expansion import evaluate_composite
    from .study import run_delta, run_nearfield
    tc = run.constants()
    nf = run.timed("nearfield", run_nearfield, run.cfg, tc)
    Lm1 = {c: nf[c]["L_minus1"] for c in ("plus", "minus")}
    rows, matched = [], None
    for d in run.cfg.deltas:
        res = run.timed(f"delta={d:g}", run_delta, run.cfg, d, tc, Lm1, keep_fields=export)
        matched = res["matched"]
        for lv in run.cfg.levels:
            rows.append((d, lv, res["errors"][lv]["l2"], res["errors"][lv]["h1"]))
        if export:
            ud, ap, nm = res["fields"]
            v = ud.mesh.vertices
            data = {"u_delta": ud.values}
            for lv in run.cfg.levels:
                data[f"composite_{lv.replace('/', '_')}"] = evaluate_composite(
                    ap, d, v[:, 0], v[:, 1], lv, nm)
            run.export(f"expand_delta_{d:g}", ud.mesh, data)
    return rows, matched, nf


def cmd_expand(run: _Run) -> int:
    rows, matched, _ = _expand_rows(run, run.rc.export_fields)
    path = run.out / "expand.csv"
    _csv(path, ("delta", "level", "l2", "h1"), rows)
    run.files.append(path)
    path = run.out / "matched.txt"
    path.write_text("".join(f"{k}={_fmt(v)}\n" for k, v in matched.record().items()))
    run.files.append(path)
    return EXIT_OK


def cmd_export(run: _Run) -> int:
    run.rc = replace(run.rc, export_fields=True)
    cmd_cell(run)
    _expand_rows(run, True)
    return EXIT_OK


def cmd_study(run: _Run) -> int:
    from .study import run_convergence
    cfg = replace(run.cfg, out_dir=None)
    tc = run.constants()
    cache = {"constants": tc}
    t = time.perf_counter()
    try:
        report = run_convergence(cfg, cache)
    except StageError as exc:
        rep = getattr(exc, "report", None)
        if rep is not None:
            rep.write(run.out)
            run.files += [run.out / "convergence.csv", run.out / "summary.txt"]
        raise
    finally:
        run.timings["study"] = time.perf_counter() - t
    report.write(run.out)
    run.files += [run.out / "convergence.csv", run.out / "summary.txt"]
    path = run.out / "nearfield.txt"
    path.write_text(_nearfield_text(cache["nearfield"]))
    run.files.append(path)
    run.timings.update({f"study:{k}": v for k, v in report.metadata["timings"].items()})
    run.extra = {"checks": [{"name": n, "passed": ok, "detail": d} for n, ok, d in report.checks],
                 "eoc": report.eoc}
    sys.stdout.write(report.summary())
    return EXIT_OK if report.passed else EXIT_ACCEPT


HANDLERS = {"cell": cmd_cell, "limit": cmd_limit, "singularity": cmd_singularity,
            "correct": cmd_correct, "nearfield": cmd_nearfield, "direct": cmd_direct,
            "expand": cmd_expand, "study": cmd_study, "export": cmd_export}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="perilayer", description=__doc__)
    p.add_argument("--version", action="version", version=f"perilayer {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {"cell": "transmission constants and profile diagnostics",
             "limit": "limit field u00 and its corner coefficients",
             "singularity": "singular solutions s_{-1,0} at both corners",
             "correct": "first macroscopic correction u01",
             "nearfield": "near-field constant L_{-1}(S_1) at both corners",
             "direct": "direct perforated solves for each delta",
             "expand": "composite approximation errors for each delta",
             "study": "full convergence study with EOC fits and acceptance checks",
             "export": "write every field in the ASCII field format"}
    for name in COMMANDS:
        s = sub.add_parser(name, help=helps[name])
        s.add_argument("--config", required=True, help="INI config file")
        s.add_argument("--out", help="output directory (overrides [output] dir)")
        s.add_argument("--threads", type=int, help="worker threads for the delta loop")
        s.add_argument("--seedless", action="store_true",
                       help="reserved; the pipeline uses no randomness")
    return p


def dispatch(argv) -> int:
    try:
        args = build_parser().parse_args(list(argv))
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
    except UsageError as exc:
        print(f"perilayer: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        rc = load_config(args.config)
    except ConfigError as exc:
        print(f"perilayer: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None:
        rc = replace(rc, study=replace(rc.study, threads=args.threads))
    out = Path(args.out or rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(rc, out)
    status, code = "ok", EXIT_OK
    try:
        code = HANDLERS[args.command](run)
        status = "ok" if code == EXIT_OK else "acceptance-failed"
    except StageError as exc:
        print(f"perilayer: numerical error {exc}", file=sys.stderr)
        status, code = f"stage-error: {exc}", EXIT_NUMERIC
    finally:
        write_manifest(out, run.rc, args.command, run.timings, run.files, status, run.extra)
    return code


def main(argv=None) -> None:
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
