"""Pipeline driver: scenario, critical orbits, optional stabilization, flows,
complexes and cohomology, written as a deterministic text report.

Configuration is an INI file::

    [scenario]
    name = mapping_torus
    [params]
    theta2_scale = 1.0
    [stabilize.P2]
    lambda = 0.1
    [flow]
    directions = 64
    [complex]
    truncation = 6
    [output]
    report = report.txt
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import cochain as cc
from . import critstruct as cs
from . import flow as fl
from . import stabilize as st
from .geometry import CATALOGUE, ConfigurationError, build_scenario

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_GOLDEN = 0, 1, 2, 3
GOLDEN_DIR = Path(__file__).parent / "golden"

# section -> key -> (type, lower, upper); bounds are inclusive
_FLOW_KEYS = {
    "directions": (int, 8, 1024),
    "samples": (int, 1, 256),
    "t_max": (float, 1.0, 1e4),
    "capture_radius": (float, 1e-6, 1e-2),
}
_COMPLEX_KEYS = {"truncation": (int, 1, 64)}
_RECIPE_KEYS = {"lambda": (float, 1e-4, 10.0), "delta": (float, 1e-6, 10.0),
                "epsilon": (float, 1e-12, 10.0), "sphere_constant": (float, 1e-6, 1e3)}
_OUTPUT_KEYS = {"report", "flows", "verbose"}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"[{stage}] {type(err).__name__}: {err}")
        self.stage = stage


class GoldenSchemaError(ValueError):
    """Golden file lacks a section the comparison needs."""


@dataclass
class RunConfig:
    scenario: str
    params: dict = field(default_factory=dict)
    recipes: list = field(default_factory=list)   # [{"target": .., "lambda": .., ...}]
    directions: int = 64
    samples: int = 16
    t_max: float = 60.0
    capture_radius: float = fl.CAPTURE_RADIUS
    truncation: int = 6
    report: str = "report.txt"
    flows: str | None = None
    verbose: bool = False


# -- config -----------------------------------------------------------------------------------

def _number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _checked(section, key, raw, bounds):
    typ, lo, hi = bounds
    try:
        val = typ(float(raw)) if typ is int and float(raw).is_integer() else typ(raw)
    except ValueError:
        raise ConfigurationError(f"[{section}] {key} = {raw!r} is not a {typ.__name__}") from None
    if not lo <= val <= hi:
        raise ConfigurationError(f"[{section}] {key} = {val} outside [{lo}, {hi}]")
    return val


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigurationError(str(err)) from None
    known = {"scenario", "params", "flow", "complex", "output"}
    for sec in cp.sections():
        if sec not in known and not sec.startswith("stabilize."):
            raise ConfigurationError(f"unknown section [{sec}]")
    if not cp.has_option("scenario", "name"):
        raise ConfigurationError("[scenario] name is required")
    extra = set(cp["scenario"]) - {"name"}
    if extra:
        raise ConfigurationError(f"unknown keys in [scenario]: {sorted(extra)}")
    cfg = RunConfig(cp["scenario"]["name"].strip())
    if cfg.scenario not in CATALOGUE:
        raise ConfigurationError(f"unknown scenario {cfg.scenario!r}; choose from {sorted(CATALOGUE)}")
    if cp.has_section("params"):
        cfg.params = {k: _number(v) for k, v in cp["params"].items()}
    for sec in cp.sections():
        if not sec.startswith("stabilize."):
            continue
        bad = set(cp[sec]) - set(_RECIPE_KEYS)
        if bad:
            raise ConfigurationError(f"unknown keys in [{sec}]: {sorted(bad)}")
        if "lambda" not in cp[sec]:
            raise ConfigurationError(f"[{sec}] lambda is required")
        r = {"target": sec.split(".", 1)[1]}
        r.update({k: _checked(sec, k, v, _RECIPE_KEYS[k]) for k, v in cp[sec].items()})
        cfg.recipes.append(r)
    for sec, keys in (("flow", _FLOW_KEYS), ("complex", _COMPLEX_KEYS)):
        if not cp.has_section(sec):
            continue
        bad = set(cp[sec]) - set(keys)
        if bad:
            raise ConfigurationError(f"unknown keys in [{sec}]: {sorted(bad)}")
        for k, v in cp[sec].items():
            setattr(cfg, k, _checked(sec, k, v, keys[k]))
    if cp.has_section("output"):
        bad = set(cp["output"]) - _OUTPUT_KEYS
        if bad:
            raise ConfigurationError(f"unknown keys in [output]: {sorted(bad)}")
        out = cp["output"]
        cfg.report = out.get("report", cfg.report)
        cfg.flows = out.get("flows", None)
        if "verbose" in out:
            cfg.verbose = cp.getboolean("output", "verbose")
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Canonical INI text; ``parse_config(serialize_config(c)) == c``."""
    lines = ["[scenario]", f"name = {cfg.scenario}"]
    if cfg.params:
        lines += ["", "[params]"] + [f"{k} = {v!r}" for k, v in sorted(cfg.params.items())]
    for r in sorted(cfg.recipes, key=lambda r: r["target"]):
        lines += ["", f"[stabilize.{r['target']}]"]
        lines += [f"{k} = {r[k]!r}" for k in sorted(r) if k != "target"]
    lines += ["", "[flow]"] + [f"{k} = {getattr(cfg, k)!r}" for k in sorted(_FLOW_KEYS)]
    lines += ["", "[complex]", f"truncation = {cfg.truncation}"]
    lines += ["", "[output]", f"report = {cfg.report}"]
    if cfg.flows:
        lines.append(f"flows = {cfg.flows}")
    lines.append(f"verbose = {str(cfg.verbose).lower()}")
    return "\n".join(lines) + "\n"


# -- pipeline ---------------------------------------------------------------------------------

@dataclass
class RunReport:
    config: RunConfig
    scenario: str
    orbits: list = field(default_factory=list)
    transversality: list = field(default_factory=list)
    covers: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)
    ordinary: cc.CochainComplex | None = None
    cartan: cc.CochainComplex | None = None
    ordinary_cohomology: cc.CohomologyReport | None = None
    cartan_cohomology: cc.CohomologyReport | None = None
    warnings: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)   # seconds per stage; logged, not rendered

    def render(self) -> str:
        return render_report(self)


def _stage(name, fn, *args, **kw):
    t = time.perf_counter()
    try:
        out = fn(*args, **kw)
    except ConfigurationError:
        raise
    except Exception as err:
        raise PipelineError(name, err) from err
    log.info("stage %s took %.2fs", name, time.perf_counter() - t)
    return out, time.perf_counter() - t


def _build(cfg: RunConfig):
    s = build_scenario(cfg.scenario, dict(cfg.params))
    if not cfg.recipes:
        return s
    recipes = [st.make_recipe(s, r["target"], r["lambda"], r.get("delta"), r.get("epsilon"),
                              r.get("sphere_constant", 1.0)) for r in cfg.recipes]
    return st.apply_stabilization(s, recipes)


def run(cfg: RunConfig) -> RunReport:
    s = build_scenario_checked(cfg)
    rep = RunReport(cfg, s.name)
    orbits, rep.timing["orbits"] = _stage("critical orbits", cs.find_critical_orbits, s)
    rep.orbits = orbits
    unstable = [o for o in orbits if not o.stable]
    manifolds = [o for o in orbits if o.kind == "critical_manifold"]
    for o in unstable:
        rep.warnings.append(f"unstable orbit S_{o.label}; complex skipped")
    for o in manifolds:
        rep.warnings.append(f"critical manifold {o.label} is not a single orbit; complex skipped")
    assemble = not unstable and not manifolds and s.g_morse_bott
    if assemble:
        (covers, lines), rep.timing["flows"] = _stage(
            "flows", fl.compute_covers, s, orbits, directions=cfg.directions, samples=cfg.samples,
            t_max=cfg.t_max, r_cap=cfg.capture_radius)
        rep.covers, rep.lines = covers, lines
        rep.transversality, _ = _stage("transversality", fl.diagnose_transversality, s, orbits, lines)
    else:
        rep.transversality, rep.timing["transversality"] = _stage(
            "transversality", fl.diagnose_transversality, s, orbits, t_max=cfg.t_max, r_cap=cfg.capture_radius)
        rep.lines = {}
        for r in rep.transversality:
            if r.witness is not None:
                rep.lines.setdefault(r.pair[0], []).append(r.witness)
    for r in rep.transversality:
        if r.verdict == "failure_detected":
            rep.warnings.append(f"transversality fails for {r.pair[0]} -> {r.pair[1]} "
                                f"(expected dimension {r.expected_dim})")
    if assemble:
        lie = s.action.lie_dim
        rep.ordinary, _ = _stage("ordinary complex", cc.assemble_ordinary, orbits, rep.covers)
        rep.cartan, _ = _stage("cartan complex", cc.assemble_cartan, orbits, rep.covers, cfg.truncation, lie_dim=lie)
        rep.ordinary_cohomology, _ = _stage("cohomology", cc.cohomology, rep.ordinary)
        rep.cartan_cohomology, _ = _stage("cohomology", cc.cohomology, rep.cartan)
        _stage("theta action", cc.theta_module_action, rep.cartan)
        hi = max(rep.cartan.truncated, default=None)
        if rep.cartan.truncated:
            lo = min(rep.cartan.truncated)
            rep.warnings.append(f"cartan degrees {lo}..{hi} affected by truncation at K={cfg.truncation}; not reported")
    return rep


def build_scenario_checked(cfg: RunConfig):
    try:
        return _build(cfg)
    except ConfigurationError:
        raise
    except Exception as err:
        raise PipelineError("scenario", err) from err


# -- report text ------------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{round(float(x), 6) + 0.0:.6f}"


def render_report(rep: RunReport) -> str:
    out = io.StringIO()
    w = lambda line="": out.write(line + "\n")
    w(f"scenario {rep.scenario}")
    cfg = rep.config
    if cfg.params:
        w("params " + " ".join(f"{k}={v!r}" for k, v in sorted(cfg.params.items())))
    for r in sorted(cfg.recipes, key=lambda r: r["target"]):
        w(f"recipe {r['target']} " + " ".join(f"{k}={r[k]!r}" for k in sorted(r) if k != "target"))
    w()
    w("[orbits]")
    w("label value dim index isotropy stable representative")
    for o in rep.orbits:
        coords = ",".join(_fmt(c) for c in o.representative.coords)
        w(f"{o.label} {_fmt(o.value)} {o.dim} {o.index} {o.isotropy} {str(o.stable).lower()} "
          f"chart{o.representative.chart}({coords})")
    w()
    w("[transversality]")
    w("source target verdict expected observed weak_self_indexing")
    for r in rep.transversality:
        w(f"{r.pair[0]} {r.pair[1]} {r.verdict} {r.expected_dim} {r.observed_family_dim} "
          f"{str(r.weak_self_indexing_violation).lower()}")
    if rep.covers:
        w()
        w("[covers]")
        w("source target gap dim fiber_dim sheets coefficient")
        for (a, b), c in sorted(rep.covers.items()):
            sheets = ",".join(f"{'+' if sg > 0 else '-'}{wd}" for sg, wd in c.sheets) or "-"
            coef = cc.format_fraction(c.coefficient) if c.dim >= 0 else "-"
            w(f"{a} {b} {c.index_gap} {c.dim} {c.fiber_dim} {sheets} {coef}")
    if rep.ordinary is not None:
        w()
        w("[differential ordinary]")
        for line in cc.format_complex(rep.ordinary)[1:]:
            w(line)
        w()
        w(f"[differential cartan K={rep.cartan.K}]")
        for line in cc.format_complex(rep.cartan, rep.cartan.safe_max)[1:]:
            w(line)
        for name, h in (("ordinary", rep.ordinary_cohomology), ("cartan", rep.cartan_cohomology)):
            w()
            w(f"[cohomology {name}]")
            for line in cc.format_report(h)[1:]:
                w(line.strip() if line.startswith("  H^") else line.strip())
    w()
    w("[warnings]")
    for msg in rep.warnings:
        w(msg)
    return out.getvalue()


# -- flows CSV --------------------------------------------------------------------------------

def emit_flow_csv(rep: RunReport, path) -> int:
    """Writes one row per sample; returns the number of rows."""
    rows = []
    for src in sorted(rep.lines):
        for n, ln in enumerate(rep.lines[src]):
            lid = f"{src}:{n:05d}"
            for t, c, x in zip(ln.t, ln.C, ln.X):
                coords = [f"{v:.9g}" for v in x] + [""] * (3 - len(x))
                rows.append((lid, float(t), [lid, f"{t:.9g}", str(int(c))] + coords))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["line_id", "t", "chart", "c1", "c2", "c3"])
        for r in rows:
            wr.writerow(r[2])
    return len(rows)


def read_flow_csv(path) -> dict:
    """``line_id -> number of samples``."""
    counts: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            counts[row["line_id"]] = counts.get(row["line_id"], 0) + 1
    return counts


# -- golden comparison ------------------------------------------------------------------------

_COMPARED = ("orbits", "differential", "cohomology")


def _sections(text: str) -> dict:
    out, cur = {}, None
    for line in text.splitlines():
        if line.startswith("[") and line.endswith("]"):
            cur = line[1:-1]
            out[cur] = []
        elif cur is not None and line.strip():
            out[cur].append(line)
    return out


def compare_against_golden(report_text: str, golden_path) -> list[str]:
    """Differences over orbit tables, differential tables and ranks; empty means pass."""
    gold = _sections(Path(golden_path).read_text())
    got = _sections(report_text)
    names = [k for k in gold if k.split(" ")[0] in _COMPARED]
    if not names:
        raise GoldenSchemaError(f"{golden_path} has no orbit, differential or cohomology section")
    diff = []
    for k in names:
        if k not in got:
            diff.append(f"[{k}] missing from report")
            continue
        a, b = gold[k], got[k]
        for i in range(max(len(a), len(b))):
            la = a[i] if i < len(a) else "<none>"
            lb = b[i] if i < len(b) else "<none>"
            if la != lb:
                diff.append(f"[{k}] expected {la.strip()!r} got {lb.strip()!r}")
    for k in got:
        if k.split(" ")[0] in _COMPARED and k not in gold:
            diff.append(f"[{k}] not in golden")
    return diff


# -- entry point ------------------------------------------------------------------------------

def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="eqmorse", description=" ".join(__doc__.split("\n\n")[0].split()))
    ap.add_argument("config", help="INI configuration file")
    ap.add_argument("-o", "--output-dir", help="directory for the report and CSV (default: print report)")
    ap.add_argument("--emit-flows", action="store_true", help="write flow-line samples as CSV")
    ap.add_argument("--golden", help="compare the report against this golden file")
    ap.add_argument("--truncation", type=int, help="override [complex] truncation")
    ap.add_argument("--verbose", action="store_true", help="log stage timings to stderr")
    args = ap.parse_args(argv)
    try:
        cfg = parse_config(Path(args.config).read_text())
        if args.truncation is not None:
            cfg.truncation = _checked("complex", "truncation", str(args.truncation), _COMPLEX_KEYS["truncation"])
    except (OSError, ConfigurationError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if (cfg.verbose or args.verbose) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rep = run(cfg)
    except ConfigurationError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as err:
        print(f"pipeline error: {err}", file=sys.stderr)
        return EXIT_PIPELINE
    text = rep.render()
    try:
        if args.output_dir:
            outdir = Path(args.output_dir)
            outdir.mkdir(parents=True, exist_ok=True)
            (outdir / cfg.report).write_text(text)
            if args.emit_flows or cfg.flows:
                emit_flow_csv(rep, outdir / (cfg.flows or "flows.csv"))
        else:
            sys.stdout.write(text)
            if args.emit_flows or cfg.flows:
                emit_flow_csv(rep, Path(cfg.flows or "flows.csv"))
    except OSError as err:
        print(f"pipeline error: [output] {err}", file=sys.stderr)
        return EXIT_PIPELINE
    for msg in rep.warnings:
        log.warning(msg)
    if args.golden:
        try:
            diff = compare_against_golden(text, args.golden)
        except (OSError, GoldenSchemaError) as err:
            print(f"golden error: {err}", file=sys.stderr)
            return EXIT_GOLDEN
        if diff:
            print("\n".join(diff), file=sys.stderr)
            return EXIT_GOLDEN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
