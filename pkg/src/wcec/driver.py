"""Pipeline orchestration, configuration files, XML/DOT reports and counter replay."""

from __future__ import annotations

import os
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from fractions import Fraction

from . import __version__, ipet, sim
from .annotations import AnnotationSet, parse_annotations
from .cfg import EdgeKind, expand_contexts, reconstruct
from .errors import ConfigError, SolverBudgetExceeded, SolverError, UnboundedLoop, WcecError
from .events import node_costs
from .loader import DEFAULT_MAP, MapEntry, RegionKind, check_map, load_elf, load_raw, overlay_map
from .models import CM0_COUNTERS, format_quantity, read_trace, replay, resolve_model
from .value import analyze as value_analyze

W_TRACE_BOUND = "W-TRACE-BOUND"
W_UNKNOWN_REGION = "W-UNKNOWN-REGION"
W_OPAQUE = "W-OPAQUE"
W_RELAXATION = "W-RELAXATION"
W_DEVICE = "W-DEVICE"
W_HINT = "W-HINT"
W_ORACLE = "W-ORACLE"

EXIT_OK, EXIT_ANALYSIS, EXIT_CONFIG, EXIT_BUDGET = 0, 1, 2, 3


@dataclass
class AnalysisConfig:
    binary: str | None = None
    raw: bool = False
    base: int | None = None
    entry: object = None
    annotations: str | None = None
    model: str = "cortex-m0.v1"
    contexts: int = 1
    loop_contexts: str = "first-rest"
    memory_map: tuple | None = None
    budget: float = 600.0
    report: str | None = None
    dot: str | None = None
    lp: str | None = None
    oracle: bool = False
    stop: tuple = ()
    max_steps: int = 1_000_000
    widen_after: int = 3
    # in-process inputs, used instead of the paths above when set
    image: object = None
    annotation_text: str | None = None

    def validate(self):
        if self.image is None and not self.binary:
            raise ConfigError("no binary given")
        if self.raw and self.image is None and (self.base is None or self.entry is None):
            raise ConfigError("raw binaries need --base and --entry")
        if self.contexts < 0:
            raise ConfigError("context depth must be >= 0")
        if self.loop_contexts not in ("first-rest", "none"):
            raise ConfigError(f"unknown loop context mode {self.loop_contexts!r}")
        if self.budget is not None and self.budget <= 0:
            raise ConfigError("solver budget must be positive")
        if self.max_steps <= 0:
            raise ConfigError("max-steps must be positive")
        return self


def _int(text, what):
    try:
        return int(text, 0)
    except ValueError:
        raise ConfigError(f"{what}: expected an integer, got {text!r}") from None


_KINDS = {"flash": RegionKind.FLASH, "ram": RegionKind.RAM, "device": RegionKind.DEVICE}


def parse_config(text, base_dir="."):
    """Parse the flat ``key value;`` configuration format.

    Relative paths are taken relative to ``base_dir``.
    """
    cfg = AnalysisConfig()
    regions = []
    body = re.sub(r"(#|//)[^\n]*", "", text)
    for stmt in (s.strip() for s in body.split(";")):
        if not stmt:
            continue
        key, _, val = stmt.partition(" ")
        val = val.strip()
        unq = val[1:-1] if len(val) >= 2 and val[0] == val[-1] == '"' else val
        path = lambda v: v if os.path.isabs(v) else os.path.join(base_dir, v)  # noqa: E731
        if key == "binary":
            cfg.binary = path(unq)
        elif key == "format":
            if unq not in ("elf", "raw"):
                raise ConfigError(f"unknown binary format {unq!r}")
            cfg.raw = unq == "raw"
        elif key == "base":
            cfg.base = _int(unq, key)
        elif key == "entry":
            cfg.entry = _int(unq, key) if re.match(r"^(0x[0-9a-fA-F]+|\d+)$", unq) else unq
        elif key == "annotations":
            cfg.annotations = path(unq)
        elif key == "model":
            cfg.model = path(unq) if os.path.exists(path(unq)) else unq
        elif key == "contexts":
            cfg.contexts = _int(unq, key)
        elif key == "loop-contexts":
            cfg.loop_contexts = unq
        elif key == "map":
            m = re.match(r"^(\S+)\s*\.\.\s*(\S+)\s*=\s*(\w+)$", val)
            if not m or m.group(3).lower() not in _KINDS:
                raise ConfigError(f"bad map statement {stmt!r}")
            regions.append(MapEntry(_int(m.group(1), "map"), _int(m.group(2), "map"),
                                    _KINDS[m.group(3).lower()]))
        elif key == "budget":
            try:
                cfg.budget = float(unq)
            except ValueError:
                raise ConfigError(f"budget: not a number: {unq!r}") from None
        elif key in ("report", "dot", "lp"):
            setattr(cfg, key, path(unq))
        elif key == "oracle":
            if unq not in ("on", "off"):
                raise ConfigError("oracle takes on|off")
            cfg.oracle = unq == "on"
        elif key == "stop":
            cfg.stop = tuple(_int(a.strip(), key) for a in unq.split(",") if a.strip())
        elif key == "max-steps":
            cfg.max_steps = _int(unq, key)
        elif key == "widen-after":
            cfg.widen_after = _int(unq, key)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    if regions:
        try:
            cfg.memory_map = check_map(regions)
        except WcecError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


# ------------------------------------------------------------------ report types


@dataclass
class EdgeReport:
    dst: int | None
    kind: str
    energy: Fraction
    frequency: int


@dataclass
class BlockReport:
    addr: int
    context: str
    energy: Fraction          # per execution
    frequency: int
    total: Fraction           # energy * frequency + outgoing edge contributions
    edges: list = field(default_factory=list)


@dataclass
class RoutineReport:
    name: str
    addr: int
    energy: Fraction
    blocks: list


@dataclass
class LoopReport:
    header: int
    context: str
    min: int
    max: int
    provenance: str


@dataclass
class OracleReport:
    counters: dict
    model_energy: Fraction
    stop_reason: str
    steps: int
    delta: Fraction | None
    bounded: dict | None = None     # counters / model energy of the trigger-bounded run
    fault: str | None = None


@dataclass
class AnalysisReport:
    target: str
    entry: int
    entry_name: str
    total: Fraction | None
    unit: str
    status: str
    model: str
    routines: list
    loops: list
    warnings: list
    oracle: OracleReport | None = None
    static_counters: dict | None = None
    # pipeline artefacts for callers that need more than the report
    cfg: object = None
    ctx_cfg: object = None
    problem: object = None
    solution: object = None


def stage(name):
    """Tag upstream errors with the pipeline stage that raised them."""

    class _Stage:
        def __enter__(self):
            return self

        def __exit__(self, typ, exc, tb):
            if isinstance(exc, WcecError) and not hasattr(exc, "stage"):
                exc.stage = name
            return False

    return _Stage()


def _load(config):
    if config.image is not None:
        if not config.memory_map:
            return config.image
        return replace(config.image, memory_map=overlay_map(config.image.memory_map, config.memory_map))
    mm = overlay_map(DEFAULT_MAP, config.memory_map) if config.memory_map else DEFAULT_MAP
    try:
        with open(config.binary, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read binary: {exc}") from None
    if config.raw:
        return load_raw(data, config.base, config.entry, mm)
    entry = config.entry if isinstance(config.entry, int) else None
    return load_elf(data, mm, entry)


def _annotations(config, image):
    text = config.annotation_text
    if text is None and config.annotations:
        try:
            with open(config.annotations, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read annotations: {exc}") from None
    ann = parse_annotations(text) if text else AnnotationSet()
    if isinstance(config.entry, str):
        ann.entry = config.entry
    elif isinstance(config.entry, int):
        ann.entry = config.entry
    return ann.resolve(image)


def _oracle(image, entry, config, model):
    full = sim.run(image, entry, (), config.max_steps)
    bounded = None
    if config.stop:
        b = sim.run(image, entry, config.stop, config.max_steps)
        bounded = {"counters": dict(b.counters), "model_energy": sim.model_result(b, model),
                   "stop_reason": b.stop_reason}
    return full, bounded


def analyze(config):
    """Run the full pipeline; returns an :class:`AnalysisReport`."""
    config.validate()
    warnings = []

    def warn(code, msg):
        if (code, msg) not in warnings:
            warnings.append((code, msg))

    with stage("config"):
        try:
            model = resolve_model(config.model)
        except WcecError as exc:
            raise ConfigError(str(exc)) from None
        if model.mode != "static":
            raise ConfigError(f"model {model.name} is replay-only and cannot drive static analysis")
    with stage("load"):
        image = _load(config)
    with stage("annotations"):
        ann = _annotations(config, image)
    entry = ann.entry if ann.entry is not None else image.entry
    with stage("cfg"):
        cfg = reconstruct(image, entry, ann)
        ctx = expand_contexts(cfg, config.contexts, config.loop_contexts, ann)
    for code, msg in cfg.warnings:
        warn(code, msg)
    with stage("value-analysis"):
        vr = value_analyze(ctx, image, ann, config.widen_after)
    for code, msg in vr.warnings:
        warn(code, msg)

    full = bounded = None
    if config.oracle:
        with stage("simulator"):
            full, bounded = _oracle(image, entry, config, model)
        if full.fault is not None:
            warn(W_ORACLE, f"simulation stopped: {full.fault}")
        elif full.stop_reason != sim.HIT_STOP:
            warn(W_ORACLE, f"simulation hit the step cap ({config.max_steps})")

    bounds = {}
    loops = []
    trace_facts = None
    for li in ctx.loop_instances:
        label = _instance_label(li.key)
        if li.header in ann.loop_bounds:
            lo, hi = ann.loop_bounds[li.header]
            prov = "annotation"
        elif li.key in vr.instance_bounds:
            b = vr.instance_bounds[li.key]
            lo, hi, prov = b.min, b.max, "analysis"
        elif full is not None and full.fault is None:
            if trace_facts is None:
                with stage("simulator"):
                    trace_facts = sim.derive_flow_facts(full, cfg)
            lo, hi = trace_facts.loop_bounds[li.header]
            prov = "trace"
            warn(W_TRACE_BOUND, f"loop {li.header:#010x} bounded by the simulation trace only "
                                f"(0..{hi}); the estimate may miss the worst case")
        else:
            err = UnboundedLoop(li.header)
            err.stage = "value-analysis"
            raise err
        bounds[li.key] = (lo, hi)
        loops.append(LoopReport(li.header, label, lo, hi, prov))

    with stage("events"):
        ncost, ecost = node_costs(ctx, vr, model)
    with stage("ipet"):
        problem = ipet.build(ctx, ncost, ecost, bounds, ann.flow, vr.infeasible_nodes,
                             vr.infeasible_edges, sorted(ann.infeasible))
    status = "Optimal"
    try:
        with stage("ipet"):
            sol = ipet.solve(problem, config.budget)
    except SolverBudgetExceeded as exc:
        warn(W_RELAXATION, f"solver budget of {config.budget:g}s exceeded; reporting the LP relaxation "
                           "bound, not an integer worst-case path")
        sol = None
        status = "RelaxationBound"
        relax = exc.relaxation_bound
    if sol is not None and sol.status != "Optimal":
        err = SolverError(f"path analysis is {sol.status.lower()}")
        err.stage = "ipet"
        raise err

    if sol is not None:
        total = sol.objective
        routines, static = _breakdown(cfg, ctx, ncost, ecost, sol, model)
    else:
        total = relax               # None when the budget ran out before the root LP
        routines, static = [], None

    oracle = None
    if full is not None:
        me = sim.model_result(full, model)
        delta = None
        if full.fault is None and full.stop_reason == sim.HIT_STOP and me != 0 and sol is not None:
            delta = (total - me) / me * 100
        oracle = OracleReport(dict(full.counters), me, full.stop_reason, full.steps, delta, bounded,
                              None if full.fault is None else str(full.fault))

    rep = AnalysisReport(model.target or "armv6-m", entry, cfg.routines[cfg.entry].name, total,
                         model.unit, status, model.name, routines, loops, warnings, oracle, static,
                         cfg, ctx, problem, sol)
    return rep


def _instance_label(key):
    _routine, _header, callstring, outer = key
    parts = []
    if callstring:
        parts.append("<" + ",".join(f"{a:x}" for a in callstring) + ">")
    parts += [f"{h:x}:{p}" for h, p in outer if p]
    return " ".join(parts) or "-"


def _breakdown(cfg, ctx, ncost, ecost, sol, model):
    static = {c: 0 for c in CM0_COUNTERS}
    per_node = {}
    for nd in ctx.nodes:
        f = sol.node_freq[nd.id]
        for c, v in ncost[nd.id].events.items():
            static[c] = static.get(c, 0) + v * f
        per_node[nd.id] = BlockReport(cfg.blocks[nd.block].start, nd.context.label(),
                                      ncost[nd.id].energy, f, ncost[nd.id].energy * f)
    for e in ctx.edges:
        f = sol.edge_freq[e.id]
        for c, v in ecost[e.id].events.items():
            static[c] = static.get(c, 0) + v * f
        if e.src is None:
            continue
        br = per_node[e.src]
        contrib = ecost[e.id].energy * f
        br.total += contrib
        if ecost[e.id].energy and f:
            dst = None if e.dst is None else cfg.blocks[ctx.nodes[e.dst].block].start
            br.edges.append(EdgeReport(dst, e.kind.value, ecost[e.id].energy, f))
    routines = []
    for rid in sorted(cfg.routines):
        r = cfg.routines[rid]
        nodes = [nd for nd in ctx.nodes if nd.routine == rid and not cfg.blocks[nd.block].virtual]
        virt = [nd for nd in ctx.nodes if nd.routine == rid and cfg.blocks[nd.block].virtual]
        blocks = sorted((per_node[nd.id] for nd in nodes), key=lambda b: (b.addr, b.context))
        # tail-call stubs have no instructions but may own priced edges
        energy = sum((per_node[nd.id].total for nd in nodes + virt), Fraction(0))
        routines.append(RoutineReport(r.name, r.entry, energy, blocks))
    return routines, static


# ------------------------------------------------------------------ output


def _q(x):
    return format_quantity(x)


def format_delta(delta):
    """Integer percent, or ``<1`` inside the one-percent band."""
    if delta is None:
        return ""
    if abs(delta) < 1:
        return "<1"
    return str(round(delta))


def _total(report):
    return "unavailable" if report.total is None else _q(report.total)


def report_xml(report):
    root = ET.Element("analysis", {"target": report.target, "tool-version": __version__})
    prog = ET.SubElement(root, "program", {"entry": f"{report.entry:#010x}", "wcec": _total(report),
                                            "unit": report.unit, "status": report.status,
                                            "model": report.model})
    for r in report.routines:
        re_ = ET.SubElement(prog, "routine", {"name": r.name, "addr": f"{r.addr:#010x}",
                                               "energy": _q(r.energy)})
        for b in r.blocks:
            be = ET.SubElement(re_, "block", {"addr": f"{b.addr:#010x}", "context": b.context,
                                              "energy": _q(b.energy), "frequency": str(b.frequency),
                                              "total": _q(b.total)})
            for e in b.edges:
                ET.SubElement(be, "edge", {"to": "exit" if e.dst is None else f"{e.dst:#010x}",
                                           "kind": e.kind, "energy": _q(e.energy),
                                           "frequency": str(e.frequency)})
    lb = ET.SubElement(prog, "loopbounds")
    for lp in report.loops:
        ET.SubElement(lb, "loop", {"header": f"{lp.header:#010x}", "context": lp.context,
                                   "min": str(lp.min), "max": str(lp.max), "provenance": lp.provenance})
    ws = ET.SubElement(prog, "warnings")
    for code, msg in report.warnings:
        w = ET.SubElement(ws, "warning", {"code": code})
        w.text = msg
    if report.oracle is not None:
        o = report.oracle
        attrs = {c.lower().replace("_", "-"): str(o.counters[c]) for c in CM0_COUNTERS}
        attrs.update({"model-energy": _q(o.model_energy), "stop": o.stop_reason, "steps": str(o.steps)})
        if o.delta is not None:
            attrs["delta-percent"] = format_delta(o.delta)
        oe = ET.SubElement(prog, "oracle", attrs)
        if o.fault:
            oe.set("fault", o.fault)
        if o.bounded is not None:
            battrs = {c.lower().replace("_", "-"): str(o.bounded["counters"][c]) for c in CM0_COUNTERS}
            battrs["model-energy"] = _q(o.bounded["model_energy"])
            battrs["stop"] = o.bounded["stop_reason"]
            ET.SubElement(oe, "bounded", battrs)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def emit_report_xml(report, path):
    text = report_xml(report)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return text


def _dot_id(s):
    # labels carry DOT's own \n escapes, so only quotes are escaped
    return '"' + s.replace('"', '\\"') + '"'


def dot_graphs(report, ctx=None):
    """routine name -> DOT text, one digraph per routine."""
    ctx = ctx or report.ctx_cfg
    cfg = ctx.cfg
    sol = report.solution
    ncost_by = {}
    for r in report.routines:
        for b in r.blocks:
            ncost_by[(b.addr, b.context)] = b
    out = {}
    for rid in sorted(cfg.routines):
        r = cfg.routines[rid]
        lines = [f"digraph {_dot_id(r.name)} {{", "  node [shape=box, fontname=monospace];"]
        ids = {}
        for nd in ctx.nodes:
            if nd.routine != rid:
                continue
            blk = cfg.blocks[nd.block]
            name = f"n{nd.id}"
            ids[nd.id] = name
            br = ncost_by.get((blk.start, nd.context.label()))
            freq = sol.node_freq[nd.id] if sol is not None else 0
            energy = _q(br.energy) if br is not None else "0"
            kind = "stub" if blk.virtual else ""
            label = f"{blk.start:#010x} {kind}\\n{nd.context.label()}\\nE={energy} {report.unit}\\nf={freq}"
            style = ", style=dashed, color=gray, fontcolor=gray" if freq == 0 else ""
            lines.append(f"  {name} [label={_dot_id(label)}{style}];")
        for e in ctx.edges:
            if e.src in ids and e.dst in ids and e.kind in (EdgeKind.FALLTHROUGH, EdgeKind.TAKEN):
                f = sol.edge_freq[e.id] if sol is not None else 0
                style = ", style=dashed, color=gray" if f == 0 else ""
                lines.append(f"  {ids[e.src]} -> {ids[e.dst]} [label={_dot_id(str(f))}{style}];")
        lines.append("}")
        out[r.name] = "\n".join(lines) + "\n"
    return out


def emit_dot(report, cfg_or_ctx, path):
    """Write one ``<routine>.dot`` per routine into directory ``path``."""
    ctx = cfg_or_ctx if hasattr(cfg_or_ctx, "nodes") else report.ctx_cfg
    os.makedirs(path, exist_ok=True)
    graphs = dot_graphs(report, ctx)
    for name, text in graphs.items():
        safe = re.sub(r"[^\w.-]", "_", name)
        with open(os.path.join(path, f"{safe}.dot"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return graphs


def summary_text(report):
    est = "unavailable" if report.total is None else f"{_q(report.total)} {report.unit}"
    lines = [f"WCEC estimate: {est} ({report.status}, model {report.model})"]
    for r in report.routines:
        lines.append(f"  {r.name:<24} {_q(r.energy)} {report.unit}")
    for lp in report.loops:
        lines.append(f"  loop {lp.header:#010x} [{lp.context}] {lp.min}..{lp.max} ({lp.provenance})")
    if report.oracle is not None:
        o = report.oracle
        d = format_delta(o.delta)
        lines.append(f"  oracle: model result {_q(o.model_energy)} {report.unit}, stop {o.stop_reason}"
                     + (f", delta {d}%" if d else ""))
    for code, msg in report.warnings:
        lines.append(f"warning {code}: {msg}")
    return "\n".join(lines) + "\n"


def replay_cli(model_name, trace_text):
    """Per-row and total energies as printable lines."""
    try:
        model = resolve_model(model_name)
    except WcecError as exc:
        raise ConfigError(str(exc)) from None
    trace = read_trace(trace_text)
    res = replay(model, trace)
    lines = [f"{label}\t{_q(e)} {res.unit}" for label, e in res.rows]
    lines.append(f"total\t{_q(res.total)} {res.unit}")
    return "\n".join(lines) + "\n", res
