"""Energy models as data: built-ins, model files, counter traces and replay."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ModelError

# Cortex-M0 counters, in the order the published model lists them.
INSTR_NOMUL = "INSTR_NOMUL"
RAM_READ = "RAM_READ"
RAM_WRITE = "RAM_WRITE"
FLASH_READ = "FLASH_READ"
TAKEN_BRANCH = "TAKEN_BRANCH"
MUL = "MUL"

CM0_COUNTERS = (INSTR_NOMUL, RAM_READ, RAM_WRITE, FLASH_READ, TAKEN_BRANCH, MUL)
CM0_LABELS = {
    INSTR_NOMUL: "executed instructions without multiplications",
    RAM_READ: "RAM data reads",
    RAM_WRITE: "RAM writes",
    FLASH_READ: "Flash data reads",
    TAKEN_BRANCH: "taken branches",
    MUL: "multiplication instructions",
}
# counters the ARMv6-M frontend can predict statically
STATIC_COUNTERS = frozenset(CM0_COUNTERS)

# LEON3 statistics-unit counters (id -> table index)
LEON3_COUNTERS = {
    "TIME": 0, "ICMISS": 1, "ICHOLD": 2, "DCMISS": 3, "DCHOLD": 4, "WBHOLD": 5, "IINST": 7,
    "BRANCH": 11, "CALL": 12, "TYPE2": 13, "LDST": 14, "LOAD": 15, "STORE": 16,
}
LEON3_ISACACHE = ("ICMISS", "DCMISS", "IINST", "BRANCH", "CALL", "TYPE2", "LDST", "LOAD", "STORE")


class EventVector(dict):
    """Counter id -> non-negative integer count."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        for k, v in self.items():
            if v < 0:
                raise ValueError(f"negative count for {k}")

    def __add__(self, other):
        out = EventVector(self)
        for k, v in other.items():
            out[k] = out.get(k, 0) + v
        return out

    def scaled(self, n):
        return EventVector({k: v * n for k, v in self.items()})

    @staticmethod
    def zero(counters=CM0_COUNTERS):
        return EventVector({c: 0 for c in counters})


@dataclass(frozen=True)
class EnergyModel:
    name: str
    unit: str
    counters: tuple
    coefficients: dict
    intercept: Fraction = Fraction(0)
    labels: dict = field(default_factory=dict)
    target: str = ""
    mode: str = "static"          # "static" or "replay"
    train_mape: float | None = None
    test_mape: float | None = None

    def __post_init__(self):
        if self.unit not in ("nJ", "J"):
            raise ModelError(f"model {self.name}: unit must be nJ or J, got {self.unit!r}")
        if self.mode not in ("static", "replay"):
            raise ModelError(f"model {self.name}: mode must be static or replay")
        if set(self.coefficients) != set(self.counters):
            raise ModelError(f"model {self.name}: coefficients do not match the counter list")
        for c, b in self.coefficients.items():
            if b < 0:
                raise ModelError(f"model {self.name}: negative coefficient for {c}")
        if self.intercept < 0:
            raise ModelError(f"model {self.name}: negative intercept")
        if self.mode == "static":
            if self.intercept != 0:
                raise ModelError(f"model {self.name}: static models must have a zero intercept")
            extra = [c for c in self.counters if c not in STATIC_COUNTERS]
            if extra:
                raise ModelError(f"model {self.name}: counters {', '.join(extra)} are not statically predictable")

    @property
    def static_capable(self):
        return self.mode == "static"

    def beta(self, counter):
        return self.coefficients[counter]


def _q(text):
    """Exact rational from a decimal string."""
    return Fraction(str(text))


def _model(name, unit, terms, alpha="0", mode="replay", target="", labels=None, mape=(None, None)):
    counters = tuple(c for c, _ in terms)
    return EnergyModel(name, unit, counters, {c: _q(b) for c, b in terms}, _q(alpha),
                       labels or {}, target, mode, *mape)


def _leon3_labels(counters):
    return {c: f"C{LEON3_COUNTERS[c]} {c}" for c in counters}


def _leon3(name, alpha, terms, mape):
    counters = [c for c, _ in terms]
    return _model(name, "J", terms, alpha, "replay", "LEON3 (GR712RC)", _leon3_labels(counters), mape)


def builtin_models():
    cm0 = _model("cortex-m0.v1", "nJ", [
        (INSTR_NOMUL, "0.972565030"),
        (RAM_READ, "0.652871770"),
        (RAM_WRITE, "1.031341343"),
        (FLASH_READ, "1.037625441"),
        (TAKEN_BRANCH, "1.354953706"),
        (MUL, "2.274650563"),
    ], "0", "static", "ARM Cortex-M0 (STM32F0)", dict(CM0_LABELS), (2.8, 2.8))
    isa_best = [("IINST", "3.93365e-08"), ("STORE", "1.87111e-07")]
    return [
        cm0,
        _leon3("leon3.all.allevents", "0.155261",
               [("TIME", "2.94155e-08"), ("ICHOLD", "2.5661e-09"), ("WBHOLD", "9.93453e-09"),
                ("CALL", "8.97535e-10"), ("TYPE2", "3.21255e-09"), ("LOAD", "6.14384e-09"),
                ("STORE", "4.54827e-08")], (1.14, 0.29)),
        _leon3("leon3.all.bottomup", "0", [("TIME", "3.19557e-08"), ("STORE", "5.79224e-08")], (1.20, 1.38)),
        _leon3("leon3.all.topdown", "0.131077",
               [("TIME", "3.13122e-08"), ("WBHOLD", "9.17778e-09"), ("LOAD", "2.99043e-09"),
                ("STORE", "3.92999e-08")], (1.02, 1.54)),
        _leon3("leon3.all.exhaustive", "0.131087",
               [("TIME", "3.13122e-08"), ("WBHOLD", "9.17779e-09"), ("LDST", "2.99043e-09"),
                ("STORE", "3.63095e-08")], (1.02, 1.54)),
        _leon3("leon3.isacache.allevents", "0",
               [("DCMISS", "1.18567e-06"), ("CALL", "5.9072e-07"), ("TYPE2", "3.88949e-08"),
                ("LDST", "8.03337e-08"), ("STORE", "6.89885e-08")], (8.38, 24.03)),
        _leon3("leon3.isacache.bottomup", "0", isa_best, (5.84, 8.24)),
        _leon3("leon3.isacache.topdown", "0", isa_best, (5.84, 8.24)),
        _leon3("leon3.isacache.exhaustive", "0", isa_best, (5.84, 8.24)),
    ]


def get_model(name):
    for m in builtin_models():
        if m.name == name:
            return m
    raise ModelError(f"no such model: {name!r}")


def resolve_model(name_or_path):
    """A built-in name or a path to a model file."""
    import os

    try:
        return get_model(name_or_path)
    except ModelError:
        if os.path.exists(name_or_path):
            with open(name_or_path, encoding="utf-8") as fh:
                return parse_model(fh.read())
        raise


# ------------------------------------------------------------------ pricing


def price(events, model, intercept=True):
    """Exact Σ βx·Cx (+ α) in model units."""
    total = Fraction(0)
    for c, n in events.items():
        if c not in model.coefficients:
            raise ModelError(f"counter {c!r} is not part of model {model.name}")
        if n:
            total += model.coefficients[c] * n
    if intercept:
        total += model.intercept
    return total


# ------------------------------------------------------------------ model files


def parse_model(text):
    fields = {}
    terms = []
    labels = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("counter"):
            parts = line.split()
            if len(parts) < 3:
                raise ModelError(f"line {lineno}: expected 'counter <id> [label] <beta>'")
            cid, beta = parts[1], parts[-1]
            label = " ".join(parts[2:-1]).strip('"')
            try:
                terms.append((cid, _q(beta)))
            except ValueError:
                raise ModelError(f"line {lineno}: bad coefficient {beta!r}") from None
            if label:
                labels[cid] = label
            continue
        if "=" not in line:
            raise ModelError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in ("name", "unit", "mode", "alpha", "target"):
            raise ModelError(f"line {lineno}: unknown key {key!r}")
        fields[key] = value
    for key in ("name", "unit"):
        if key not in fields:
            raise ModelError(f"model file lacks '{key}='")
    if not terms:
        raise ModelError("model file declares no counters")
    if len({c for c, _ in terms}) != len(terms):
        raise ModelError("duplicate counter in model file")
    try:
        alpha = _q(fields.get("alpha", "0"))
    except ValueError:
        raise ModelError(f"bad alpha {fields['alpha']!r}") from None
    return EnergyModel(fields["name"], fields["unit"], tuple(c for c, _ in terms), dict(terms), alpha,
                       labels, fields.get("target", ""), fields.get("mode", "static"))


def _dec(q, exact=False):
    """Decimal rendering of a rational; exact when the expansion terminates.

    With ``exact`` a non-terminating value is written as ``p/q`` instead.
    """
    q = Fraction(q)
    d = q.denominator
    twos = fives = 0
    while d % 2 == 0:
        d //= 2
        twos += 1
    while d % 5 == 0:
        d //= 5
        fives += 1
    if d != 1 and exact:
        return f"{q.numerator}/{q.denominator}"
    if d != 1:
        from decimal import Context

        ctx = Context(prec=40)
        return format(ctx.divide(ctx.create_decimal(q.numerator), ctx.create_decimal(q.denominator)), "f")
    places = max(twos, fives)
    scaled = q * 10 ** places
    sign = "-" if scaled < 0 else ""
    digits = str(abs(scaled.numerator)).rjust(places + 1, "0")
    if places == 0:
        return sign + digits
    out = f"{sign}{digits[:-places]}.{digits[-places:]}".rstrip("0").rstrip(".")
    return out


def format_quantity(q):
    return _dec(q)


def dump_model(model):
    lines = [f"name={model.name}", f"unit={model.unit}", f"mode={model.mode}", f"alpha={_dec(model.intercept, True)}"]
    if model.target:
        lines.append(f"target={model.target}")
    for c in model.counters:
        label = model.labels.get(c, "")
        label = f' "{label}"' if label else ""
        lines.append(f"counter {c}{label} {_dec(model.coefficients[c], True)}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ traces


@dataclass
class CounterTrace:
    counters: tuple
    rows: list                       # (label, EventVector-like dict of Fractions)
    energies: list | None = None     # measured energy per row, or None

    def __post_init__(self):
        for label, vec in self.rows:
            if set(vec) != set(self.counters):
                raise ModelError(f"row {label!r} does not match the trace counter set")
        if self.energies is not None and len(self.energies) != len(self.rows):
            raise ModelError("energy column length differs from the row count")

    def __len__(self):
        return len(self.rows)

    def subset(self, idx):
        rows = [self.rows[i] for i in idx]
        en = None if self.energies is None else [self.energies[i] for i in idx]
        return CounterTrace(self.counters, rows, en)

    def concat(self, other):
        if tuple(other.counters) != tuple(self.counters):
            raise ModelError("cannot concatenate traces with different counters")
        en = None
        if self.energies is not None and other.energies is not None:
            en = list(self.energies) + list(other.energies)
        return CounterTrace(self.counters, list(self.rows) + list(other.rows), en)

    def matrix(self, counters):
        import numpy as np

        return np.array([[float(vec[c]) for c in counters] for _, vec in self.rows], dtype=float).reshape(
            len(self.rows), len(counters))


def _num(text, where):
    try:
        return Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise ModelError(f"{where}: not a number: {text!r}") from None


def read_trace(text):
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        return CounterTrace((), [], None)
    if len(set(header)) != len(header):
        raise ModelError("duplicate column in trace header")
    has_energy = "energy" in header
    has_label = "label" in header
    counters = tuple(h for h in header if h not in ("energy", "label"))
    rows, energies = [], []
    for lineno, rec in enumerate(reader, 2):
        if not rec or all(not x.strip() for x in rec):
            continue
        if len(rec) != len(header):
            raise ModelError(f"trace line {lineno}: expected {len(header)} fields, got {len(rec)}")
        data = dict(zip(header, rec))
        vec = {c: _num(data[c], f"trace line {lineno}, column {c}") for c in counters}
        for c, v in vec.items():
            if v < 0:
                raise ModelError(f"trace line {lineno}: negative count in column {c}")
        label = data["label"].strip() if has_label else f"row{len(rows) + 1}"
        rows.append((label, vec))
        if has_energy:
            energies.append(_num(data["energy"], f"trace line {lineno}, column energy"))
    return CounterTrace(counters, rows, energies if has_energy else None)


def write_trace(trace):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    header = ["label", *trace.counters] + (["energy"] if trace.energies is not None else [])
    w.writerow(header)
    for i, (label, vec) in enumerate(trace.rows):
        row = [label, *(_dec(vec[c], True) for c in trace.counters)]
        if trace.energies is not None:
            row.append(_dec(trace.energies[i], True))
        w.writerow(row)
    return out.getvalue()


@dataclass
class ReplayResult:
    rows: list        # (label, energy)
    total: Fraction
    unit: str


def replay(model, trace):
    missing = [c for c in model.counters if c not in trace.counters]
    if missing and trace.rows:
        raise ModelError(f"trace lacks counter column(s) required by {model.name}: {', '.join(missing)}")
    rows = []
    total = Fraction(0)
    for label, vec in trace.rows:
        e = price({c: vec[c] for c in model.counters}, model)
        rows.append((label, e))
        total += e
    if not trace.rows:
        # an empty trace evaluates the model once on the zero vector
        total = model.intercept
    return ReplayResult(rows, total, model.unit)
