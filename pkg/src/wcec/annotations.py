"""Parser for the textual annotation language.

Statements end with ``;``; ``#`` and ``//`` start comments::

    entry main;
    loop 0x8000130 bound 1..10;
    target 0x8000200 = 0x8000300, 0x8000340;
    infeasible 0x8000250;
    flow sum(block 0x80001a0) <= 3 * sum(block 0x8000180);
    region 0x8000144 = ram;
    recursion fact depth 8;
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .errors import AnnotationError
from .loader import RegionKind


@dataclass(frozen=True)
class Term:
    """``coef * sum(kind a [-> b])``; kind ``const`` carries only ``coef``."""

    coef: Fraction
    kind: str
    a: object = None
    b: object = None


@dataclass(frozen=True)
class FlowConstraint:
    lhs: tuple
    sense: str
    rhs: tuple
    line: int = 0

    def normalized(self):
        """Move everything left: returns (terms, sense, constant) with ``Σ terms sense constant``."""
        terms = []
        const = Fraction(0)
        for t in self.lhs:
            if t.kind == "const":
                const -= t.coef
            else:
                terms.append(t)
        for t in self.rhs:
            if t.kind == "const":
                const += t.coef
            else:
                terms.append(replace(t, coef=-t.coef))
        return terms, self.sense, const


@dataclass
class AnnotationSet:
    entry: object = None
    loop_bounds: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)
    flow: list = field(default_factory=list)
    infeasible: set = field(default_factory=set)
    regions: dict = field(default_factory=dict)
    recursion: dict = field(default_factory=dict)
    source: str = "annotation"

    def is_empty(self):
        return not (self.entry is not None or self.loop_bounds or self.targets or self.flow
                    or self.infeasible or self.regions or self.recursion)

    def resolve(self, image):
        """Replace symbol references by addresses from the image symbol table."""

        def ref(x):
            if isinstance(x, int):
                return x
            addr = image.symbol(x)
            if addr is None:
                raise AnnotationError(f"unknown symbol {x!r}")
            return addr

        def term(t):
            if t.kind == "const":
                return t
            return replace(t, a=ref(t.a), b=None if t.b is None else ref(t.b))

        return AnnotationSet(
            entry=None if self.entry is None else ref(self.entry),
            loop_bounds={ref(k): v for k, v in self.loop_bounds.items()},
            targets={ref(k): tuple(ref(x) for x in v) for k, v in self.targets.items()},
            flow=[replace(c, lhs=tuple(map(term, c.lhs)), rhs=tuple(map(term, c.rhs))) for c in self.flow],
            infeasible={ref(x) for x in self.infeasible},
            regions={ref(k): v for k, v in self.regions.items()},
            recursion={ref(k): v for k, v in self.recursion.items()},
            source=self.source,
        )

    def merged(self, other):
        out = AnnotationSet(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        out.loop_bounds = {**other.loop_bounds, **self.loop_bounds}
        out.targets = {**other.targets, **self.targets}
        out.flow = list(self.flow) + list(other.flow)
        out.infeasible = set(self.infeasible) | set(other.infeasible)
        out.regions = {**other.regions, **self.regions}
        out.recursion = {**other.recursion, **self.recursion}
        if out.entry is None:
            out.entry = other.entry
        return out

    def to_text(self):
        lines = []
        fmt = lambda x: f"{x:#x}" if isinstance(x, int) else x  # noqa: E731
        if self.entry is not None:
            lines.append(f"entry {fmt(self.entry)};")
        for k, (lo, hi) in sorted(self.loop_bounds.items(), key=lambda kv: str(kv[0])):
            lines.append(f"loop {fmt(k)} bound {lo}..{hi};")
        for k, v in sorted(self.targets.items(), key=lambda kv: str(kv[0])):
            lines.append(f"target {fmt(k)} = {', '.join(fmt(x) for x in v)};")
        for x in sorted(self.infeasible, key=str):
            lines.append(f"infeasible {fmt(x)};")
        for k, v in sorted(self.regions.items(), key=lambda kv: str(kv[0])):
            lines.append(f"region {fmt(k)} = {v.value.lower()};")
        for k, v in sorted(self.recursion.items(), key=lambda kv: str(kv[0])):
            lines.append(f"recursion {fmt(k)} depth {v};")
        for c in self.flow:
            lines.append(f"flow {_expr_text(c.lhs)} {c.sense} {_expr_text(c.rhs)};")
        return "\n".join(lines) + ("\n" if lines else "")


def _expr_text(terms):
    fmt = lambda x: f"{x:#x}" if isinstance(x, int) else x  # noqa: E731
    out = ""
    for i, t in enumerate(terms):
        mag = abs(t.coef)
        if t.kind == "const":
            body = str(mag)
        else:
            inner = f"block {fmt(t.a)}" if t.kind == "block" else f"edge {fmt(t.a)} -> {fmt(t.b)}"
            body = f"{mag} * sum({inner})" if mag != 1 else f"sum({inner})"
        if i == 0:
            out = f"-{body}" if t.coef < 0 else body
        else:
            out += f" {'-' if t.coef < 0 else '+'} {body}"
    return out or "0"


_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>(?:\#|//)[^\n]*)
  | (?P<range>\.\.)
  | (?P<arrow>->)
  | (?P<op><=|>=|=|\*|\+|-|\(|\)|,|;)
  | (?P<num>0[xX][0-9a-fA-F]+|\d+(?:/\d+|\.\d+)?)
  | (?P<name>[A-Za-z_.$][\w.$]*)
  | (?P<bad>.)
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text):
    line, line_start = 1, 0
    out = []
    for m in _TOKEN.finditer(text):
        kind = m.lastgroup
        col = m.start() - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
            continue
        if kind in ("ws", "comment"):
            continue
        if kind == "bad":
            raise AnnotationError(f"unexpected character {m.group()!r}", line, col)
        out.append(_Tok(kind, m.group(), line, col))
    return out


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def err(self, msg, tok=None):
        tok = tok or self.peek() or (self.toks[-1] if self.toks else None)
        if tok is None:
            return AnnotationError(msg, 1, 1)
        return AnnotationError(msg, tok.line, tok.col)

    def next(self, what="token"):
        tok = self.peek()
        if tok is None:
            raise self.err(f"unexpected end of input, expected {what}")
        self.i += 1
        return tok

    def expect(self, text):
        tok = self.next(repr(text))
        if tok.text != text:
            raise self.err(f"expected {text!r}, got {tok.text!r}", tok)
        return tok

    def ref(self):
        tok = self.next("address or symbol")
        if tok.kind == "num" and tok.text.lower().startswith("0x"):
            return int(tok.text, 16)
        if tok.kind == "name":
            return tok.text
        raise self.err(f"expected hex address or symbol, got {tok.text!r}", tok)

    def integer(self):
        tok = self.next("integer")
        if tok.kind != "num" or "/" in tok.text or "." in tok.text:
            raise self.err(f"expected integer, got {tok.text!r}", tok)
        return int(tok.text, 0)

    def number(self):
        tok = self.next("number")
        if tok.kind != "num":
            raise self.err(f"expected number, got {tok.text!r}", tok)
        if tok.text.lower().startswith("0x"):
            return Fraction(int(tok.text, 16))
        try:
            return Fraction(tok.text)
        except (ValueError, ZeroDivisionError):
            raise self.err(f"bad number {tok.text!r}", tok) from None

    def parse(self):
        ann = AnnotationSet()
        while self.peek() is not None:
            kw = self.next()
            if kw.kind != "name":
                raise self.err(f"expected statement keyword, got {kw.text!r}", kw)
            handler = getattr(self, f"_stmt_{kw.text}", None)
            if handler is None:
                raise self.err(f"unknown statement {kw.text!r}", kw)
            handler(ann, kw)
            self.expect(";")
        return ann

    def _stmt_entry(self, ann, kw):
        if ann.entry is not None:
            raise self.err("duplicate entry statement", kw)
        ann.entry = self.ref()

    def _stmt_loop(self, ann, kw):
        head = self.ref()
        self.expect("bound")
        lo = self.integer()
        self.expect("..")
        hi = self.integer()
        if lo > hi:
            raise self.err(f"loop bound min {lo} exceeds max {hi}", kw)
        if head in ann.loop_bounds:
            raise self.err(f"duplicate bound for loop {head if isinstance(head, str) else hex(head)}", kw)
        ann.loop_bounds[head] = (lo, hi)

    def _stmt_target(self, ann, kw):
        site = self.ref()
        self.expect("=")
        targets = [self.ref()]
        while self.peek() is not None and self.peek().text == ",":
            self.next()
            targets.append(self.ref())
        if site in ann.targets:
            raise self.err("duplicate target statement", kw)
        ann.targets[site] = tuple(targets)

    def _stmt_infeasible(self, ann, kw):
        ann.infeasible.add(self.ref())

    def _stmt_region(self, ann, kw):
        site = self.ref()
        self.expect("=")
        tok = self.next("flash or ram")
        kinds = {"flash": RegionKind.FLASH, "ram": RegionKind.RAM}
        if tok.text.lower() not in kinds:
            raise self.err(f"region must be flash or ram, got {tok.text!r}", tok)
        ann.regions[site] = kinds[tok.text.lower()]

    def _stmt_recursion(self, ann, kw):
        routine = self.ref()
        self.expect("depth")
        ann.recursion[routine] = self.integer()

    def _stmt_flow(self, ann, kw):
        lhs = self.expr()
        tok = self.next("comparison")
        if tok.text not in ("<=", ">=", "="):
            raise self.err(f"expected <=, >= or =, got {tok.text!r}", tok)
        rhs = self.expr()
        ann.flow.append(FlowConstraint(tuple(lhs), tok.text, tuple(rhs), kw.line))

    def expr(self):
        terms = []
        sign = 1
        if self.peek() is not None and self.peek().text == "-":
            self.next()
            sign = -1
        while True:
            terms.append(self.term(sign))
            tok = self.peek()
            if tok is not None and tok.text in "+-" and tok.kind == "op":
                self.next()
                sign = 1 if tok.text == "+" else -1
                continue
            return terms

    def term(self, sign):
        tok = self.peek()
        if tok is None:
            raise self.err("unexpected end of input in expression")
        coef = Fraction(sign)
        if tok.kind == "num":
            coef *= self.number()
            nxt = self.peek()
            if nxt is None or nxt.text != "*":
                return Term(coef, "const")
            self.next()
        name = self.next("sum(...)")
        if name.text != "sum":
            raise self.err(f"expected sum(...), got {name.text!r}", name)
        self.expect("(")
        what = self.next("block or edge")
        if what.text == "block":
            t = Term(coef, "block", self.ref())
        elif what.text == "edge":
            a = self.ref()
            self.expect("->")
            t = Term(coef, "edge", a, self.ref())
        else:
            raise self.err(f"expected block or edge, got {what.text!r}", what)
        self.expect(")")
        return t


def parse_annotations(text):
    return _Parser(text).parse()
