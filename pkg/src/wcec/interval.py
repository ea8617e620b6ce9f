"""Modular 32-bit interval domain.

An interval ``[lo, hi]`` denotes ``{x mod 2**32 : lo <= x <= hi}``.  Bounds live
in ``[-2**31, 2**32 - 1]`` so both the signed and the unsigned reading of a
register fit without splitting; the canonical form prefers non-negative bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

M32 = 1 << 32
MASK = M32 - 1
SMIN = -(1 << 31)
SMAX = (1 << 31) - 1


@dataclass(frozen=True)
class Interval:
    lo: int
    hi: int
    empty: bool = False

    # ------------------------------------------------------------ construction
    @staticmethod
    def top():
        return TOP

    @staticmethod
    def bottom():
        return BOTTOM

    @staticmethod
    def const(v):
        return make(v, v)

    @property
    def is_top(self):
        return not self.empty and self.hi - self.lo >= MASK

    @property
    def is_bottom(self):
        return self.empty

    @property
    def is_const(self):
        return not self.empty and self.lo == self.hi

    @property
    def width(self):
        return -1 if self.empty else self.hi - self.lo

    def value(self):
        return self.lo & MASK

    def __repr__(self):
        if self.empty:
            return "Interval(⊥)"
        if self.is_top:
            return "Interval(⊤)"
        return f"Interval({self.lo}, {self.hi})"

    def __contains__(self, x):
        if self.empty:
            return False
        x &= MASK
        return any(self.lo <= x + s <= self.hi for s in (-M32, 0, M32))

    # ------------------------------------------------------------ views
    def unsigned_pieces(self):
        """Disjoint non-wrapping pieces within ``[0, 2**32)``."""
        if self.empty:
            return []
        if self.is_top:
            return [(0, MASK)]
        if self.lo >= 0:
            if self.hi <= MASK:
                return [(self.lo, self.hi)]
            return [(self.lo, MASK), (0, self.hi - M32)]
        if self.hi < 0:
            return [(self.lo + M32, self.hi + M32)]
        return [(self.lo + M32, MASK), (0, self.hi)]

    def signed_pieces(self):
        out = []
        for lo, hi in self.unsigned_pieces():
            if hi <= SMAX:
                out.append((lo, hi))
            elif lo > SMAX:
                out.append((lo - M32, hi - M32))
            else:
                out.append((lo, SMAX))
                out.append((SMIN, hi - M32))
        return out

    def unsigned(self):
        ps = self.unsigned_pieces()
        return (min(p[0] for p in ps), max(p[1] for p in ps)) if ps else None

    def signed(self):
        ps = self.signed_pieces()
        return (min(p[0] for p in ps), max(p[1] for p in ps)) if ps else None

    # ------------------------------------------------------------ lattice
    def leq(self, other):
        """γ-containment."""
        if self.empty:
            return True
        if other.empty:
            return False
        if other.is_top:
            return True
        return any(other.lo <= self.lo + s and self.hi + s <= other.hi for s in (-M32, 0, M32))

    def join(self, other):
        if self.empty:
            return other
        if other.empty:
            return self
        if self.leq(other):
            return other
        if other.leq(self):
            return self
        best = None
        for s in (-M32, 0, M32):
            cand = make(min(self.lo, other.lo + s), max(self.hi, other.hi + s))
            key = (cand.width, cand.lo)
            if best is None or key < best[0]:
                best = (key, cand)
        return best[1]

    def meet_pieces(self, pieces, signed=False):
        """Intersect with a union of (lo, hi) ranges in the given view."""
        if self.empty:
            return self
        mine = self.signed_pieces() if signed else self.unsigned_pieces()
        out = BOTTOM
        for a, b in mine:
            for c, d in pieces:
                lo, hi = max(a, c), min(b, d)
                if lo <= hi:
                    out = out.join(make(lo, hi))
        return out

    def widen(self, new, thresholds=()):
        if self.empty:
            return new
        j = self.join(new)
        if j.leq(self):
            return self
        if j.is_top:
            return TOP
        shift = next((s for s in (-M32, 0, M32) if j.lo <= self.lo + s and self.hi + s <= j.hi), None)
        if shift is None:
            return TOP
        lo, hi = self.lo + shift, self.hi + shift
        if j.lo < lo:
            below = [t for t in thresholds if t <= j.lo]
            lo = max(below) if below else j.hi - MASK
        if j.hi > hi:
            above = [t for t in thresholds if t >= j.hi]
            hi = min(above) if above else lo + MASK
        return make(lo, hi)

    # ------------------------------------------------------------ arithmetic
    def add(self, other):
        if self.empty or other.empty:
            return BOTTOM
        return make(self.lo + other.lo, self.hi + other.hi)

    def sub(self, other):
        if self.empty or other.empty:
            return BOTTOM
        return make(self.lo - other.hi, self.hi - other.lo)

    def neg(self):
        if self.empty:
            return BOTTOM
        return make(-self.hi, -self.lo)

    def invert(self):
        if self.empty:
            return BOTTOM
        return make(-self.hi - 1, -self.lo - 1)

    def mul(self, other):
        if self.empty or other.empty:
            return BOTTOM
        if self.is_top or other.is_top:
            return TOP
        # products are exact over either reading; keep the narrower result
        best = TOP
        for a in (self.unsigned(), self.signed(), (self.lo, self.hi)):
            for b in (other.unsigned(), other.signed(), (other.lo, other.hi)):
                cands = [x * y for x in a for y in b]
                r = make(min(cands), max(cands))
                if r.width < best.width:
                    best = r
        return best

    def shl(self, k):
        if self.empty:
            return BOTTOM
        if k >= 32:
            return Interval.const(0)
        return self.mul(Interval.const(1 << k))

    def lshr(self, k):
        if self.empty:
            return BOTTOM
        if k >= 32:
            return Interval.const(0)
        lo, hi = self.unsigned()
        return make(lo >> k, hi >> k)

    def ashr(self, k):
        if self.empty:
            return BOTTOM
        k = min(k, 31)
        lo, hi = self.signed()
        return make(lo >> k, hi >> k)

    def bitand(self, other):
        if self.empty or other.empty:
            return BOTTOM
        if self.is_const and other.is_const:
            return Interval.const(self.value() & other.value())
        ua, ub = self.unsigned(), other.unsigned()
        return make(0, min(ua[1], ub[1]))

    def bitor(self, other, xor=False):
        if self.empty or other.empty:
            return BOTTOM
        if self.is_const and other.is_const:
            a, b = self.value(), other.value()
            return Interval.const(a ^ b if xor else a | b)
        ua, ub = self.unsigned(), other.unsigned()
        top = (1 << max(ua[1].bit_length(), ub[1].bit_length())) - 1
        return make(0 if xor else max(ua[0], ub[0]), top)

    def zext(self, bits):
        lim = (1 << bits) - 1
        u = self.unsigned()
        if u is None:
            return BOTTOM
        if u[1] <= lim:
            return make(*u)
        return make(0, lim)

    def sext(self, bits):
        lim = 1 << (bits - 1)
        s = self.signed()
        if s is None:
            return BOTTOM
        if -lim <= s[0] and s[1] < lim:
            return make(*s)
        return make(-lim, lim - 1)


def make(lo, hi):
    """Canonical interval for the integers ``lo..hi`` taken modulo 2**32."""
    if hi < lo:
        return BOTTOM
    if hi - lo >= MASK:
        return TOP
    shift = (lo // M32) * M32
    lo -= shift
    hi -= shift
    if hi > MASK and lo - M32 >= SMIN:
        return Interval(lo - M32, hi - M32)
    # a range wrapping past both seams keeps its unsigned rendering (hi may exceed 2**32 - 1)
    return Interval(lo, hi)


TOP = Interval(0, MASK)
BOTTOM = Interval(0, -1, True)
