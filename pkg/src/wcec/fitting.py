"""No-intercept non-negative least squares fitting and counter-subset search."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ModelError
from .models import STATIC_COUNTERS, EnergyModel, replay


def nnls(A, b, tol=None, max_iter=None):
    """Solve ``min ||A x - b||_2`` subject to ``x >= 0`` (Lawson-Hanson active set).

    Parameters
    ----------
    A : (m, n) array_like
    b : (m,) array_like
    tol : float, optional
        Dual-feasibility tolerance; defaults to a multiple of machine epsilon
        scaled by the size and norm of ``A``.

    Returns
    -------
    x : ndarray
        The solution.
    rnorm : float
        Residual norm ``||A x - b||``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    m, n = A.shape
    if b.shape[0] != m:
        raise ValueError("A and b have incompatible shapes")
    if tol is None:
        tol = 10 * np.finfo(float).eps * max(m, n) * max(np.linalg.norm(A, 1), 1.0) * max(np.abs(b).max(initial=0), 1.0)
    if max_iter is None:
        max_iter = 3 * n + 30
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = A.T @ (b - A @ x)
    outer = 0
    while not passive.all() and (w[~passive].max(initial=-np.inf) > tol):
        outer += 1
        if outer > max_iter:
            break
        cand = np.where(~passive, w, -np.inf)
        passive[int(np.argmax(cand))] = True
        while True:
            z = np.zeros(n)
            idx = np.flatnonzero(passive)
            z[idx] = np.linalg.lstsq(A[:, idx], b, rcond=None)[0]
            if (z[idx] > 0).all():
                break
            bad = idx[z[idx] <= 0]
            alpha = np.min(x[bad] / (x[bad] - z[bad]))
            x = x + alpha * (z - x)
            passive &= x > tol
            x[~passive] = 0.0
            if not passive.any():
                z = np.zeros(n)
                break
        x = z
        w = A.T @ (b - A @ x)
    x = np.maximum(x, 0.0)
    return x, float(np.linalg.norm(A @ x - b))


def _rational(v):
    return Fraction(repr(float(v))) if v > 0 else Fraction(0)


@dataclass
class FitResult:
    model: EnergyModel
    beta: np.ndarray
    intercept: float
    residual: float
    train_mape: float


def fit_nnls(trace, counters, with_intercept=False, name="fitted", unit="nJ", target=""):
    counters = tuple(counters)
    if len(trace) == 0:
        raise ModelError("cannot fit a model on zero rows")
    if trace.energies is None:
        raise ModelError("fitting needs a measured energy column")
    missing = [c for c in counters if c not in trace.counters]
    if missing:
        raise ModelError(f"trace lacks counter column(s): {', '.join(missing)}")
    if not counters and not with_intercept:
        raise ModelError("no counters to fit")
    A = trace.matrix(counters)
    if with_intercept:
        A = np.hstack([A, np.ones((A.shape[0], 1))])
    y = np.array([float(e) for e in trace.energies])
    x, rnorm = nnls(A, y)
    beta = x[:len(counters)]
    alpha = float(x[-1]) if with_intercept else 0.0
    coefs = {c: _rational(b) for c, b in zip(counters, beta)}
    a = _rational(alpha)
    static = a == 0 and set(counters) <= STATIC_COUNTERS
    model = EnergyModel(name, unit, counters, coefs, a, {}, target, "static" if static else "replay")
    mape = evaluate_mape(model, trace) if all(e > 0 for e in trace.energies) else float("nan")
    return FitResult(model, beta, alpha, rnorm, mape)


def evaluate_mape(model, trace):
    """Mean absolute percentage error of ``model`` over the rows of ``trace``."""
    if trace.energies is None:
        raise ModelError("MAPE needs a measured energy column")
    if len(trace) == 0:
        raise ModelError("MAPE over zero rows is undefined")
    preds = replay(model, trace).rows
    total = Fraction(0)
    for (_, p), meas in zip(preds, trace.energies):
        if meas <= 0:
            raise ModelError("measured energy must be positive for MAPE")
        total += abs(p - meas) / meas
    return float(total * 100 / len(trace))


@dataclass
class SearchResult:
    strategy: str
    counters: tuple
    model: EnergyModel
    test_mape: float
    train_mape: float


def split_indices(n, test_fraction=0.3, seed=0):
    """Deterministic shuffled train/test split; both parts non-empty when n >= 2."""
    perm = np.random.default_rng(seed).permutation(n)
    n_test = min(max(1, int(round(n * test_fraction))), n - 1) if n > 1 else 0
    test = sorted(int(i) for i in perm[:n_test])
    train = sorted(int(i) for i in perm[n_test:])
    return train, test


STRATEGIES = ("bottom-up", "top-down", "exhaustive")


def search_subset(trace, candidates, strategy="exhaustive", test_fraction=0.3, seed=0, split=None,
                  with_intercept=False, unit="nJ", max_exhaustive=20):
    """Best counter subset under ``strategy``, scored by test-set MAPE.

    Ties prefer fewer counters, then the lexicographically smaller sorted id tuple.
    """
    candidates = tuple(dict.fromkeys(candidates))
    if not candidates:
        raise ModelError("empty candidate counter set")
    if strategy not in STRATEGIES:
        raise ModelError(f"unknown strategy {strategy!r}")
    if strategy == "exhaustive" and len(candidates) > max_exhaustive:
        raise ModelError(f"exhaustive search is limited to {max_exhaustive} counters")
    train_idx, test_idx = split if split is not None else split_indices(len(trace), test_fraction, seed)
    train, test = trace.subset(train_idx), trace.subset(test_idx or train_idx)
    order = {c: i for i, c in enumerate(candidates)}
    cache = {}

    def score(subset):
        key = tuple(sorted(subset, key=order.get))
        if key not in cache:
            fit = fit_nnls(train, key, with_intercept, name=f"search.{strategy}", unit=unit)
            cache[key] = (evaluate_mape(fit.model, test), fit)
        return cache[key][0]

    def rank(subset):
        key = tuple(sorted(subset, key=order.get))
        return (score(key), len(key), tuple(sorted(key)))

    if strategy == "exhaustive":
        subsets = [s for k in range(1, len(candidates) + 1) for s in itertools.combinations(candidates, k)]
        best = min(subsets, key=rank)
    elif strategy == "bottom-up":
        best = ()
        best_score = float("inf")
        while len(best) < len(candidates):
            options = [best + (c,) for c in candidates if c not in best]
            choice = min(options, key=rank)
            if not score(choice) < best_score:
                break
            best, best_score = tuple(sorted(choice, key=order.get)), score(choice)
    else:
        best = candidates
        best_score = score(best)
        while len(best) > 1:
            options = [tuple(c for c in best if c != d) for d in best]
            choice = min(options, key=rank)
            if not score(choice) < best_score:
                break
            best, best_score = choice, score(choice)
    key = tuple(sorted(best, key=order.get))
    test_mape, fit = cache[key][0], cache[key][1]
    return SearchResult(strategy, key, fit.model, test_mape, fit.train_mape)
