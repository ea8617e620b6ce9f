from fractions import Fraction

import numpy as np
import pytest
from scipy.optimize import nnls as scipy_nnls

from wcec.errors import ModelError
from wcec.fitting import evaluate_mape, fit_nnls, nnls, search_subset, split_indices
from wcec.models import CounterTrace, EnergyModel

Q = Fraction


def _trace(A, y, names=None):
    names = names or [f"C{i}" for i in range(A.shape[1])]
    rows = [(f"r{i}", {n: Q(repr(float(v))) for n, v in zip(names, row)}) for i, row in enumerate(A)]
    return CounterTrace(tuple(names), rows, None if y is None else [Q(repr(float(v))) for v in y])


def kkt_violation(A, b, x):
    """Largest breach of the NNLS optimality conditions, scaled by the problem size."""
    g = A.T @ (A @ x - b)                  # gradient of 0.5 ||Ax - b||^2
    scale = max(1.0, np.linalg.norm(A, 2) * (np.linalg.norm(A, 2) * np.linalg.norm(x) + np.linalg.norm(b)))
    primal = max(0.0, -x.min(initial=0.0))
    dual = max(0.0, -g.min(initial=0.0)) / scale
    comp = np.abs(x * g).max(initial=0.0) / (scale * max(1.0, np.abs(x).max(initial=0.0)))
    return max(primal, dual, comp)


def test_single_column_exact():
    x, r = nnls([[1], [2], [3]], [2, 4, 6])
    assert x == pytest.approx([2.0], abs=1e-12) and r == pytest.approx(0.0, abs=1e-12)


def test_negative_target_clamps_to_zero():
    x, r = nnls([[1]], [-1])
    assert x.tolist() == [0.0] and r == pytest.approx(1.0)


def test_recovers_ground_truth_50x3():
    rng = np.random.default_rng(7)
    A = rng.uniform(0, 10, (50, 3))
    beta = rng.uniform(0, 5, 3)
    x, r = nnls(A, A @ beta)
    assert np.abs(x - beta).max() < 1e-9


@pytest.mark.parametrize("seed", range(40))
def test_agrees_with_scipy(seed):
    rng = np.random.default_rng(seed)
    m, n = rng.integers(1, 30), rng.integers(1, 8)
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)
    x, r = nnls(A, b)
    xs, rs = scipy_nnls(A, b)
    assert r == pytest.approx(rs, rel=1e-7, abs=1e-9)
    assert (x >= 0).all()
    assert kkt_violation(A, b, x) < 1e-8


def test_kkt_on_many_instances():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        m, n = int(rng.integers(1, 25)), int(rng.integers(1, 7))
        A = rng.normal(size=(m, n)) * rng.choice([1e-3, 1.0, 1e3])
        b = rng.normal(size=m)
        x, _ = nnls(A, b)
        assert (x >= 0).all()
        assert kkt_violation(A, b, x) < 1e-8


def test_shape_mismatch():
    with pytest.raises(ValueError):
        nnls(np.ones((3, 2)), np.ones(4))


def test_fit_nnls_produces_static_model_for_cm0_counters():
    rng = np.random.default_rng(3)
    names = ["INSTR_NOMUL", "MUL", "RAM_WRITE"]
    A = rng.integers(0, 1000, (40, 3)).astype(float)
    truth = np.array([0.97, 2.27, 1.03])
    fit = fit_nnls(_trace(A, A @ truth, names), names)
    assert fit.model.static_capable and fit.model.intercept == 0
    assert np.abs(fit.beta - truth).max() < 1e-9
    assert fit.train_mape < 1e-9


def test_fit_with_intercept_is_replay_only():
    A = np.array([[1.0], [2.0], [3.0], [4.0]])
    fit = fit_nnls(_trace(A, 2 * A[:, 0] + 5), ["C0"], with_intercept=True)
    assert fit.intercept == pytest.approx(5) and fit.beta[0] == pytest.approx(2)
    assert fit.model.mode == "replay"


@pytest.mark.parametrize("kw,msg", [
    (dict(rows=0), "zero rows"),
    (dict(energies=False), "energy column"),
    (dict(counters=["NOPE"]), "NOPE"),
    (dict(counters=[]), "no counters"),
])
def test_fit_errors(kw, msg):
    A = np.ones((0 if kw.get("rows") == 0 else 3, 1))
    t = _trace(A, None if kw.get("energies") is False else np.ones(A.shape[0]))
    with pytest.raises(ModelError, match=msg):
        fit_nnls(t, kw.get("counters", ["C0"]))


def _model(beta):
    return EnergyModel("m", "nJ", ("INSTR_NOMUL",), {"INSTR_NOMUL": Q(beta)})


def _one_col(preds_counts, meas):
    return CounterTrace(("INSTR_NOMUL",), [(str(i), {"INSTR_NOMUL": Q(c)}) for i, c in enumerate(preds_counts)],
                        [Q(m) for m in meas])


def test_mape_definition():
    assert evaluate_mape(_model("1"), _one_col(["1", "2"], ["1", "2"])) == 0
    assert evaluate_mape(_model("1"), _one_col(["1.1"], ["1"])) == pytest.approx(10)
    assert evaluate_mape(_model("1"), _one_col(["1.1", "0.9"], ["1", "1"])) == pytest.approx(10)
    with pytest.raises(ModelError, match="positive"):
        evaluate_mape(_model("1"), _one_col(["1"], ["0"]))


def test_split_is_deterministic_and_partitions():
    tr, te = split_indices(20, 0.3, seed=5)
    assert (tr, te) == split_indices(20, 0.3, seed=5)
    assert sorted(tr + te) == list(range(20)) and len(te) == 6


def _synthetic(seed, n_rows=60, n_cols=5):
    rng = np.random.default_rng(seed)
    A = rng.integers(0, 500, (n_rows, n_cols)).astype(float)
    beta = np.where(rng.random(n_cols) < 0.5, rng.uniform(0.5, 3, n_cols), 0.0)
    beta[0] = max(beta[0], 1.0)
    y = A @ beta * rng.uniform(0.9, 1.1, n_rows) + 1.0
    return _trace(A, y)


@pytest.mark.parametrize("seed", range(10))
def test_exhaustive_search_is_never_worse(seed):
    t = _synthetic(seed)
    cands = list(t.counters)
    res = {s: search_subset(t, cands, s, seed=seed) for s in ("bottom-up", "top-down", "exhaustive")}
    assert res["exhaustive"].test_mape <= res["bottom-up"].test_mape + 1e-12
    assert res["exhaustive"].test_mape <= res["top-down"].test_mape + 1e-12
    for r in res.values():
        assert r.counters and set(r.counters) <= set(cands)
        assert all(b >= 0 for b in r.model.coefficients.values())


def test_search_recovers_the_support_on_clean_data():
    rng = np.random.default_rng(11)
    A = rng.integers(1, 500, (40, 4)).astype(float)
    t = _trace(A, A @ np.array([2.0, 0.0, 0.0, 3.0]))
    assert search_subset(t, t.counters, "exhaustive").counters == ("C0", "C3")
    assert search_subset(t, t.counters, "bottom-up").counters == ("C0", "C3")


def test_search_argument_errors():
    t = _synthetic(0)
    with pytest.raises(ModelError):
        search_subset(t, [], "exhaustive")
    with pytest.raises(ModelError, match="strategy"):
        search_subset(t, t.counters, "sideways")
    with pytest.raises(ModelError, match="limited"):
        search_subset(t, t.counters, "exhaustive", max_exhaustive=2)
