import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from asaerc.analysis import (
    ContributionTrace,
    SweepResult,
    contribution_trace,
    correlation_distributions,
    pairwise_correlations,
    pearson,
    query_histogram,
    run_sweep,
    sweep_cells,
    write_csv,
)
from asaerc.dynsys import build_dataset
from asaerc.models import build_model, parameter_count
from asaerc.reservoir import Grid, ReservoirConfig, run
from asaerc.train import TrainConfig, train

GRID = Grid(16, 16, 1.0, 1.0)


def test_pearson_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson([1, 2, 3], [5, 5, 5]) is None
    with pytest.raises(ValueError):
        pearson([1.0], [2.0])


series = st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=40)


@settings(max_examples=100)
@given(series, st.data(), st.floats(0.01, 100), st.floats(-50, 50))
def test_pearson_properties(a, data, scale, shift):
    b = data.draw(st.lists(st.floats(-100, 100, allow_nan=False), min_size=len(a), max_size=len(a)))
    a, b = np.array(a), np.array(b)
    assume(a.std() > 1e-3 and b.std() > 1e-3)
    r = pearson(a, b)
    assert -1.0 <= r <= 1.0
    assert r == pytest.approx(pearson(b, a), abs=1e-12)
    assert pearson(scale * a + shift, b) == pytest.approx(r, abs=1e-9)


def test_pairwise_matches_scalar_pearson():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 5))
    X[:, 3] = 2.0
    rho, dropped = pairwise_correlations(X)
    assert dropped == 4
    expected = [pearson(X[:, i], X[:, j]) for i in range(5) for j in range(i + 1, 5) if 3 not in (i, j)]
    assert np.allclose(rho, expected, atol=1e-12)


def _trace(values, weights, kind="aerc", systems=None):
    values, weights = np.asarray(values, float), np.asarray(weights, float)
    sys_of = np.zeros(len(values), int) if systems is None else np.asarray(systems)
    return ContributionTrace(values, weights, values * weights, sys_of, kind)


def test_identical_series_point_mass_at_one():
    v = np.sin(np.arange(100.0))
    h = correlation_distributions(_trace(np.column_stack([v, v]), np.ones((100, 2)) + np.column_stack([v, -v])))
    assert h["values"].counts[-1] == 1 and h["values"].counts.sum() == 1
    assert len(h["values"].edges) == 51


def test_linear_weights_point_mass_at_zero():
    rng = np.random.default_rng(1)
    v = rng.standard_normal((100, 4))
    h = correlation_distributions(_trace(v, np.broadcast_to([1.0, -2.0, 3.0, 0.5], (100, 4)), "linear"))
    mid = np.searchsorted(h["weights"].edges, 0.0, side="right") - 1
    assert h["weights"].counts[mid] == 6 and h["weights"].counts.sum() == 6
    assert h["weights"].n_undefined == 0


def test_constant_weights_undefined_for_attention_models():
    rng = np.random.default_rng(1)
    h = correlation_distributions(_trace(rng.standard_normal((50, 3)), np.ones((50, 3)), "aerc"))
    assert h["weights"].n_pairs == 0 and h["weights"].n_undefined == 3


def test_product_sign_flip_identity():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((200, 6)) @ rng.standard_normal((6, 6))
    w = rng.standard_normal(6)
    h = correlation_distributions(_trace(v, np.broadcast_to(w, v.shape), "linear"))
    iu, ju = np.triu_indices(6, 1)
    expected = np.sign(w[iu] * w[ju]) * h["raw"]["values"]
    assert np.abs(h["raw"]["products"] - expected).max() < 1e-10


def test_pairs_pooled_per_system():
    rng = np.random.default_rng(3)
    v = rng.standard_normal((60, 3))
    w = rng.standard_normal((60, 3))
    systems = np.repeat([0, 1], 30)
    h = correlation_distributions(_trace(v, w, systems=systems))
    assert h["values"].n_pairs == 6
    a, _ = pairwise_correlations(v[:30])
    b, _ = pairwise_correlations(v[30:])
    assert np.allclose(h["raw"]["values"], np.concatenate([a, b]))


@pytest.fixture(scope="module")
def small():
    rng = np.random.default_rng(0)
    s = [np.sin(0.2 * np.arange(200) + k) + 0.1 * rng.standard_normal(200) for k in range(2)]
    ds = build_dataset(s, 0.2, ["a", "b"])
    store = run(ds.inputs, ReservoirConfig(grid=GRID, substeps_per_sample=20), dtype=np.float64)
    return ds, store


def test_query_histogram_centre_when_position_head_zeroed(small):
    ds, store = small
    m = build_model("asaerc", GRID, 4, 3, hidden=8, seed=0, lattice_start=False)
    m.position_head.weights[...] = 0.0
    m.position_head.bias[...] = 0.0
    h = query_histogram(m, ds, store, bins=15)
    assert np.count_nonzero(h.counts) == 1
    i, j = np.unravel_index(np.argmax(h.counts), h.counts.shape)
    assert h.x_edges[i] <= 0.5 <= h.x_edges[i + 1] and h.y_edges[j] <= 0.5 <= h.y_edges[j + 1]


def test_query_histogram_mass_and_margin(small):
    ds, store = small
    m = build_model("asaerc", GRID, 4, 3, hidden=8, seed=1, lattice_start=False)
    m.position_head.weights *= 20
    h = query_histogram(m, ds, store, bins=GRID.nx)
    tr = contribution_trace(m, ds, store)
    assert h.counts.sum() == pytest.approx(np.abs(tr.weights).sum(), rel=1e-12)
    assert h.total_weight == pytest.approx(h.counts.sum(), rel=1e-12)
    edge = h.x_edges[1:] <= m.margin
    assert h.counts[edge, :].sum() == 0 and h.counts[:, edge].sum() == 0
    top = h.x_edges[:-1] >= GRID.Lx - m.margin
    assert h.counts[top, :].sum() == 0 and h.counts[:, top].sum() == 0


def test_contribution_trace_shapes(small):
    ds, store = small
    for kind in ("linear", "aerc", "asaerc"):
        m = build_model(kind, GRID, 4, 4, hidden=8, seed=0)
        tr = contribution_trace(m, ds, store)
        assert tr.values.shape == (len(ds.test_idx), 4)
        assert np.array_equal(tr.products, tr.values * tr.weights)


def test_trained_linear_convention(small):
    ds, store = small
    m = build_model("linear", GRID, 4, 4)
    train(m, ds, store, TrainConfig(max_epochs=5, lr=0.01))
    h = correlation_distributions(contribution_trace(m, ds, store))
    nz = np.flatnonzero(h["weights"].counts)
    assert len(nz) == 1 and h["weights"].edges[nz[0]] <= 0.0 < h["weights"].edges[nz[0] + 1]


def test_sweep_rows_and_determinism(small):
    ds, store = small
    cells = sweep_cells(["linear", "aerc", "asaerc"], [4], [4, 9], [0, 1])
    assert len(cells) == 2 + 4 + 4
    cfg = TrainConfig(max_epochs=2, batch_size=64)
    a = run_sweep(cells, ds, store, cfg, hidden=8)
    b = run_sweep(cells, ds, store, cfg, hidden=8)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]  # noqa: E731
    assert strip(a.rows) == strip(b.rows)
    for r in a.rows:
        assert r["status"] == "ok"
        assert r["params"] == parameter_count(r["model"], r["n_fix"], r["n"], 8)
    agg = a.aggregate()
    assert {(g["model"], g["n"]) for g in agg} == {("linear", 4), ("aerc", 4), ("aerc", 9), ("asaerc", 4), ("asaerc", 9)}


def test_sweep_records_failures(small, tmp_path):
    ds, store = small
    cells = sweep_cells(["aerc", "nonsense"], [4], [4], [0])
    res = run_sweep(cells, ds, store, TrainConfig(max_epochs=1), hidden=8)
    assert [r["status"] for r in res.rows] == ["ok", "failed"]
    assert "nonsense" in res.rows[1]["error"]
    write_csv(tmp_path / "s.csv", res.long_rows(), ["model", "n_fix", "n", "seed", "params", "status", "metric", "value"])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "model,n_fix,n,seed,params,status,metric,value"
    assert len(lines) == 1 + (1 + 2) + 1
    assert isinstance(SweepResult().aggregate(), list)
