import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from pqc import kernel, probmodel, scoring
from pqc.kernel import KNN, KernelModel
from pqc.probmodel import ProbabilisticModel
from pqc.scoring import Cell, SweepResult


def set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def labels_of(part, n):
    out = np.empty(n, int)
    for c, block in enumerate(part):
        out[block] = c
    return out


PARTS6 = [labels_of(p, 6) for p in set_partitions(list(range(6)))]


def brute_jaccard(a, b):
    n11 = n10 = n01 = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        n11 += sa and sb
        n10 += sa and not sb
        n01 += sb and not sa
    return 1.0 if n11 + n10 + n01 == 0 else n11 / (n11 + n10 + n01)


def brute_cramers_v(a, b):
    ra, rb = sorted(set(a)), sorted(set(b))
    if min(len(ra), len(rb)) == 1:
        return 1.0 if len(ra) == len(rb) else 0.0
    n = len(a)
    chi2 = 0.0
    for x in ra:
        for y in rb:
            obs = sum(1 for p, q in zip(a, b) if p == x and q == y)
            exp = sum(1 for p in a if p == x) * sum(1 for q in b if q == y) / n
            chi2 += (obs - exp) ** 2 / exp
    return min(1.0, math.sqrt(chi2 / (n * (min(len(ra), len(rb)) - 1))))


def test_partition_count():
    assert len(PARTS6) == 203   # Bell number B6


def test_jaccard_and_cramers_v_oracle_on_all_partitions():
    for a in PARTS6:
        for b in PARTS6:
            assert scoring.jaccard(a, b) == pytest.approx(brute_jaccard(a, b), abs=1e-12)
            assert scoring.cramers_v(a, b) == pytest.approx(brute_cramers_v(a, b), abs=1e-12)


def test_jaccard_examples():
    assert scoring.jaccard([0, 0, 1, 1], [5, 5, 7, 7]) == 1.0
    assert scoring.jaccard([0, 0, 1, 1], [0, 1, 2, 3]) == 0.0
    assert scoring.jaccard(list("aabb"), [0, 0, 0, 1]) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        scoring.jaccard([0, 1], [0])


def test_cramers_v_examples():
    assert scoring.cramers_v([0, 1, 0, 1], ["a", "b", "a", "b"]) == 1.0
    a = [0] * 30 + [0] * 10 + [1] * 10 + [1] * 30
    b = [0] * 30 + [1] * 10 + [0] * 10 + [1] * 30
    assert scoring.cramers_v(a, b) == pytest.approx(0.5)
    r = np.random.default_rng(0)
    assert scoring.cramers_v(r.integers(0, 3, 20000), r.integers(0, 3, 20000)) < 0.03


@given(st.lists(st.integers(0, 4), min_size=2, max_size=30), st.permutations(range(5)))
def test_scores_invariant_to_relabelling(x, perm):
    x = np.array(x)
    y = np.array(perm)[x]
    assert scoring.jaccard(x, y) == 1.0
    if len(set(x)) > 1:
        assert scoring.cramers_v(x, y) == pytest.approx(1.0)


def test_pearson():
    assert scoring.pearson([1, 2, 3], [2, 4, 6])[0] == pytest.approx(1.0)
    assert scoring.pearson([1, 2, 3], [3, 2, 1])[0] == pytest.approx(-1.0)
    r = np.random.default_rng(1)
    x, y = r.normal(size=20), r.normal(size=20)
    rho, p = scoring.pearson(x, y)
    ref = stats.pearsonr(x, y)
    assert rho == pytest.approx(ref[0], abs=1e-12) and p == pytest.approx(ref[1], rel=1e-9)
    t = -0.776 * math.sqrt(18 / (1 - 0.776 ** 2))
    assert 2 * stats.t.sf(abs(t), 18) < 1e-3
    with pytest.raises(ValueError):
        scoring.pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        scoring.pearson([1, 2], [1, 2])


def test_pearson_p_value_of_strong_negative_correlation():
    # a series pair with correlation close to -0.776 over 20 scales
    r = np.random.default_rng(7)
    x = r.normal(size=20)
    y = -0.776 * x + math.sqrt(1 - 0.776 ** 2) * r.normal(size=20)
    rho, p = scoring.pearson(x, y)
    if rho <= -0.776:
        assert p < 1e-3


# ---------------------------------------------------------------- ANLL

def test_anll_trivial_model_is_zero():
    km = kernel.build_model(np.random.default_rng(0).normal(size=(30, 2)), KNN, 20)
    pm = ProbabilisticModel.from_assignment(km, np.zeros(30, int))
    assert scoring.anll(pm, km.centers) == 0.0


def test_anll_constant_half():
    km = KernelModel(KNN, np.array([[-1.0], [1.0]]), sigmas=np.ones(2))
    pm = ProbabilisticModel(km, ([0], [1]))
    assert scoring.anll(pm, np.zeros((5, 1))) == pytest.approx(math.log(2))


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_anll_nonnegative(seed, k):
    r = np.random.default_rng(seed)
    km = kernel.build_model(r.normal(size=(25, 2)), KNN, 20)
    pm = ProbabilisticModel.from_assignment(km, np.arange(25) % k)
    assert scoring.anll(pm, r.normal(size=(10, 2)) * 3) >= 0.0


# ---------------------------------------------------------------- sweep and selection

def test_small_sweep_properties():
    from pqc import dataio
    d = dataio.preprocess(dataio.gen_local_densities(0))
    res = scoring.sweep(d, KNN, knn_grid=[10, 17.5, 25], eth_grid=[1e-3, 0.05, 0.5, 3.0])
    K = res.grid("k_effective")
    assert np.all(np.diff(K, axis=1) <= 0)
    A = res.grid("anll")
    assert np.all(A >= 0)
    for c in res.cells:
        assert 0 <= c.js <= 1 and 0 <= c.cramers_v <= 1
        assert c.eth_used >= c.eth and c.eth_used >= 1e-3
        assert (c.anll == 0) or not c.trivial
    with pytest.raises(ValueError):
        scoring.sweep(d, KNN, knn_grid=[], eth_grid=[0.1])
    with pytest.raises(ValueError):
        scoring.sweep(d, KNN, knn_grid=[20, 10], eth_grid=[0.1])


def test_sweep_marks_failed_cells():
    from pqc import dataio
    X = np.repeat(np.random.default_rng(0).normal(size=(5, 2)), 4, axis=0)
    d = dataio.Dataset(X)
    res = scoring.sweep(d, KNN, knn_grid=[5.0], eth_grid=[0.1])
    assert res.cells[0].failed and not res.cells[0].converged


def synthetic(anll_rows, k_rows=None, eth=None):
    knn = [2.5 * (i + 1) for i in range(len(anll_rows))]
    eth = eth or [1e-3 * 3 ** j for j in range(len(anll_rows[0]))]
    cells = []
    for i, row in enumerate(anll_rows):
        for j, a in enumerate(row):
            k = k_rows[i][j] if k_rows else 3
            cells.append(Cell(knn=knn[i], eth=eth[j], eth_used=eth[j], anll=a, k_effective=k,
                              k_sgd=k, trivial=k == 1))
    return SweepResult(knn_grid=knn, eth_grid=eth, variant=KNN, cells=cells)


def test_select_models_ranks_interior_minima():
    rows = [[0.5] * 4, [0.3] * 4, [0.4] * 4, [0.2, 0.25, 0.3, 0.5], [0.6] * 4, [0.7] * 4]
    cands = scoring.select_models(synthetic(rows))
    kinds = [(c["knn"], c["kind"], c["stable"]) for c in cands]
    assert kinds[0] == (5.0, "local_minimum", True)
    assert (10.0, "local_minimum", False) in kinds


def test_select_models_monotone_curve_has_no_interior_minimum():
    rows = [[0.1 * (i + 1)] * 2 for i in range(5)]
    cands = scoring.select_models(synthetic(rows))
    assert all(c["kind"] != "local_minimum" for c in cands)


def test_select_models_hierarchical_plateau():
    rows = [[0.5, 0.5, 0.5, 0.5, 0.5]] + [[0.3, 0.01, 0.01, 0.01, 0.01]] * 4 + [[0.6] * 5]
    ks = [[5] * 5] + [[4, 2, 2, 2, 2]] * 4 + [[3] * 5]
    cands = scoring.select_models(synthetic(rows, ks))
    hier = [c for c in cands if c["kind"] == "hierarchical"]
    assert hier and hier[0]["k"] == 2


def test_select_models_stable_under_duplicated_grid():
    rows = [[0.5] * 3, [0.3] * 3, [0.4] * 3, [0.6] * 3]
    base = synthetic(rows)
    dup = synthetic([rows[0], rows[1], rows[1], rows[2], rows[3]])
    dup.knn_grid = [2.5, 5.0, 5.0, 7.5, 10.0]
    for c, k in zip(dup.cells, np.repeat(dup.knn_grid, 3)):
        c.knn = k
    assert scoring.select_models(base) == scoring.select_models(dup)


def test_display_anll_raises_trivial_cells():
    res = synthetic([[0.2, 0.0], [0.4, 0.3]], [[3, 1], [2, 2]])
    D = res.display_anll()
    assert D[0, 1] == pytest.approx(0.4)


def test_sweep_export_round_trip(tmp_path):
    res = synthetic([[0.5, 0.4], [0.3, 0.2], [0.4, 0.3]])
    scoring.write_sweep(res, tmp_path / "s.csv", tmp_path / "s.json")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("knn,eth,eth_used,anll,k") and len(lines) == 7
    back = SweepResult.from_json(res.to_json())
    assert back.cells == res.cells
