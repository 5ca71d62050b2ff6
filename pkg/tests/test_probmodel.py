import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pqc import graphalloc, kernel, probmodel
from pqc.descent import descend
from pqc.kernel import GLOBAL, KNN, COV, KernelModel
from pqc.potential import PotentialField, calibrate_offset
from pqc.probmodel import ProbabilisticModel, ProbModelError


def random_model(seed, n=24, k=3, variant=KNN):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, 2)) * 2
    km = kernel.build_model(X, variant, 25)
    assignment = np.arange(n) % k
    return ProbabilisticModel.from_assignment(km, assignment), X, r


@given(st.integers(0, 10_000), st.sampled_from([KNN, COV]))
def test_joint_sums_to_wavefunction_and_posterior_simplex(seed, variant):
    pm, X, r = random_model(seed, variant=variant)
    Q = r.normal(size=(20, 2)) * 3
    joint = np.exp(pm.log_joint(Q))
    assert np.allclose(joint.sum(axis=1), kernel.wavefunction(pm.kernel_model, Q), rtol=1e-12, atol=1e-300)
    P = probmodel.posterior(pm, Q)
    assert np.all(P >= 0) and np.allclose(P.sum(axis=1), 1, atol=1e-12)
    lik = np.exp(probmodel.log_likelihood(pm, Q))
    assert np.allclose((lik * pm.priors).sum(axis=1), joint.sum(axis=1), rtol=1e-12, atol=1e-300)


def test_single_cluster_joint_is_wavefunction():
    pm, X, r = random_model(1, k=1)
    x = r.normal(size=2)
    assert probmodel.joint(pm, 0, x) == pytest.approx(kernel.wavefunction(pm.kernel_model, x), rel=1e-12)
    assert probmodel.prior(pm, 0) == 1.0


def test_single_kernel_cluster_hand_value():
    km = KernelModel(KNN, np.array([[0.0], [5.0], [9.0], [12.0]]), sigmas=np.ones(4))
    pm = ProbabilisticModel(km, ([0], [1, 2, 3]))
    assert probmodel.joint(pm, 0, [0.0]) == pytest.approx(
        0.25 / math.sqrt(2 * math.pi) + 0, rel=1e-6)
    assert probmodel.likelihood(pm, [0.3], 0) == pytest.approx(
        math.exp(kernel.component_log_density(km, 0, [0.3])), rel=1e-12)


def test_priors_exact():
    km = KernelModel(KNN, np.arange(400.0)[:, None], sigmas=np.ones(400))
    pm = ProbabilisticModel.from_assignment(km, np.repeat(np.arange(4), 100))
    assert probmodel.prior(pm, 2) == 0.25
    assert pm.priors.sum() == 1.0


def test_posterior_separation_and_symmetry():
    km = KernelModel(KNN, np.array([[-30.0], [0.0], [30.0]]), sigmas=np.ones(3))
    pm = ProbabilisticModel(km, ([0], [1], [2]))
    assert probmodel.posterior(pm, [0.0])[1] > 1 - 1e-9
    p = probmodel.posterior(pm, [15.0])
    assert p[1] == pytest.approx(0.5, abs=1e-9) and p[2] == pytest.approx(0.5, abs=1e-9)


def test_far_field_posterior_matches_direct_sum():
    km = KernelModel(KNN, np.array([[-1.0], [1.0], [4.0]]), sigmas=np.array([1.0, 1.0, 0.5]))
    pm = ProbabilisticModel(km, ([0, 1], [2]))
    x = 40.0
    dens = [math.exp(kernel.component_log_density(km, i, [x]) + 700) for i in range(3)]
    want = np.array([dens[0] + dens[1], dens[2]]) / sum(dens)
    got = probmodel.posterior(pm, [x])
    assert np.all(np.isfinite(got)) and np.allclose(got, want, atol=1e-12)


def test_global_variant_rejected():
    km = KernelModel(GLOBAL, np.zeros((2, 1)) + [[0.0], [1.0]], global_sigma=1.0)
    with pytest.raises(ProbModelError, match="normalised"):
        ProbabilisticModel(km, ([0, 1],))


def test_members_must_partition():
    km = KernelModel(KNN, np.array([[0.0], [1.0]]), sigmas=np.ones(2))
    with pytest.raises(ProbModelError):
        ProbabilisticModel(km, ([0],))
    with pytest.raises(ProbModelError):
        ProbabilisticModel(km, ([0, 1], [1]))


def test_allocation_scale_robust_and_ties(rng):
    pm, X, r = random_model(3)
    lj = pm.log_joint(X)
    a = probmodel.allocate(pm, log_joint=lj)
    b = probmodel.allocate(pm, log_joint=lj + 7.5)
    assert np.array_equal(a.assignment, b.assignment)
    tie = probmodel.allocate(pm, log_joint=np.zeros((2, 3)))
    assert tie.assignment.tolist() == [0, 0]
    assert tie.empty_clusters == (1, 2) and tie.remap == {0: 0} and tie.k_effective == 1


def test_allocation_reproduces_graph_assignment_on_separated_blobs():
    r = np.random.default_rng(0)
    X = np.vstack([r.normal(size=(30, 2)) * 0.3 + c for c in ([0, 0], [6, 0], [0, 6])])
    f = calibrate_offset(PotentialField(kernel.build_model(X, KNN, 20)), X)
    res = descend(f, X)
    base = graphalloc.allocate(res, f, X, observation_potentials=res.initial_potentials)
    merged = graphalloc.merge_by_threshold(base, 1e-3, res.final_points)
    pm = ProbabilisticModel(f.model, merged.member_sets)
    alloc = probmodel.allocate(pm, X)
    assert merged.k == 3
    assert np.array_equal(alloc.assignment, merged.assignment)
    centre = X[:30].mean(axis=0)
    assert probmodel.allocate(pm, centre[None]).assignment[0] == merged.assignment[0]
    dup = probmodel.allocate(pm, np.vstack([X[5], X[5]]))
    assert dup.assignment[0] == dup.assignment[1]


def test_outliers():
    r = np.random.default_rng(2)
    X = r.normal(size=(200, 2))
    km = kernel.build_model(X, KNN, 10)
    pm = ProbabilisticModel.from_assignment(km, np.zeros(200, int))
    flags, scores = probmodel.outlier_flags(pm, np.array([[50.0, 50.0]]), threshold=1e-6)
    assert flags[0]
    train_flags, train_scores = probmodel.outlier_flags(pm, X, quantile=0.05)
    assert train_flags.sum() == math.ceil(0.05 * 200)
    q = probmodel.quantile_threshold(train_scores, 0.05)
    assert train_scores[train_flags].max() == q
    centre = np.argmin(np.linalg.norm(X, axis=1))
    assert not train_flags[centre]
    with pytest.raises(ProbModelError):
        probmodel.outlier_flags(pm, X, quantile=1.5)
    with pytest.raises(ProbModelError):
        probmodel.outlier_flags(pm, X)


def test_quantile_ties_broken_by_index():
    km = KernelModel(KNN, np.zeros((1, 1)), sigmas=np.ones(1))
    pm = ProbabilisticModel(km, ([0],))
    X = np.array([[1.0], [-1.0], [1.0], [3.0]])
    flags, _ = probmodel.outlier_flags(pm, X, quantile=0.5)
    # scores at 1 and -1 tie; the lower index wins the remaining slot
    assert flags.tolist() == [True, False, False, True]


def test_probability_map_export(tmp_path):
    pm, X, r = random_model(0)
    P = r.normal(size=(4, 2))
    probmodel.export_probability_map(pm, P, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "x,y,p_k0,p_k1,p_k2,max_p_x_given_k" and len(lines) == 5
    vals = np.array(lines[1].split(","), float)
    assert np.allclose(vals[2:5], probmodel.posterior(pm, P[0]), atol=1e-15)
