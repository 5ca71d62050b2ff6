import numpy as np
import pytest
from scipy.optimize import brentq

from pqc import kernel
from pqc.descent import (DescentConfig, DescentError, default_energy_threshold, descend,
                         DescentResult)
from pqc.kernel import GLOBAL, KNN, KernelModel
from pqc.potential import PotentialField, calibrate_offset, gradient


def test_single_kernel_converges_to_centre():
    c = np.array([[0.3, -0.2]])
    f = PotentialField(KernelModel(GLOBAL, c, global_sigma=0.5))
    res = descend(f, c + 0.4)
    assert res.converged
    assert res.last_max_step <= 1e-3 and res.last_max_dV <= 1e-3
    # the step rule stops ADAM a few hundredths of sigma short of the minimum
    assert np.linalg.norm(res.final_points[0] - c[0]) < 0.05 * 0.5
    g0, g1 = (np.linalg.norm(gradient(f, y)) for y in (c[0] + 0.4, res.final_points[0]))
    assert g1 < 0.05 * g0


def test_patience_avoids_stopping_at_a_turnaround():
    c = np.array([[0.3, -0.2]])
    f = PotentialField(KernelModel(GLOBAL, c, global_sigma=0.5))
    hasty = descend(f, c + 0.4, DescentConfig(patience=1))
    patient = descend(f, c + 0.4, DescentConfig(patience=5))
    d = lambda r: np.linalg.norm(r.final_points[0] - c[0])
    assert d(patient) < d(hasty) / 4


def two_wells(sep=6.0, s=1.0):
    X = np.array([[-sep / 2], [sep / 2]])
    return PotentialField(KernelModel(KNN, X, sigmas=np.array([s, s]))), X


def test_two_kernel_oracle():
    f, X = two_wells()
    # minimum of the right well from the 1-D root of dV/dx
    root = brentq(lambda x: gradient(f, [x])[0], 1.0, 5.0)
    start = np.array([[-2.0], [-1.0], [1.5], [4.0]])
    res = descend(f, start)
    assert res.converged
    assert np.all(np.sign(res.final_points[:, 0]) == np.sign(start[:, 0]))
    assert np.allclose(np.abs(res.final_points[:, 0]), root, atol=5e-2)


def test_max_iterations_zero():
    f, X = two_wells()
    res = descend(f, X + 0.5, DescentConfig(max_iterations=0))
    assert not res.converged and res.iterations_used == 0
    assert np.array_equal(res.final_points, X + 0.5)


def test_deterministic_and_descending():
    r = np.random.default_rng(1)
    X = r.normal(size=(60, 2))
    f = calibrate_offset(PotentialField(kernel.build_model(X, KNN, 10)), X)
    a, b = descend(f, X), descend(f, X)
    assert np.array_equal(a.final_points, b.final_points)
    assert np.median(a.final_potentials) <= np.median(a.initial_potentials)
    if a.converged:
        assert a.last_max_step <= 1e-3 and a.last_max_dV <= 1e-3


def test_trajectory_callback():
    f, X = two_wells()
    seen = []
    descend(f, X + 0.2, DescentConfig(max_iterations=5), trajectory=lambda i, Y, V: seen.append(i))
    assert seen == list(range(6))


def test_non_finite_gradient_reported():
    class Broken:
        def values_and_gradients(self, Y):
            G = np.zeros_like(Y)
            G[1] = np.nan
            return np.zeros(len(Y)), G
    with pytest.raises(DescentError, match="replica 1, iteration 0"):
        descend(Broken(), np.zeros((3, 2)))


@pytest.mark.parametrize("bad", [dict(learning_rate=0), dict(beta1=1.0), dict(eps_y=0),
                                 dict(max_iterations=-1), dict(epsilon_adam=0),
                                 dict(patience=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        DescentConfig(**bad)


def make_result(dv, converged):
    z = np.zeros((1, 1))
    return DescentResult(z, np.zeros(1), np.zeros(1), 1, converged, 0.0, dv)


def test_default_energy_threshold():
    cfg = DescentConfig()
    assert default_energy_threshold(make_result(2e-4, True), cfg) == 1e-3
    assert default_energy_threshold(make_result(0.05, False), cfg) == 0.05
    assert default_energy_threshold(make_result(np.inf, False), cfg) == 1e-3
