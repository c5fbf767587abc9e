import numpy as np
import pytest

from socpath.control import ControlFunction, evaluate_control, features
from socpath.exceptions import ArchitectureError, ConfigurationError
from socpath.model import Geometry, ModelSystem


def test_bridge_drift_value():
    s = ModelSystem.free(1.0)
    c = ControlFunction.for_system(s, None, bridge_eps=1e-3, endpoint=[1.0])
    assert evaluate_control(c, np.array([0.0]), 0.0)[0] == pytest.approx(1 / 1.001)


def test_bridge_vanishes_at_target():
    s = ModelSystem.anharmonic(1.0, 2.0)
    c = ControlFunction.for_system(s, None, endpoint=[0.4])
    assert c.drift(np.array([0.4]), 0.5)[0] == 0.0


def test_torus_short_arc():
    s = ModelSystem.rotor_chain(2, 1.0, 1.0)
    c = ControlFunction.for_system(s, None, bridge_eps=1e-3)
    u = c.drift(np.array([-3.0, 0.0]), 0.0, z=np.array([3.0, 0.0]))
    assert u[0] < 0
    assert abs(u[0]) == pytest.approx((2 * np.pi - 6) / 1.001)


def test_control_rejects_t_at_T():
    c = ControlFunction.for_system(ModelSystem.free(1.0), None, endpoint=[0.0])
    with pytest.raises(ConfigurationError):
        c.drift(np.array([0.0]), 1.0)


def test_torus_features():
    g = Geometry.torus(2)
    f = features(np.array([0.0, 1.0]), np.array([np.pi / 2, 0.0]), 0.0, g, 1.0)
    np.testing.assert_allclose(f[0], [0.0, 1.0, 1.0, 0.0, 0.0], atol=1e-15)
    f2 = features(np.array([2 * np.pi, 1.0]), np.array([np.pi / 2, 0.0]), 0.0, g, 1.0)
    np.testing.assert_allclose(f, f2, atol=1e-12)


def test_cartesian_features():
    f = features(np.array([0.5]), np.array([-0.2]), 2.0, Geometry.cartesian(1), 2.0)
    np.testing.assert_allclose(f, [0.5, -0.2, 1.0])


def test_zero_init_equals_bridge():
    s = ModelSystem.rotor_chain(4, 1.0, 2.0)
    c = ControlFunction.for_system(s, hidden=4)
    bare = ControlFunction.for_system(s, None)
    x = np.random.default_rng(0).uniform(-np.pi, np.pi, (6, 4))
    z = np.random.default_rng(1).uniform(-np.pi, np.pi, (6, 4))
    np.testing.assert_array_equal(c.drift(x, 0.3, z), bare.drift(x, 0.3, z))


def test_torus_control_periodic():
    s = ModelSystem.rotor_chain(3, 1.0, 2.0)
    c = ControlFunction.for_system(s, hidden=4, seed=1)
    c.residual.params["Wout"] = np.random.default_rng(0).normal(size=c.residual.params["Wout"].shape)
    x = np.array([[0.3, -1.0, 2.5]])
    z = np.array([[1.0, 0.0, -2.0]])
    shifted = x + np.array([[2 * np.pi, 0.0, 0.0]])
    np.testing.assert_allclose(c.drift(x, 0.5, z), c.drift(shifted, 0.5, z), atol=1e-12)


def test_mlp_control_generalises_across_starts():
    s = ModelSystem.anharmonic(1.0, 1.0)
    c = ControlFunction.for_system(s, "mlp", endpoint=[0.5])
    for x0 in (-1.0, 0.0, 2.0):
        assert np.isfinite(c.drift(np.array([x0]), 0.1)).all()


def test_checkpoint_roundtrip_and_retarget():
    s = ModelSystem.rotor_chain(3, 1.0, 5.0)
    c = ControlFunction.for_system(s, hidden=4)
    ck = c.to_checkpoint({"N": 3})
    big = ControlFunction.from_checkpoint(ck, s.with_sites(7))
    assert big.geometry.size == 7
    assert big.drift(np.zeros((2, 7)), 0.0, np.zeros((2, 7))).shape == (2, 7)


def test_mlp_checkpoint_cannot_change_dimension():
    s = ModelSystem.rotor_chain(3, 1.0, 5.0)
    c = ControlFunction.for_system(s, "mlp", hidden=(4,))
    with pytest.raises(ArchitectureError):
        ControlFunction.from_checkpoint(c.to_checkpoint(), s.with_sites(5))


def test_bridge_only_has_no_checkpoint():
    with pytest.raises(ArchitectureError):
        ControlFunction.for_system(ModelSystem.free(1.0), None).to_checkpoint()
