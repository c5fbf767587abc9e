import numpy as np
import pytest

from socpath.exceptions import ConfigurationError, ConvergenceError
from socpath.model import ModelSystem
from socpath.oracle import (
    OracleCache,
    analytic_kernel,
    ed_1d,
    ed_rotor,
    free_rotor_free_energy,
    harmonic_free_energy,
    hydrogen_ground_state_diagonal,
)

# frozen reference values, computed independently from closed forms
FREE_KERNEL_T1 = 0.3989422804014327  # (2 pi)^-1/2
MEHLER_DIAG_B1 = 0.3680051987075608  # (2 pi sinh 1)^-1/2
HARMONIC_F_B1 = 0.041324854612918155  # log(2 sinh 0.5)
FREE_ROTOR_F_B5 = -0.030417275400314497  # -(1/5) log sum_{|m|<=10} exp(-5 m^2 / 2)


@pytest.fixture(scope="module")
def harmonic():
    return ed_1d(ModelSystem.anharmonic(0.0, 1.0), L=10, G=2000, n_states=40)


def test_harmonic_spectrum(harmonic):
    n = np.arange(11)
    assert np.max(np.abs(harmonic.energies[:11] - (n + 0.5))) < 1e-6
    assert np.all(np.diff(harmonic.energies) > 0)


def test_harmonic_free_energy_and_diagonal(harmonic):
    assert harmonic.free_energy(1.0) == pytest.approx(HARMONIC_F_B1, abs=1e-5)
    assert harmonic_free_energy(1.0) == pytest.approx(HARMONIC_F_B1, abs=1e-14)
    x = np.array([0.0, 0.7, -1.3])
    exact = [analytic_kernel("harmonic", xi, xi, 1.0) for xi in x]
    np.testing.assert_allclose(harmonic.diagonal(x, 1.0), exact, rtol=1e-5)


def test_orthonormality(harmonic):
    assert harmonic.gram_error() < 1e-8


def test_three_point_stencil_is_the_order_two_case():
    sol = ed_1d(ModelSystem.anharmonic(0.0, 1.0), L=10, G=2000, n_states=3, order=2)
    # second-order truncation error is visible at this spacing
    assert 1e-7 < abs(sol.energies[0] - 0.5) < 1e-4


def test_anharmonic_ground_state_converged():
    coarse = ed_1d(ModelSystem.anharmonic(5.0, 5.0), L=10, G=2000, n_states=5)
    fine = ed_1d(ModelSystem.anharmonic(5.0, 5.0), L=10, G=4000, n_states=5)
    assert abs(coarse.energies[0] - fine.energies[0]) < 1e-8


def test_convergence_check_raises_on_tiny_box():
    with pytest.raises(ConvergenceError):
        ed_1d(ModelSystem.anharmonic(0.0, 1.0), L=2.0, G=200, n_states=5, check=True)


def test_smoothed_diagonal_approaches_bare():
    sol = ed_1d(ModelSystem.anharmonic(1.0, 1.0), L=8, G=1600, n_states=30)
    bare = sol.diagonal(0.5, 1.0)
    assert sol.diagonal(0.5, 1.0, smoothing=0.01) == pytest.approx(bare, rel=1e-3)


def test_free_rotor():
    sol = ed_rotor(3, 0.0, m_max=8)
    assert sol.free_energy(5.0) / 3 == pytest.approx(free_rotor_free_energy(5.0), abs=1e-10)
    assert free_rotor_free_energy(5.0) == pytest.approx(FREE_ROTOR_F_B5, abs=1e-14)
    assert sol.correlation(5.0, 0, 1) == pytest.approx(0.0, abs=1e-12)
    assert sol.correlation(5.0, 1, 1) == 1.0


def test_rotor_convergence_and_symmetry():
    sol = ed_rotor(3, 1.0, m_max=6, beta=5.0)
    assert sol.basis["convergence"]["tol"] == 1e-6
    assert sol.gram_error() < 1e-8
    # reflection symmetry of the open chain
    assert sol.correlation(5.0, 0, 1) == pytest.approx(sol.correlation(5.0, 1, 2), abs=1e-10)
    assert sol.correlation(5.0, 0, 1) > sol.correlation(5.0, 0, 2) > 0


def test_rotor_limits():
    with pytest.raises(ConfigurationError):
        ed_rotor(5, 1.0)


def test_rotor_periodic_spectrum_ground_state_lower():
    open_ = ed_rotor(3, 1.0, m_max=6)
    ring = ed_rotor(3, 1.0, m_max=6, boundary="periodic")
    assert ring.energies[0] < open_.energies[0]


def test_analytic_kernels():
    assert analytic_kernel("free", 0.0, 0.0, 1.0) == pytest.approx(FREE_KERNEL_T1, rel=1e-12)
    assert analytic_kernel("harmonic", 0.0, 0.0, 1.0) == pytest.approx(MEHLER_DIAG_B1, rel=1e-12)
    r = analytic_kernel("harmonic", 0.3, 0.5, 1e-3) / analytic_kernel("free", 0.3, 0.5, 1e-3)
    assert r == pytest.approx(1.0, abs=1e-3)


def test_hydrogen_asymptote():
    assert hydrogen_ground_state_diagonal([0.0, 0.0, 1.0], 5.0) == pytest.approx(np.exp(2.5 - 2) / np.pi)


def test_cache(tmp_path):
    cache = OracleCache(tmp_path)
    calls = []

    def compute():
        calls.append(1)
        return {"F": 1.5}

    key = {"model": "x", "G": 10}
    assert cache.get_or_compute(key, compute) == {"F": 1.5}
    assert cache.get_or_compute(key, compute) == {"F": 1.5}
    assert len(calls) == 1
