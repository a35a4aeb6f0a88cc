import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfglab.data import (DataModel, bump_phi1, discrete_convexity_check, discrete_derivatives_U0,
                         displacement_modulus, eval_U0, fd_hessian, fourier_monotonicity, grad_w_U0)
from mfglab.errors import InvalidInputError, ModelError, ResolutionError
from mfglab.functions import Gaussian, Quadratic, SmoothFunction, Zero
from mfglab.measures import EmpiricalMeasure, WeightedMeasure, classical_interpolate, displacement_interpolate
from mfglab.model import AuditRegion

from oracles import central_diff, double_sum_U0

gauss = Gaussian(1.0, 1.0)


def test_eval_examples():
    assert eval_U0(DataModel(2, Quadratic(1.0)), [[1.0, 0.0], [-1.0, 0.0]]) == pytest.approx(0.5)
    assert eval_U0(DataModel(1, None, gauss), [[0.0]]) == pytest.approx(0.5)
    assert eval_U0(DataModel(2, None, gauss), [[0.0, 0.0], [0.6, 0.8]]) == pytest.approx(0.25 * (1 + np.exp(-1)))


def test_measure_and_restriction_agree_with_double_sum(rng):
    data = DataModel(2, Quadratic(2.0), Gaussian(0.7, 1.2))
    pts = rng.standard_normal((5, 2))
    ref = double_sum_U0(lambda q: data.phi.value(q), lambda q: data.phi1.value(q), pts)
    assert eval_U0(data, pts) == pytest.approx(ref, rel=1e-14)
    assert data.U0.value(pts) == pytest.approx(ref, rel=1e-14)
    w = rng.dirichlet(np.ones(5))
    ref_w = sum(w[i] * data.phi.value(pts[i]) for i in range(5))
    ref_w += 0.5 * sum(w[i] * w[j] * data.phi1.value(pts[i] - pts[j]) for i in range(5) for j in range(5))
    assert eval_U0(data, WeightedMeasure(pts, w)) == pytest.approx(ref_w, rel=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(5)))
def test_permutation_invariance(perm):
    data = DataModel(1, Quadratic(1.0), gauss)
    pts = np.linspace(-1, 1, 5)[:, None] ** 3
    assert eval_U0(data, pts[list(perm)]) == eval_U0(data, pts) or \
        abs(eval_U0(data, pts[list(perm)]) - eval_U0(data, pts)) < 1e-15


def test_wasserstein_gradient_examples(rng):
    q = np.array([0.3, -0.7])
    assert np.allclose(grad_w_U0(DataModel(2, Quadratic(1.0)), rng.standard_normal((3, 2)), q), q)
    assert np.allclose(grad_w_U0(DataModel(2, None, gauss), [q], q), 0.0)


def test_lift_identity(rng):
    data = DataModel(2, Quadratic(2.0), Gaussian(0.7, 1.2))
    pts = rng.standard_normal((4, 2))
    m = len(pts)
    G = data.U0.grad(pts)
    for i in range(m):
        assert np.allclose(grad_w_U0(data, pts, pts[i]), m * G[i], atol=1e-12)
    fd = central_diff(data.U0.value, pts, 1e-6).reshape(m, 2)
    assert np.allclose(m * fd, m * G, atol=1e-6)


@pytest.mark.parametrize("d", [1, 2])
def test_discrete_hessian_and_third_vs_finite_differences(d, rng):
    data = DataModel(d, Quadratic(2.0), Gaussian(0.7, 1.2))
    m = 4
    q = rng.standard_normal((m, d))
    out = discrete_derivatives_U0(data, q, 3)
    H = central_diff(lambda x: data.U0.grad(x), q, 1e-5).reshape(m, d, m, d)
    assert np.allclose(out["hess"], np.transpose(H, (2, 3, 0, 1)), atol=1e-8)
    T = central_diff(lambda x: data.U0.hess(x), q, 1e-5).reshape((m, d) * 3)
    assert np.allclose(out["third"], np.transpose(T, (2, 3, 4, 5, 0, 1)), atol=1e-8)


def test_off_diagonal_block_two_particles(rng):
    data = DataModel(2, None, gauss)
    q = rng.standard_normal((2, 2))
    block = data.U0.hess(q)[0, :, 1, :]
    assert np.allclose(block, -gauss.hess(q[0] - q[1]) / 4, atol=1e-15)
    fd = central_diff(lambda x: data.U0.grad(x)[0], q, 1e-5).reshape(2, 2, 2)[1].T
    assert np.allclose(block, fd, atol=1e-6)


def test_no_interaction_means_block_diagonal(rng):
    H = DataModel(2, Quadratic(3.0)).U0.hess(rng.standard_normal((4, 2)))
    for i in range(4):
        for j in range(4):
            if i != j:
                assert np.all(H[i, :, j, :] == 0.0)


def test_distinct_third_blocks_vanish(rng):
    T = DataModel(1, Quadratic(1.0), gauss).U0.third(rng.standard_normal((4, 1)))
    assert T[0, 0, 1, 0, 2, 0] == 0.0


def test_block_magnitudes_scale_with_m():
    data = DataModel(1, Quadratic(1.0), gauss)
    rng = np.random.default_rng(0)
    cloud = rng.uniform(-1, 1, (32, 1))
    ms = [4, 8, 16, 32]
    diag, off = [], []
    for m in ms:
        H = data.U0.hess(cloud[:m])
        H2 = H.reshape(m, m)
        diag.append(np.abs(np.diag(H2)).max())
        off.append(np.abs(H2 - np.diag(np.diag(H2))).max())
    assert np.polyfit(np.log(ms), np.log(diag), 1)[0] == pytest.approx(-1.0, abs=0.35)
    assert np.polyfit(np.log(ms), np.log(off), 1)[0] == pytest.approx(-2.0, abs=0.35)


def test_pointwise_particle_derivative(rng):
    data = DataModel(2, Quadratic(1.0), Gaussian(0.8, 1.1))
    q = rng.standard_normal((3, 2))
    q0 = rng.standard_normal(2)
    out = discrete_derivatives_U0(data, q, 1, q0=q0)
    fd = central_diff(lambda x: data.U0.pointwise(q0, x), q, 1e-6).reshape(3, 2)
    assert np.allclose(out["pointwise_particle_grad"], fd, atol=1e-8)
    with pytest.raises(InvalidInputError):
        discrete_derivatives_U0(data, q, 4)


def test_fourier_certificates():
    g = fourier_monotonicity(DataModel(1, None, gauss))
    assert g.verdict and g.to_dict()["verdict"] == "pass" and g.witness >= -1e-8
    b = fourier_monotonicity(DataModel(1, None, bump_phi1(1.0, 2.0)))
    assert not b.verdict and b.witness < 0
    z = fourier_monotonicity(DataModel(1))
    assert z.verdict and z.witness == 0.0
    b2 = fourier_monotonicity(DataModel(2, None, bump_phi1(1.0, 2.0)))
    assert not b2.verdict


def test_fourier_transform_of_gaussian_is_gaussian():
    from mfglab.data import fourier_transform_grid
    xi, ft = fourier_transform_grid(gauss, 1, 8.0, 256)
    assert np.allclose(ft, np.sqrt(np.pi) * np.exp(-np.pi**2 * xi**2), atol=1e-12)


def test_fourier_grid_too_small():
    with pytest.raises(ResolutionError):
        fourier_monotonicity(DataModel(1, None, Gaussian(1.0, 3.0)), half_width=2.0)


def test_displacement_modulus_examples():
    c = displacement_modulus(DataModel(1, Quadratic(4.0), lam1=-1.0))
    assert c.verdict and c.witness == 2.0
    assert not displacement_modulus(DataModel(1, Quadratic(1.0), lam1=1.0)).verdict
    assert displacement_modulus(DataModel(1, Quadratic(3.0))).witness == 3.0


def test_bump_modulus_estimate():
    lam1 = DataModel(1, None, bump_phi1(1.0, 2.0)).lam1
    assert lam1 == pytest.approx(-10 * np.sqrt(3) / 3, abs=5e-3)


def test_convexity_check_examples():
    data = DataModel(1, Quadratic(1.0))
    for m in (1, 3, 5):
        rep = discrete_convexity_check(data.U0.value, m, 1.0, AuditRegion(1.0, 3, 0))
        assert rep.metrics["min_eigenvalue"] == pytest.approx(1.0 / m, abs=1e-6)
        assert rep.passed
    conv = DataModel(2, Quadratic(3.0), Gaussian(0.5, 1.0), convex=True)
    rep = discrete_convexity_check(conv.U0.value, 3, 0.0, AuditRegion(1.0, 3, 0), d=2, hessian=conv.U0.hess)
    assert rep.passed


def test_bump_interaction_with_positive_modulus():
    data = DataModel(1, Quadratic(12.0), bump_phi1(1.0, 2.0))
    cert = displacement_modulus(data)
    assert cert.verdict
    for m in (2, 4, 8):
        rep = discrete_convexity_check(data.U0.value, m, cert.witness, AuditRegion(1.5, 20, m),
                                       hessian=data.U0.hess)
        assert rep.passed, rep.metrics


def test_displacement_convexity_along_geodesics(rng):
    data = DataModel(1, Quadratic(12.0), bump_phi1(1.0, 2.0))
    kappa = displacement_modulus(data).witness
    mu = EmpiricalMeasure(rng.uniform(-2, 2, (5, 1)))
    nu = EmpiricalMeasure(rng.uniform(-2, 2, (5, 1)))
    from mfglab.measures import w2_distance
    w, c = w2_distance(mu, nu)
    ts = np.linspace(0, 1, 41)
    vals = np.array([eval_U0(data, displacement_interpolate(mu, nu, t, c)) - 0.5 * kappa * t * (1 - t) * w * w
                     for t in ts])
    assert np.diff(vals, 2).min() >= -1e-7


def test_bump_data_not_classically_convex():
    data = DataModel(1, Quadratic(12.0), bump_phi1(1.0, 2.0))
    assert displacement_modulus(data).verdict
    # bump(1.3) > 1/sqrt(2), so the kernel matrix on {0, 1.3, 2.6} has the negative direction (1, -2, 1)
    mu, nu = EmpiricalMeasure([[1.3]]), EmpiricalMeasure([[0.0], [2.6]])
    ts = np.linspace(0, 1, 41)
    vals = np.array([eval_U0(data, classical_interpolate(mu, nu, t)) for t in ts])
    assert np.diff(vals, 2).max() < 0


def test_validation():
    class Odd(SmoothFunction):
        name = "odd"
        def value(self, q):
            return q[..., 0]
    with pytest.raises(ModelError):
        DataModel(1, None, Odd())
    with pytest.raises(ModelError):
        DataModel(1, Quadratic(0.1), Gaussian(1.0, 1.0), convex=True)
    with pytest.raises(InvalidInputError):
        DataModel.from_dict({"phi": None, "extra": 1}, 1)
    with pytest.raises(InvalidInputError):
        bump_phi1(2.0, 1.0)


def test_fd_hessian_of_quadratic():
    H = fd_hessian(lambda x: x @ np.array([[2.0, 1.0], [1.0, 3.0]]) @ x / 2, np.array([0.3, -0.2]))
    assert np.allclose(H, [[2.0, 1.0], [1.0, 3.0]], atol=1e-8)


def test_data_dict_round_trip():
    data = DataModel(2, Quadratic(4.0), gauss, Quadratic(1.0), Gaussian(0.2, 1.0), f_shift=0.5, convex=True)
    again = DataModel.from_dict(data.to_dict(), 2)
    q = np.array([[0.1, 0.2], [0.5, -0.4]])
    assert again.U0.value(q) == data.U0.value(q) and again.F.value(q) == data.F.value(q)
