import numpy as np
import pytest
from scipy.integrate import simpson

from mfglab.data import DataModel
from mfglab.errors import FlowBlowUpError, InvalidInputError
from mfglab.flow import (BlockSystemSpec, TARGETS, block_ode_scaling, block_ode_study, block_record_json,
                         default_steps, euler_lagrange_residual, integrate_forward, integrate_phase, invert_flow,
                         jacobian_determinant, solve_bvp, variational_integrate)
from mfglab.functions import CosineRidge, Gaussian, Quadratic, SoftNorm
from mfglab.model import HamiltonianModel
from mfglab.value import running_cost

from oracles import central_diff


@pytest.fixture
def convex_2d():
    model = HamiltonianModel(2, [[1.2, 0.1], [0.1, 0.8]], CosineRidge(0.2))
    data = DataModel(2, Quadratic(3.0), Gaussian(0.3, 1.0), Quadratic(0.5), Gaussian(0.2, 1.0), convex=True)
    return model, data


def test_null_data_is_a_fixed_point(rng):
    z = rng.standard_normal((3, 2))
    tr = integrate_forward(HamiltonianModel(2), DataModel(2), z, 1.0)
    assert np.all(tr.xi == z) and np.all(tr.eta == 0.0)


def test_quadratic_closed_form(free_model, quadratic_data, rng):
    z = rng.standard_normal((4, 1))
    tr = integrate_forward(free_model, quadratic_data, z, 1.0)
    s = tr.times[:, None, None]
    assert np.allclose(tr.xi, z * (1 + s), atol=1e-12)
    assert np.allclose(tr.eta, z / 4, atol=1e-14)
    assert np.allclose(tr.xi[-1], 2 * z, atol=1e-8)
    assert tr.times[0] == 0.0 and tr.times[-1] == 1.0 and np.all(np.diff(tr.times) > 0)


def test_rk4_order():
    # attracting potential makes the flow genuinely nonlinear in time: xi'' = -k xi
    model = HamiltonianModel(1, 1.0, Quadratic(-1.0))
    data = DataModel(1, Quadratic(0.5))
    z = np.array([[1.0]])
    exact = lambda s: np.cos(s) + 0.5 * np.sin(s)  # xi(0) = 1, xi'(0) = lam z
    e1 = abs(integrate_forward(model, data, z, 1.0, steps=16).xi[-1, 0, 0] - exact(1.0))
    e2 = abs(integrate_forward(model, data, z, 1.0, steps=32).xi[-1, 0, 0] - exact(1.0))
    assert 13 < e1 / e2 < 19


def test_initial_momentum(convex_2d, rng):
    model, data = convex_2d
    z = rng.standard_normal((3, 2))
    tr = integrate_forward(model, data, z, 0.5)
    assert np.allclose(tr.eta[0], data.U0.grad(z), atol=0)


def test_variational_quadratic_closed_form(free_model, quadratic_data):
    z = np.array([[0.3], [-1.0], [0.5]])
    X, Y = variational_integrate(free_model, quadratic_data, z, 0.7)
    assert np.allclose(X.reshape(3, 3), 1.7 * np.eye(3), atol=1e-12)
    Xj, _ = variational_integrate(free_model, quadratic_data, z, 0.7, j=1)
    assert np.allclose(Xj.reshape(3, 1), [[0], [1.7], [0]], atol=1e-12)


def test_variational_matches_finite_differences(convex_2d, rng):
    model, data = convex_2d
    z = rng.standard_normal((3, 2))
    X, Y = variational_integrate(model, data, z, 0.8)
    fx = lambda zz: integrate_forward(model, data, zz, 0.8).xi[-1]
    fy = lambda zz: integrate_forward(model, data, zz, 0.8).eta[-1]
    FX = central_diff(fx, z, 1e-5).reshape(3, 2, 3, 2)
    FY = central_diff(fy, z, 1e-5).reshape(3, 2, 3, 2)
    assert np.allclose(X, np.transpose(FX, (2, 3, 0, 1)), atol=1e-5)
    assert np.allclose(Y, np.transpose(FY, (2, 3, 0, 1)), atol=1e-5)


def test_eta_jacobian_scaling_with_m():
    model = HamiltonianModel(1)
    data = DataModel(1, Quadratic(2.0), Gaussian(1.0, 1.0))
    cloud = np.random.default_rng(0).uniform(-1, 1, (32, 1))
    ms, diag, off = [4, 8, 16, 32], [], []
    for m in ms:
        _, Y = variational_integrate(model, data, cloud[:m], 0.5)
        Y = Y.reshape(m, m)
        diag.append(np.abs(np.diag(Y)).max())
        off.append(np.abs(Y - np.diag(np.diag(Y))).max())
    assert np.polyfit(np.log(ms), np.log(diag), 1)[0] == pytest.approx(-1, abs=0.35)
    assert np.polyfit(np.log(ms), np.log(off), 1)[0] == pytest.approx(-2, abs=0.35)


def test_jacobian_determinant_examples(free_model, quadratic_data, convex_2d, rng):
    ident = jacobian_determinant(HamiltonianModel(2), DataModel(2), rng.standard_normal((2, 2)), 1.0)
    assert np.allclose(ident["det_direct"], 1.0)
    q = jacobian_determinant(free_model, quadratic_data, [[0.4]], 1.0)
    assert q["det_direct"][-1] == pytest.approx(2.0, abs=1e-12)
    model, data = convex_2d
    res = jacobian_determinant(model, data, rng.standard_normal((4, 2)), 1.0)
    assert res["agree"] and res["max_rel_diff"] < 1e-4 and res["min_det"] > 0


def test_invert_flow(free_model, quadratic_data, convex_2d, rng):
    q = rng.standard_normal((3, 1))
    assert np.array_equal(invert_flow(free_model, quadratic_data, q, 0.0), q)
    assert np.allclose(invert_flow(free_model, quadratic_data, q, 0.6), q / 1.6, atol=1e-8)
    model, data = convex_2d
    for _ in range(3):
        q = rng.standard_normal((4, 2)) * 1.5
        z = invert_flow(model, data, q, 1.0)
        assert np.linalg.norm(integrate_forward(model, data, z, 1.0).xi[-1] - q) <= 1e-7


def test_solve_bvp(free_model, quadratic_data, convex_2d, rng):
    q = rng.standard_normal((2, 1))
    tr = solve_bvp(free_model, quadratic_data, q, 0.5)
    s = tr.times[:, None, None]
    assert np.allclose(tr.xi, q * (1 + s) / 1.5, atol=1e-10)
    tr0 = solve_bvp(free_model, quadratic_data, q, 0.0)
    assert np.array_equal(tr0.xi[-1], q)
    model, data = convex_2d
    tr = solve_bvp(model, data, rng.standard_normal((3, 2)), 0.8)
    assert euler_lagrange_residual(model, data, tr) < 1e-5


def test_semigroup(convex_2d, rng):
    model, data = convex_2d
    z = rng.standard_normal((3, 2))
    full = integrate_forward(model, data, z, 1.0, steps=256)
    half = integrate_forward(model, data, z, 0.5, steps=128)
    rest = integrate_phase(model, data, half.xi[-1], half.eta[-1], 0.5, steps=128)
    assert np.allclose(rest.xi[-1], full.xi[-1], atol=1e-12)
    assert np.allclose(rest.eta[-1], full.eta[-1], atol=1e-12)


def test_energy_conservation(rng):
    model = HamiltonianModel(2, [[1.3, 0.2], [0.2, 0.9]])
    data = DataModel(2, Quadratic(1.0), Gaussian(0.5, 1.0))
    z = rng.standard_normal((4, 2))
    tr = integrate_forward(model, data, z, 2.0)
    m = 4
    energy = model.H(tr.xi, m * tr.eta).sum(axis=-1) / m
    assert np.abs(energy - energy[0]).max() < 2e-7


def test_growth_bound(convex_2d, rng):
    model, data = convex_2d
    z = rng.standard_normal((3, 2))
    tr = integrate_forward(model, data, z, 1.0)
    norm = np.sqrt(np.sum(tr.xi**2, axis=(1, 2)) + np.sum(tr.eta**2, axis=(1, 2))) + 1
    rate = np.log(norm / norm[0])[1:] / tr.times[1:]
    assert np.isfinite(rate).all() and rate.max() < 5.0


def test_permutation_equivariance(convex_2d, rng):
    model, data = convex_2d
    z = rng.standard_normal((4, 2))
    perm = [2, 0, 3, 1]
    a = integrate_forward(model, data, z, 0.7)
    b = integrate_forward(model, data, z[perm], 0.7)
    assert np.allclose(a.xi[:, perm], b.xi, atol=1e-14)


def test_bvp_minimizes_discrete_action(convex_2d, rng):
    model, data = convex_2d
    q = rng.standard_normal((2, 2))
    tr = solve_bvp(model, data, q, 0.6)
    vel = np.gradient(tr.xi, tr.times, axis=0, edge_order=2)
    s = tr.times[:, None, None]
    ref = data.U0.value(tr.xi[0]) + simpson(running_cost(model, data, tr.xi, vel), x=tr.times)
    for _ in range(50):
        c = rng.standard_normal((3, 2, 2)) * 0.05
        bump = (0.6 - s) * (c[0] + c[1] * s + c[2] * s * s)
        dbump = -(c[0] + c[1] * s + c[2] * s * s) + (0.6 - s) * (c[1] + 2 * c[2] * s)
        path = tr.xi + bump
        v = vel + dbump
        act = data.U0.value(path[0]) + simpson(running_cost(model, data, path, v), x=tr.times)
        assert act - ref >= -1e-8


def test_blowup_detected():
    model = HamiltonianModel(1, 1.0, Quadratic(400.0))  # H = p^2/2 - 200 q^2: exponential growth
    with pytest.raises(FlowBlowUpError):
        integrate_forward(model, DataModel(1, Quadratic(1.0)), [[1.0]], 3.0, steps=64)


def test_default_steps():
    assert default_steps(1.0) == 256 and default_steps(0.001) == 2


@pytest.mark.parametrize("case", ["1", "2", "kernel"])
def test_block_ode_exponents(case):
    st = block_ode_study(case, (8, 32, 128), 1.0, (0, 1))
    for name, c in st["classes"].items():
        assert c["pass"], (name, c["slope"], c["target"])
    assert st["max_expm_vs_rk4"] < 1e-8
    assert set(st["classes"]) == set(TARGETS[case])


def test_block_record_json():
    rec = block_ode_scaling(BlockSystemSpec(8, "kernel", 1.0))
    text = block_record_json(rec)
    assert '"case": "kernel"' in text and '"m": 8' in text


@pytest.mark.parametrize("kw", [dict(m=1), dict(m=4, case="3"), dict(m=4, case="2", indices=(1, 1)),
                                dict(m=4, case="1", indices=(7,))])
def test_block_spec_validation(kw):
    with pytest.raises(InvalidInputError):
        BlockSystemSpec(**kw)
