"""m-particle Hamiltonian flow, its linearization, inversion and block-ODE scaling checks.

State per particle: position xi_i and scaled momentum eta_i, with

    xi_i'  = D_pH(xi_i, m eta_i)
    eta_i' = -(1/m) D_qH(xi_i, m eta_i) + D_{q_i}F(xi)
    xi(0) = z,  eta(0) = D U0(z).

Arrays carry a leading batch axis internally so that many initial
configurations are integrated in one pass.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .data import DataModel
from .errors import ConjugatePointError, FlowBlowUpError, InvalidInputError, InversionError
from .model import HamiltonianModel

STEPS_PER_UNIT = 256
BLOWUP = 1e12


def default_steps(t: float) -> int:
    return max(2, int(math.ceil(STEPS_PER_UNIT * t)))


@dataclass
class PhaseTrajectory:
    times: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    dxi: np.ndarray | None = None  # D_z xi at the final time, (m, d, m, d)
    deta: np.ndarray | None = None
    z: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.xi.shape[1]

    @property
    def t(self) -> float:
        return float(self.times[-1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("s,particle,coord,xi,eta\r\n")
        n, m, d = self.xi.shape
        for k in range(n):
            s = format(float(self.times[k]), ".17g")
            for i in range(m):
                for a in range(d):
                    buf.write(f"{s},{i},{a},{self.xi[k, i, a]:.17g},{self.eta[k, i, a]:.17g}\r\n")
        return buf.getvalue()


@dataclass
class _BatchResult:
    times: np.ndarray
    xi: np.ndarray  # (n+1, B, m, d)
    eta: np.ndarray
    X: np.ndarray | None  # (B, m, d, K) at final time
    Y: np.ndarray | None
    det: np.ndarray | None  # (n+1, B)
    logdet_jacobi: np.ndarray | None  # (n+1, B)


def _field(model: HamiltonianModel, data: DataModel, xi, eta, X, Y, want_trace: bool):
    m = xi.shape[-2]
    p = m * eta
    dxi = model.dH_dp(xi, p)
    deta = -model.dH_dq(xi, p) / m
    if not data.F.is_zero:
        deta = deta + data.F.grad(xi)
    if X is None:
        return dxi, deta, None, None, None
    Hqq = model.d2H_qq(xi, p)
    if model.constant_kinetic:
        Hpp = model.Ainv
        dX = m * np.einsum("ac,...icK->...iaK", Hpp, Y)
    else:
        Hpp = model.d2H_pp(xi, p)
        dX = m * np.einsum("...iac,...icK->...iaK", Hpp, Y)
    dY = -np.einsum("...iac,...icK->...iaK", Hqq, X) / m
    Hqp = None
    if not model.separable:
        Hqp = model.d2H_qp(xi, p)
        dX += np.einsum("...iac,...icK->...iaK", Hqp, X)
        dY -= np.einsum("...ica,...icK->...iaK", Hqp, Y)
    if not data.F.is_zero:
        dY += np.einsum("...iajc,...jcK->...iaK", data.F.hess(xi), X)
    tr = None
    if want_trace:
        B = xi.shape[:-2]
        d = xi.shape[-1]
        n = m * d
        Xm = X.reshape(B + (n, n))
        Ym = Y.reshape(B + (n, n))
        # W = Y X^{-1}, the Hessian of the value along the characteristic
        W = np.swapaxes(np.linalg.solve(np.swapaxes(Xm, -1, -2), np.swapaxes(Ym, -1, -2)), -1, -2)
        W = W.reshape(B + (m, d, m, d))
        idx = np.arange(m)
        Wd = np.moveaxis(W[..., idx, :, idx, :], 0, -3)  # (..., m, d, d)
        if model.constant_kinetic:
            tr = m * np.einsum("ab,...iba->...", Hpp, Wd)
        else:
            tr = m * np.einsum("...iab,...iba->...", Hpp, Wd)
        if Hqp is not None:
            tr = tr + np.einsum("...iaa->...", Hqp)
    return dxi, deta, dX, dY, tr


def _check(state, s):
    for a in state:
        if a is not None and (not np.all(np.isfinite(a)) or np.abs(a).max() > BLOWUP):
            raise FlowBlowUpError(s)


def integrate_batch(model: HamiltonianModel, data: DataModel, z, t: float, steps: int | None = None,
                    variational: bool = False, columns=None, jacobi: bool = False,
                    eta0=None) -> _BatchResult:
    """RK4 for a batch of initial configurations z of shape (B, m, d).

    `columns` restricts the variational solve to selected flat coordinates j (D_{z_j}).
    `eta0` overrides the initial momenta (raw phase state).
    """
    z = np.asarray(z, dtype=float)
    if z.ndim != 3:
        raise InvalidInputError("batch must have shape (B, m, d)")
    if t < 0:
        raise InvalidInputError("t must be nonnegative")
    steps = default_steps(t) if steps is None else int(steps)
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    Bn, m, d = z.shape
    n = m * d
    h = t / steps
    xi = z.copy()
    eta = data.U0.grad(z) if eta0 is None else np.array(eta0, dtype=float)
    X = Y = None
    jacobi = jacobi and variational
    if variational:
        cols = np.arange(n) if columns is None else np.asarray(columns)
        if jacobi and len(cols) != n:
            raise InvalidInputError("Jacobi check needs the full Jacobian")
        X = np.zeros((Bn, n, len(cols)))
        X[:, cols, np.arange(len(cols))] = 1.0
        Y = data.U0.hess(z).reshape(Bn, n, n)[:, :, cols]
        X = X.reshape(Bn, m, d, len(cols))
        Y = Y.reshape(Bn, m, d, len(cols))
    xs = np.empty((steps + 1, Bn, m, d))
    es = np.empty((steps + 1, Bn, m, d))
    xs[0], es[0] = xi, eta
    det = logj = None
    if jacobi:
        det = np.empty((steps + 1, Bn))
        logj = np.empty((steps + 1, Bn))
        det[0] = np.linalg.det(X.reshape(Bn, n, n))
        logj[0] = 0.0
        tau = np.zeros(Bn)
    _check((xi, eta), 0.0)
    for k in range(steps):
        k1 = _field(model, data, xi, eta, X, Y, jacobi)
        st2 = [None if a is None else a + 0.5 * h * b for a, b in zip((xi, eta, X, Y), k1[:4])]
        k2 = _field(model, data, *st2, jacobi)
        st3 = [None if a is None else a + 0.5 * h * b for a, b in zip((xi, eta, X, Y), k2[:4])]
        k3 = _field(model, data, *st3, jacobi)
        st4 = [None if a is None else a + h * b for a, b in zip((xi, eta, X, Y), k3[:4])]
        k4 = _field(model, data, *st4, jacobi)
        new = []
        for j, a in enumerate((xi, eta, X, Y)):
            if a is None:
                new.append(None)
            else:
                new.append(a + (h / 6.0) * (k1[j] + 2 * k2[j] + 2 * k3[j] + k4[j]))
        xi, eta, X, Y = new
        s = (k + 1) * h
        _check((xi, eta, X, Y), s)
        xs[k + 1], es[k + 1] = xi, eta
        if jacobi:
            tau = tau + (h / 6.0) * (k1[4] + 2 * k2[4] + 2 * k3[4] + k4[4])
            logj[k + 1] = tau
            det[k + 1] = np.linalg.det(X.reshape(Bn, n, n))
    times = np.linspace(0.0, t, steps + 1)
    return _BatchResult(times, xs, es, X, Y, det, logj)


def integrate_forward(model: HamiltonianModel, data: DataModel, z, t: float, steps: int | None = None,
                      variational: bool = False) -> PhaseTrajectory:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    r = integrate_batch(model, data, z[None], t, steps, variational=variational)
    m, d = z.shape
    dxi = deta = None
    if variational:
        dxi = r.X[0].reshape(m, d, m, d)
        deta = r.Y[0].reshape(m, d, m, d)
    return PhaseTrajectory(r.times, r.xi[:, 0], r.eta[:, 0], dxi, deta, z.copy())


def integrate_phase(model: HamiltonianModel, data: DataModel, xi0, eta0, t: float,
                    steps: int | None = None) -> PhaseTrajectory:
    """Integrate from a raw phase state (no initial-momentum constraint)."""
    xi0 = np.atleast_2d(np.asarray(xi0, dtype=float))
    r = integrate_batch(model, data, xi0[None], t, steps, eta0=np.asarray(eta0, dtype=float)[None])
    return PhaseTrajectory(r.times, r.xi[:, 0], r.eta[:, 0], z=xi0.copy())


def variational_integrate(model: HamiltonianModel, data: DataModel, z, t: float, steps: int | None = None,
                          j: int | None = None):
    """D_z xi(t), D_z eta(t) as (m, d, m, d) arrays, or the (m, d, d) columns for particle j."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    m, d = z.shape
    cols = None if j is None else np.arange(j * d, (j + 1) * d)
    r = integrate_batch(model, data, z[None], t, steps, variational=True, columns=cols)
    if j is None:
        return r.X[0].reshape(m, d, m, d), r.Y[0].reshape(m, d, m, d)
    return r.X[0], r.Y[0]


def jacobian_determinant(model: HamiltonianModel, data: DataModel, z, t: float, steps: int | None = None,
                         tol: float = 1e-4) -> dict:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    r = integrate_batch(model, data, z[None], t, steps, variational=True, jacobi=True)
    det = r.det[:, 0]
    jac = np.exp(r.logdet_jacobi[:, 0])
    bad = np.nonzero(det <= 0)[0]
    if bad.size:
        raise ConjugatePointError(r.times[bad[0]])
    rel = np.abs(det - jac) / np.abs(jac)
    return {"times": r.times, "det_direct": det, "det_jacobi": jac, "max_rel_diff": float(rel.max()),
            "agree": bool(rel.max() <= tol), "min_det": float(det.min())}


def _norm(a):
    return np.sqrt(np.sum(a * a, axis=(-2, -1)))


def invert_batch(model: HamiltonianModel, data: DataModel, q, t: float, steps: int | None = None,
                 max_iter: int = 60, target: float = 1e-13, z0=None):
    """Newton solve of xi(t, z) = q for a batch q of shape (B, m, d).

    Returns (z, result) where result is the integration at the returned z, including
    the full variational Jacobian.  Iterates until the residual is below
    target*(1+|q|) or stops improving; fails if it is then above 1e-8*(1+|q|).
    The initial guess is z = q unless `z0` is given.
    """
    q = np.asarray(q, dtype=float)
    Bn, m, d = q.shape
    n = m * d
    qn = 1.0 + _norm(q)
    contract = 1e-8 * qn
    goal = target * qn
    z = q.copy() if z0 is None else np.array(z0, dtype=float)
    if t == 0:
        z = q.copy()
        return z, integrate_batch(model, data, z, 0.0, 1, variational=True)
    res_int = integrate_batch(model, data, z, t, steps, variational=True)
    X = res_int.X.copy()
    xi_t = res_int.xi[-1].copy()
    keep = {"xi": res_int.xi.copy(), "eta": res_int.eta.copy(), "X": res_int.X.copy(), "Y": res_int.Y.copy()}
    r = xi_t - q
    rn = _norm(r)
    active = rn > goal
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        delta = np.linalg.solve(X[idx].reshape(len(idx), n, n), r[idx].reshape(len(idx), n, 1)).reshape(len(idx), m, d)
        alpha = np.ones(len(idx))
        pending = np.ones(len(idx), dtype=bool)
        for _halve in range(31):
            sub = np.nonzero(pending)[0]
            if not sub.size:
                break
            gi = idx[sub]
            trial = z[gi] - alpha[sub, None, None] * delta[sub]
            ti = integrate_batch(model, data, trial, t, steps, variational=True)
            tr = ti.xi[-1] - q[gi]
            tn = _norm(tr)
            ok = tn < rn[gi]
            for a, g in enumerate(gi):
                if ok[a]:
                    z[g] = trial[a]
                    r[g] = tr[a]
                    rn[g] = tn[a]
                    X[g] = ti.X[a]
                    keep["xi"][:, g] = ti.xi[:, a]
                    keep["eta"][:, g] = ti.eta[:, a]
                    keep["X"][g] = ti.X[a]
                    keep["Y"][g] = ti.Y[a]
            pending[sub[ok]] = False
            alpha[sub[~ok]] *= 0.5
        stalled = idx[pending]
        for g in stalled:
            if rn[g] <= contract[g]:
                active[g] = False
                continue
            # relaxed fixed-point fallback
            trial = z[g] - 0.5 * r[g]
            ti = integrate_batch(model, data, trial[None], t, steps, variational=True)
            z[g] = trial
            r[g] = ti.xi[-1, 0] - q[g]
            rn[g] = _norm(r[g])
            X[g] = ti.X[0]
            keep["xi"][:, g] = ti.xi[:, 0]
            keep["eta"][:, g] = ti.eta[:, 0]
            keep["X"][g] = ti.X[0]
            keep["Y"][g] = ti.Y[0]
        active &= rn > goal
    if np.any(rn > contract):
        raise InversionError(float(rn.max()))
    out = _BatchResult(res_int.times, keep["xi"], keep["eta"], keep["X"], keep["Y"], None, None)
    return z, out


def invert_flow(model: HamiltonianModel, data: DataModel, q, t: float, steps: int | None = None) -> np.ndarray:
    q = np.atleast_2d(np.asarray(q, dtype=float))
    z, _ = invert_batch(model, data, q[None], t, steps)
    return z[0]


def solve_bvp(model: HamiltonianModel, data: DataModel, q, t: float, steps: int | None = None) -> PhaseTrajectory:
    """Characteristic ending at q at time t, with the variational Jacobian at the final time."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    m, d = q.shape
    z, r = invert_batch(model, data, q[None], t, steps)
    return PhaseTrajectory(r.times, r.xi[:, 0], r.eta[:, 0], r.X[0].reshape(m, d, m, d),
                           r.Y[0].reshape(m, d, m, d), z[0])


def euler_lagrange_residual(model: HamiltonianModel, data: DataModel, traj: PhaseTrajectory) -> float:
    """Max defect of the discrete Euler-Lagrange system along a stored trajectory.

    Checks eta = (1/m) D_vL(xi, xi') and eta' = (1/m) D_qL(xi, xi') + D F(xi), with time
    derivatives by fourth-order finite differences on the grid, plus eta(0) = D U0(xi(0)).
    """
    m = traj.m
    h = traj.times[1] - traj.times[0]

    def deriv(a):
        return (a[:-4] - 8 * a[1:-3] + 8 * a[3:-1] - a[4:]) / (12 * h)

    xi, eta = traj.xi, traj.eta
    v = deriv(xi)
    inner = xi[2:-2]
    mom = model.dL_dv(inner, v) / m
    force = model.dL_dq(inner, v) / m + data.F.grad(inner)
    r1 = np.abs(mom - eta[2:-2]).max()
    r2 = np.abs(deriv(eta) - force).max()
    r0 = np.abs(data.U0.grad(xi[0]) - eta[0]).max()
    return float(max(r0, r1, r2))


# block linear ODEs and their m-scaling

@dataclass(frozen=True)
class BlockSystemSpec:
    m: int
    case: str = "1"
    t: float = 1.0
    indices: tuple = (0,)

    def __post_init__(self):
        if self.m < 2:
            raise InvalidInputError("block system needs m >= 2")
        if self.case not in ("1", "2", "kernel"):
            raise InvalidInputError(f"unknown case {self.case!r}")
        need = {"1": 1, "2": 2, "kernel": 0}[self.case]
        if len(self.indices) < need or any(not 0 <= i < self.m for i in self.indices[:need]):
            raise InvalidInputError("indices out of range")
        if self.case == "2" and self.indices[0] == self.indices[1]:
            raise InvalidInputError("case 2 needs two distinct indices")


def block_matrix(m: int) -> np.ndarray:
    I = np.eye(m)
    B3 = np.full((m, m), 1.0 / m**2)
    np.fill_diagonal(B3, 1.0 / m)
    return np.block([[I, m * I], [B3, I]])


def _block_data(spec: BlockSystemSpec):
    m = spec.m
    if spec.case == "1":
        A1 = np.full(m, 1.0 / m)
        A2 = np.full(m, 1.0 / m**2)
        sel = list(spec.indices[:1])
        A1[sel] = 1.0
        A2[sel] = 1.0 / m
    else:
        A1 = np.full(m, 1.0 / m**2)
        A2 = np.full(m, 1.0 / m**3)
        sel = list(spec.indices[:2])
        A1[sel] = 1.0 / m
        A2[sel] = 1.0 / m**2
    return np.concatenate([A1, A2]), np.concatenate([np.zeros(m), A2]), sel


def _rk4_linear(B, x0, forcing, t, steps):
    h = t / steps
    x = x0.copy()
    f = lambda y: B @ y + forcing
    for _ in range(steps):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


TARGETS = {
    "1": {"X_sel": 0.0, "X_other": -1.0, "Y_sel": -1.0, "Y_other": -2.0},
    "2": {"X_sel": -1.0, "X_other": -2.0, "Y_sel": -2.0, "Y_other": -3.0},
    "kernel": {"X_diag": 0.0, "X_off": -1.0, "Y_diag": -1.0, "Y_off": -2.0},
}


def block_ode_scaling(spec: BlockSystemSpec, rk4_steps: int = 2000) -> dict:
    m = spec.m
    B = block_matrix(m)
    if spec.case == "kernel":
        B3 = B[m:, :m]
        S0 = np.vstack([np.eye(m), B3])
        sol = expm(spec.t * B) @ S0
        sol_rk = _rk4_linear(B, S0, 0.0, spec.t, rk4_steps)
        X, Y = sol[:m], sol[m:]
        off = ~np.eye(m, dtype=bool)
        groups = {"X_diag": np.abs(np.diag(X)).max(), "X_off": np.abs(X[off]).max(),
                  "Y_diag": np.abs(np.diag(Y)).max(), "Y_off": np.abs(Y[off]).max()}
    else:
        A, x0, sel = _block_data(spec)
        n = 2 * m
        aug = np.zeros((n + 1, n + 1))
        aug[:n, :n] = B
        aug[:n, n] = A
        sol = (expm(spec.t * aug) @ np.append(x0, 1.0))[:n]
        sol_rk = _rk4_linear(B, x0, A, spec.t, rk4_steps)
        X, Y = sol[:m], sol[m:]
        mask = np.zeros(m, dtype=bool)
        mask[sel] = True
        groups = {"X_sel": np.abs(X[mask]).max(), "X_other": np.abs(X[~mask]).max(),
                  "Y_sel": np.abs(Y[mask]).max(), "Y_other": np.abs(Y[~mask]).max()}
    return {"m": m, "case": spec.case, "t": spec.t,
            "groups": [{"class": k, "max_abs": float(v)} for k, v in groups.items()],
            "expm_vs_rk4": float(np.abs(sol - sol_rk).max())}


def fit_slope(ms, values) -> float:
    return float(np.polyfit(np.log(np.asarray(ms, dtype=float)), np.log(np.asarray(values, dtype=float)), 1)[0])


def block_ode_study(case: str, ms=(8, 32, 128), t: float = 1.0, indices=(0, 1), tol: float = 0.25) -> dict:
    records = [block_ode_scaling(BlockSystemSpec(m, case, t, tuple(indices))) for m in ms]
    classes = [g["class"] for g in records[0]["groups"]]
    out = {"case": case, "ms": list(ms), "records": records, "classes": {}}
    for c in classes:
        vals = [next(g["max_abs"] for g in r["groups"] if g["class"] == c) for r in records]
        slope = fit_slope(ms, vals)
        target = TARGETS[case][c]
        out["classes"][c] = {"values": vals, "slope": slope, "target": target, "pass": abs(slope - target) <= tol}
    out["max_expm_vs_rk4"] = max(r["expm_vs_rk4"] for r in records)
    return out


def block_record_json(record: dict) -> str:
    return json.dumps({k: record[k] for k in ("m", "case", "t", "groups")}, sort_keys=True)
