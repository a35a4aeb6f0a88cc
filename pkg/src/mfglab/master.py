"""Measure flow, the scalar master-equation solution u(t, q0, mu) and residual checks.

u(t, q0, mu) is the value of a single agent who ends at q0 at time t while the
population follows the frozen optimal path sigma_s of the m-particle problem:

    u = min over gamma with gamma_t = q0 of
        u0(gamma_0, sigma_0) + int_0^t [ L(gamma, gamma') + f(gamma, sigma_s) ] ds.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.optimize import brentq

from .data import DataModel
from .errors import InvalidInputError, InversionError, OptimizationError
from .flow import default_steps, invert_batch, PhaseTrajectory, _check
from .measures import EmpiricalMeasure
from .model import HamiltonianModel
from .value import _config, hessian_batch


@dataclass
class MeasurePath:
    times: np.ndarray
    measures: list
    trajectory: PhaseTrajectory

    @property
    def positions(self) -> np.ndarray:
        return self.trajectory.xi


@dataclass
class MasterSample:
    t: float
    q0: np.ndarray
    mu: np.ndarray
    u: float
    momentum: np.ndarray  # costate of the agent at time t
    path: np.ndarray | None = None  # agent positions on the time grid
    times: np.ndarray | None = None
    dq0u: np.ndarray | None = None
    phi1: np.ndarray | None = None  # (m, d), m D_{q_i} u
    dtu: float | None = None
    method: str = "shooting"
    extras: dict = field(default_factory=dict)


def measure_flow(model: HamiltonianModel, data: DataModel, mu, t: float, steps: int | None = None) -> MeasurePath:
    q = _config(mu)
    if t == 0:
        traj = PhaseTrajectory(np.zeros(1), q[None], data.U0.grad(q)[None], z=q)
        return MeasurePath(traj.times, [EmpiricalMeasure(q)], traj)
    z, r = invert_batch(model, data, q[None], t, steps)
    traj = PhaseTrajectory(r.times, r.xi[:, 0], r.eta[:, 0], z=z[0])
    return MeasurePath(r.times, [EmpiricalMeasure(x) for x in traj.xi], traj)


def _population(model, data, z, t, steps):
    """RK4 for the particle system from z (P, m, d), keeping the positions at every stage.

    stages[k, s] holds the positions at which RK4 stage s of step k evaluates the field,
    so an agent integrated against them reproduces a joint particle + agent RK4 exactly.
    """
    m = z.shape[-2]
    h = t / steps

    def field(xi, eta):
        p = m * eta
        deta = -model.dH_dq(xi, p) / m
        if not data.F.is_zero:
            deta = deta + data.F.grad(xi)
        return model.dH_dp(xi, p), deta

    xi, eta = z.copy(), data.U0.grad(z)
    stages = np.empty((steps, 4) + z.shape)
    xs = np.empty((steps + 1,) + z.shape)
    xs[0] = xi
    for k in range(steps):
        stages[k, 0] = xi
        a1, b1 = field(xi, eta)
        stages[k, 1] = xi + 0.5 * h * a1
        a2, b2 = field(stages[k, 1], eta + 0.5 * h * b1)
        stages[k, 2] = xi + 0.5 * h * a2
        a3, b3 = field(stages[k, 2], eta + 0.5 * h * b2)
        stages[k, 3] = xi + h * a3
        a4, b4 = field(stages[k, 3], eta + h * b3)
        xi = xi + (h / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4)
        eta = eta + (h / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4)
        _check((xi, eta), (k + 1) * h)
        xs[k + 1] = xi
    return {"times": np.linspace(0.0, t, steps + 1), "stages": stages, "xs": xs, "eta": eta}


def _agent_field(model, data, pos, S, P, Xa, Ya):
    dS = model.dH_dp(S, P)
    dP = -model.dH_dq(S, P)
    C = -model.d2H_qq(S, P)
    if not data.F.is_zero:
        dP = dP + data.F.pointwise_grad(S, pos)
        C = C + data.F.pointwise_hess(S, pos)
    dXa = np.einsum("ab,...bk->...ak", model.Ainv, Ya)
    dYa = np.einsum("...ab,...bk->...ak", C, Xa)
    return dS, dP, dXa, dYa


def _agent_run(model, data, pop, owner, y, t):
    """Agents starting at y (K, d) against population members owner (K,)."""
    stages = pop["stages"][:, :, owner]
    steps = stages.shape[0]
    h = t / steps
    K, d = y.shape
    x0 = pop["xs"][0, owner]
    state = [y.copy(), data.U0.pointwise_grad(y, x0),
             np.broadcast_to(np.eye(d), (K, d, d)).copy(), data.U0.pointwise_hess(y, x0)]
    Ss = np.empty((steps + 1, K, d))
    Ps = np.empty((steps + 1, K, d))
    Ss[0], Ps[0] = state[0], state[1]
    for k in range(steps):
        st = stages[k]
        k1 = _agent_field(model, data, st[0], *state)
        k2 = _agent_field(model, data, st[1], *[a + 0.5 * h * b for a, b in zip(state, k1)])
        k3 = _agent_field(model, data, st[2], *[a + 0.5 * h * b for a, b in zip(state, k2)])
        k4 = _agent_field(model, data, st[3], *[a + h * b for a, b in zip(state, k3)])
        state = [a + (h / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(state, k1, k2, k3, k4)]
        _check(state, (k + 1) * h)
        Ss[k + 1], Ps[k + 1] = state[0], state[1]
    return {"S": Ss, "P": Ps, "Xa": state[2]}


def _agent_action(model, data, pop, owner, S, P):
    xs = pop["xs"][:, owner]
    integrand = model.L(S, model.dH_dp(S, P))
    if not data.F.is_zero:
        integrand = integrand + data.F.pointwise(S, xs)
    return data.U0.pointwise(S[0], xs[0]) + simpson(integrand, x=pop["times"], axis=0)


def _shoot(model, data, pop, owner, q0, t, max_iter=60, target=1e-13, tol=1e-9):
    """Newton on the initial positions y so that S(t; y) = q0; returns y, run and a failure mask."""
    y = q0.copy()
    run = _agent_run(model, data, pop, owner, y, t)
    r = run["S"][-1] - q0
    rn = np.linalg.norm(r, axis=-1)
    scale = 1.0 + np.linalg.norm(q0, axis=-1)
    for _ in range(max_iter):
        active = rn > target * scale
        if not active.any():
            break
        delta = np.linalg.solve(run["Xa"], r[..., None])[..., 0]
        pending = active.copy()
        alpha = 1.0
        while pending.any() and alpha > 1e-9:
            trial = np.where(pending[:, None], y - alpha * delta, y)
            tr = _agent_run(model, data, pop, owner, trial, t)
            tres = tr["S"][-1] - q0
            tn = np.linalg.norm(tres, axis=-1)
            ok = pending & (tn < rn)
            y = np.where(ok[:, None], trial, y)
            r = np.where(ok[:, None], tres, r)
            rn = np.where(ok, tn, rn)
            run["S"] = np.where(ok[None, :, None], tr["S"], run["S"])
            run["P"] = np.where(ok[None, :, None], tr["P"], run["P"])
            run["Xa"] = np.where(ok[:, None, None], tr["Xa"], run["Xa"])
            pending &= ~ok
            alpha *= 0.5
        if pending[active].all():
            break
    return y, run, rn > tol * scale


def _direct_agent(model, data, times, xs, q0, t, nodes=64, tol=1e-7, max_iter=10_000):
    """Fallback: broken-line minimization for one agent against a stored population path xs."""
    N = nodes
    h = t / N
    node_t = np.linspace(0.0, t, N + 1)
    j = np.clip(np.searchsorted(times, node_t, side="right") - 1, 0, len(times) - 2)
    w = ((node_t - times[j]) / (times[j + 1] - times[j]))[:, None, None]
    pos = (1 - w) * xs[j] + w * xs[j + 1]
    A, Ainv = model.A, model.Ainv
    K = 2.0 * np.eye(N) - np.eye(N, k=1) - np.eye(N, k=-1)
    K[0, 0] = 1.0
    Kinv = np.linalg.inv(K)
    wts = np.ones(N + 1)
    wts[0] = wts[-1] = 0.5

    def pot(path):
        g = model.potential.value(path)
        if not data.F.is_zero:
            g = g + data.F.pointwise(path, pos)
        return g

    def action(x):
        path = np.concatenate([x, q0[None]])
        v = np.diff(path, axis=0) / h
        return (data.U0.pointwise(path[0], pos[0]) + 0.5 * h * np.einsum("ka,ab,kb->", v, A, v)
                + h * np.dot(wts, pot(path)))

    def grad(x):
        path = np.concatenate([x, q0[None]])
        Av = (np.diff(path, axis=0) / h) @ A
        g = -Av.copy()
        g[1:] += Av[:-1]
        gp = model.potential.grad(x)
        if not data.F.is_zero:
            gp = gp + data.F.pointwise_grad(x, pos[:-1])
        g += h * wts[:-1, None] * gp
        g[0] += data.U0.pointwise_grad(x[0], pos[0])
        return g

    x = np.repeat(q0[None], N, axis=0)
    f = action(x)
    for _ in range(max_iter):
        g = grad(x)
        if np.linalg.norm(g) <= tol:
            return float(f)
        p = h * (Kinv @ g) @ Ainv
        slope = float(np.sum(g * p))
        alpha = 1.0
        while True:
            xn = x - alpha * p
            fn = action(xn)
            if fn <= f - 1e-4 * alpha * slope or alpha < 1e-12:
                break
            alpha *= 0.5
        x, f = xn, fn
    raise OptimizationError(float(np.linalg.norm(grad(x))), max_iter)


def _master_eval(model, data, pop, owner, q0, t):
    """u(t, q0_k, sigma of population owner_k) for all k, with terminal momenta and paths."""
    y, run, failed = _shoot(model, data, pop, owner, q0, t)
    vals = _agent_action(model, data, pop, owner, run["S"], run["P"])
    mom = run["P"][-1].copy()
    method = np.array(["shooting"] * len(q0), dtype=object)
    for k in np.flatnonzero(failed):
        vals[k] = _direct_agent(model, data, pop["times"], pop["xs"][:, owner[k]], q0[k], t)
        mom[k] = np.nan
        method[k] = "direct"
    return vals, mom, run["S"], method


def _prepare(mu, q0, t):
    q = _config(mu)
    q0 = np.asarray(q0, dtype=float)
    q0 = q0.reshape(-1, q.shape[1]) if q0.ndim <= 1 else q0
    if q0.shape[-1] != q.shape[1]:
        raise InvalidInputError("q0 must have the dimension of mu")
    if t < 0:
        raise InvalidInputError("t must be nonnegative")
    return q, q0


def master_value(model: HamiltonianModel, data: DataModel, t: float, q0, mu, steps: int | None = None) -> MasterSample:
    q, q0s = _prepare(mu, q0, t)
    if q0s.shape[0] != 1:
        raise InvalidInputError("q0 must be a single point")
    if t == 0:
        return MasterSample(0.0, q0s[0], q, float(data.U0.pointwise(q0s[0], q)), data.U0.pointwise_grad(q0s[0], q))
    steps = default_steps(t) if steps is None else steps
    z, _ = invert_batch(model, data, q[None], t, steps)
    pop = _population(model, data, z, t, steps)
    vals, mom, S, method = _master_eval(model, data, pop, np.zeros(1, dtype=int), q0s, t)
    return MasterSample(t, q0s[0], q, float(vals[0]), mom[0], S[:, 0], pop["times"], method=method[0])


def master_gradient(model: HamiltonianModel, data: DataModel, t: float, q0, mu, steps: int | None = None,
                    rel_step: float = 1e-4, time_step: float = 1e-3) -> list[MasterSample]:
    """u with D_{q0}u, Phi1(q_i) = m D_{q_i}u and d_t u by central differences, at each row of q0.

    All evaluations share one batched population solve; a single point q0 gives a one-element list.
    """
    q, q0s = _prepare(mu, q0, t)
    if t <= 0:
        raise InvalidInputError("master_gradient needs t > 0")
    m, d = q.shape
    n = m * d
    K = q0s.shape[0]
    steps = default_steps(t) if steps is None else steps
    hj = np.repeat(rel_step * (1.0 + np.linalg.norm(q, axis=-1)), d)
    E = np.eye(n).reshape(n, m, d)
    qs = np.concatenate([q[None], q[None] + hj[:, None, None] * E, q[None] - hj[:, None, None] * E])
    z0, _ = invert_batch(model, data, q[None], t, steps)
    zs, _ = invert_batch(model, data, qs, t, steps, z0=np.repeat(z0, len(qs), axis=0))
    pop = _population(model, data, zs, t, steps)

    h0 = rel_step * (1.0 + np.linalg.norm(q0s, axis=-1))
    Ed = np.eye(d)
    owner = np.concatenate([np.repeat(np.arange(1 + 2 * n), K), np.zeros(2 * d * K, dtype=int)])
    pts = np.concatenate([np.tile(q0s, (1 + 2 * n, 1)),
                          (q0s[:, None] + h0[:, None, None] * Ed).reshape(-1, d),
                          (q0s[:, None] - h0[:, None, None] * Ed).reshape(-1, d)])
    vals, mom, S, method = _master_eval(model, data, pop, owner, pts, t)
    base = vals[:K]
    pert = vals[K:K * (1 + 2 * n)].reshape(2 * n, K)
    phi1 = m * (pert[:n] - pert[n:]) / (2.0 * hj[:, None])
    qd = vals[K * (1 + 2 * n):].reshape(2, K, d)
    dq0u = (qd[0] - qd[1]) / (2.0 * h0[:, None])

    dt = time_step * t
    dtu = []
    for tt in (t + dt, t - dt):
        zt, _ = invert_batch(model, data, q[None], tt, steps, z0=z0)
        popt = _population(model, data, zt, tt, steps)
        dtu.append(_master_eval(model, data, popt, np.zeros(K, dtype=int), q0s, tt)[0])
    dtu = (dtu[0] - dtu[1]) / (2.0 * dt)
    return [MasterSample(t, q0s[k], q, float(base[k]), mom[k], S[:, k], pop["times"], dq0u[k],
                         phi1[:, k].reshape(m, d), float(dtu[k]), method[k]) for k in range(K)]


def scalar_master_residual(model: HamiltonianModel, data: DataModel, t: float, q0, mu,
                           steps: int | None = None, samples: list | None = None) -> np.ndarray | float:
    """Pointwise residual of the scalar master equation at q0 (a point or an array of points)."""
    q = _config(mu)
    m = q.shape[0]
    single = np.ndim(q0) <= 1
    if samples is None:
        samples = master_gradient(model, data, t, q0, q, steps)
    z, r = invert_batch(model, data, q[None], t, steps)
    vel = model.dH_dp(q, m * r.eta[-1, 0])
    res = np.array([abs(s.dtu + model.H(s.q0, s.dq0u) + np.sum(s.phi1 * vel) / m - data.F.pointwise(s.q0, q))
                    for s in samples])
    return float(res[0]) if single else res


def vectorial_master_residual(model: HamiltonianModel, data: DataModel, t: float, mu, i: int,
                              steps: int | None = None, time_step: float = 1e-3) -> float:
    """Residual of the equation for V = grad_w U at particle i.

    Uses Lambda0 = m D^2_{ii}U for D_qV and sums the Lambda1 transport over j != i,
    which is the exact identity for the m-particle value function.
    """
    q = _config(mu)
    m, d = q.shape
    if t <= 0:
        raise InvalidInputError("vectorial residual needs t > 0")
    steps = default_steps(t) if steps is None else steps
    H, z, eta = hessian_batch(model, data, q[None], t, steps)
    H4 = (0.5 * (H[0] + H[0].T)).reshape(m, d, m, d)
    V = m * eta[0]
    dt = time_step * t
    ep = hessian_batch(model, data, q[None], t + dt, steps, z0=z)[2][0]
    em = hessian_batch(model, data, q[None], t - dt, steps, z0=z)[2][0]
    dV = m * (ep - em) / (2.0 * dt)
    vel = model.dH_dp(q, V)
    lam0 = m * H4[i, :, i, :]
    res = dV[i] + model.dH_dq(q[i], V[i]) + lam0 @ vel[i]
    for j in range(m):
        if j != i:
            res = res + (m * m * H4[i, :, j, :]) @ vel[j] / m
    res = res - data.F.pointwise_grad(q[i], q)
    return float(np.linalg.norm(res))


def commutator_defect(model: HamiltonianModel, data: DataModel, t: float, mu, i: int, j: int,
                      steps: int | None = None, h1: float = 1e-3, h2: float = 2e-3) -> float:
    """Difference of the two nested finite-difference orderings of D_{q0} and m D_{q_j} at q0 = q_i.

    Each ordering uses its own inner/outer step pair, so the defect measures how far the
    mixed derivatives of u fail to commute beyond discretization error.
    """
    q = _config(mu)
    m, d = q.shape
    steps = default_steps(t) if steps is None else steps
    q0 = q[i].copy()
    E = np.eye(d)
    Q, Q0 = [], []
    for a in range(d):
        for b in range(d):
            for sa in (1, -1):
                for sb in (1, -1):
                    # ordering 1: outer q0 step h1, inner q_j step h2
                    qq = q.copy(); qq[j, b] += sb * h2
                    Q.append(qq); Q0.append(q0 + sa * h1 * E[a])
                    # ordering 2: outer q_j step h1, inner q0 step h2
                    qq = q.copy(); qq[j, b] += sb * h1
                    Q.append(qq); Q0.append(q0 + sa * h2 * E[a])
    Q = np.array(Q)
    z0, _ = invert_batch(model, data, q[None], t, steps)
    z, _ = invert_batch(model, data, Q, t, steps, z0=np.repeat(z0, len(Q), axis=0))
    pop = _population(model, data, z, t, steps)
    vals = _master_eval(model, data, pop, np.arange(len(Q)), np.array(Q0), t)[0]
    vals = vals.reshape(d, d, 2, 2, 2)
    sign = np.array([1.0, -1.0])
    mix1 = np.einsum("abxy,x,y->ab", vals[..., 0], sign, sign) / (4 * h1 * h2)
    mix2 = np.einsum("abxy,x,y->ab", vals[..., 1], sign, sign) / (4 * h1 * h2)
    return float(m * np.abs(mix1 - mix2).max())


# non-smooth example: L = |v|^2/2, u0(q) = -sqrt(1 + q^2), d = 1

@dataclass
class CounterexampleResult:
    t: float
    q: float
    value: float
    minimizers: list
    superdiff_lo: float
    superdiff_hi: float

    @property
    def gap(self) -> float:
        return self.superdiff_hi - self.superdiff_lo


def counterexample_hopf_lax(t: float, q: float, grid: int = 4001, tie_tol: float = 1e-10) -> CounterexampleResult:
    if t <= 0:
        raise InvalidInputError("t must be positive")
    q = float(q)
    R = abs(q) + t + 2.0
    J = lambda y: (y - q) ** 2 / (2 * t) - np.sqrt(1 + y * y)
    crit = lambda y: (y - q) / t - y / np.sqrt(1 + y * y)
    ys = np.linspace(-R, R, grid)
    cs = crit(ys)
    roots = []
    for k in range(grid - 1):
        if cs[k] == 0.0:
            roots.append(float(ys[k]))
        elif cs[k] * cs[k + 1] < 0:
            roots.append(brentq(crit, ys[k], ys[k + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200))
    if cs[-1] == 0.0:
        roots.append(float(ys[-1]))
    vals = np.array([J(y) for y in roots])
    best = vals.min()
    mins = sorted(y for y, v in zip(roots, vals) if v <= best + tie_tol * (1 + abs(best)))
    slopes = [(q - y) / t for y in mins]
    return CounterexampleResult(t, q, float(best), mins, float(min(slopes)), float(max(slopes)))


def counterexample_csv(results) -> str:
    buf = io.StringIO()
    buf.write("t,q,value,n_minimizers,superdiff_lo,superdiff_hi\r\n")
    for r in results:
        buf.write(f"{r.t:.17g},{r.q:.17g},{r.value:.17g},{len(r.minimizers)},{r.superdiff_lo:.17g},{r.superdiff_hi:.17g}\r\n")
    return buf.getvalue()


def master_csv(samples, residuals) -> str:
    buf = io.StringIO()
    d = samples[0].q0.shape[0] if samples else 1
    buf.write("t," + ",".join(f"q0_{a}" for a in range(d)) + ",m,u,dq0u_norm,residual_scalar\r\n")
    for s, res in zip(samples, residuals):
        coords = ",".join(format(float(c), ".17g") for c in s.q0)
        dn = float(np.linalg.norm(s.dq0u)) if s.dq0u is not None else float("nan")
        buf.write(f"{s.t:.17g},{coords},{s.mu.shape[0]},{s.u:.17g},{dn:.17g},{res:.17g}\r\n")
    return buf.getvalue()
