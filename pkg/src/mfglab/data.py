"""Data functionals of convolution type and their exact m-particle restrictions.

For a measure mu = sum_i w_i delta_{q_i}:

    U0(mu) = sum_i w_i phi(q_i) + 1/2 sum_ij w_i w_j phi1(q_i - q_j)
    u0(q0, mu) = phi(q0) + sum_i w_i phi1(q0 - q_i)

and the coupling F, f are built the same way from (f_phi, f_phi1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ModelError, ResolutionError
from .functions import Bump, SmoothFunction, Zero, from_dict
from .measures import EmpiricalMeasure, WeightedMeasure
from .model import AuditReport, AuditRegion, ball_sample


class ConvolutionFunctional:
    """Sum of a confining part phi, a pair interaction phi1 and a constant shift."""

    def __init__(self, phi: SmoothFunction, phi1: SmoothFunction, shift: float = 0.0):
        self.phi = phi
        self.phi1 = phi1
        self.shift = float(shift)

    @property
    def is_zero(self) -> bool:
        return isinstance(self.phi, Zero) and isinstance(self.phi1, Zero) and self.shift == 0.0

    @staticmethod
    def _diff(q):
        return q[..., :, None, :] - q[..., None, :, :]

    # m-particle restriction, q of shape (..., m, d)
    def value(self, q):
        q = np.asarray(q, dtype=float)
        m = q.shape[-2]
        out = self.phi.value(q).sum(axis=-1) / m
        out = out + self.phi1.value(self._diff(q)).sum(axis=(-2, -1)) / (2.0 * m * m)
        return out + self.shift

    def grad(self, q):
        q = np.asarray(q, dtype=float)
        m = q.shape[-2]
        return self.phi.grad(q) / m + self.phi1.grad(self._diff(q)).sum(axis=-2) / (m * m)

    def hess(self, q):
        """Blocks D^2_{q_i q_j} laid out as (..., m, d, m, d)."""
        q = np.asarray(q, dtype=float)
        m, d = q.shape[-2:]
        H2 = self.phi1.hess(self._diff(q)) / (m * m)  # (..., m, m, d, d)
        full = -np.swapaxes(H2, -3, -2).copy()  # (..., i, a, j, b)
        diag = self.phi.hess(q) / m + H2.sum(axis=-3)
        idx = np.arange(m)
        full[..., idx, :, idx, :] += np.moveaxis(diag, -3, 0)
        return full

    def third(self, q):
        """Blocks D^3_{q_i q_j q_k} laid out as (..., m, d, m, d, m, d)."""
        q = np.asarray(q, dtype=float)
        m, d = q.shape[-2:]
        lead = q.shape[:-2]
        T3 = self.phi1.third(self._diff(q)) / (m * m)  # (..., m, m, d, d, d)
        out = np.zeros(lead + (m, m, m, d, d, d))
        P, R = np.nonzero(~np.eye(m, dtype=bool))
        # entries with two indices equal to p and one equal to r
        vals = -T3[..., P, R, :, :, :]
        out[..., P, P, R, :, :, :] = vals
        out[..., P, R, P, :, :, :] = vals
        out[..., R, P, P, :, :, :] = vals
        idx = np.arange(m)
        out[..., idx, idx, idx, :, :, :] = self.phi.third(q) / m + T3.sum(axis=-4)
        n = len(lead)
        perm = list(range(n)) + [n, n + 3, n + 1, n + 4, n + 2, n + 5]
        return out.transpose(perm)

    # measure-level and pointwise data
    def on_measure(self, mu) -> float:
        pts, w = mu.points, mu.weights
        val = np.dot(w, self.phi.value(pts))
        val += 0.5 * w @ self.phi1.value(pts[:, None, :] - pts[None, :, :]) @ w
        return float(val) + self.shift

    def pointwise(self, q0, pts, w=None):
        pts = np.asarray(pts, dtype=float)
        w = np.full(pts.shape[-2], 1.0 / pts.shape[-2]) if w is None else np.asarray(w)
        q0 = np.asarray(q0, dtype=float)
        return self.phi.value(q0) + np.einsum("...i,...i->...", self.phi1.value(q0[..., None, :] - pts), w * np.ones(pts.shape[:-1]))

    def pointwise_grad(self, q0, pts, w=None):
        """D_{q0} of the pointwise datum; equals the Wasserstein gradient of the functional at q0."""
        pts = np.asarray(pts, dtype=float)
        w = np.full(pts.shape[-2], 1.0 / pts.shape[-2]) if w is None else np.asarray(w)
        q0 = np.asarray(q0, dtype=float)
        return self.phi.grad(q0) + np.einsum("...ia,...i->...a", self.phi1.grad(q0[..., None, :] - pts),
                                             w * np.ones(pts.shape[:-1]))

    def pointwise_hess(self, q0, pts, w=None):
        pts = np.asarray(pts, dtype=float)
        w = np.full(pts.shape[-2], 1.0 / pts.shape[-2]) if w is None else np.asarray(w)
        q0 = np.asarray(q0, dtype=float)
        return self.phi.hess(q0) + np.einsum("...iab,...i->...ab", self.phi1.hess(q0[..., None, :] - pts),
                                             w * np.ones(pts.shape[:-1]))

    def pointwise_particle_grad(self, q0, pts):
        """D_{q_i} of the pointwise datum with uniform weights, shape (..., m, d)."""
        pts = np.asarray(pts, dtype=float)
        m = pts.shape[-2]
        return -self.phi1.grad(np.asarray(q0)[..., None, :] - pts) / m


class DataModel:
    """Initial datum (phi, phi1) and coupling (f_phi, f_phi1) in the convolution family."""

    def __init__(self, dimension: int, phi=None, phi1=None, f_phi=None, f_phi1=None, *,
                 f_shift: float = 0.0, convex: bool = False, lam: float | None = None,
                 lam1: float | None = None, check_radius: float = 3.0):
        self.dimension = int(dimension)
        as_fn = lambda f: f if isinstance(f, SmoothFunction) else from_dict(f)
        self.phi = as_fn(phi)
        self.phi1 = as_fn(phi1)
        self.f_phi = as_fn(f_phi)
        self.f_phi1 = as_fn(f_phi1)
        self.U0 = ConvolutionFunctional(self.phi, self.phi1)
        self.F = ConvolutionFunctional(self.f_phi, self.f_phi1, f_shift)
        self.f_shift = float(f_shift)
        self.convex = bool(convex)
        self._lam = lam
        self._lam1 = lam1
        self._validate(check_radius)

    def _validate(self, radius):
        rng = np.random.default_rng(12345)
        q = ball_sample(rng, 200, self.dimension, radius)
        for name, k in (("phi1", self.phi1), ("f_phi1", self.f_phi1)):
            if np.abs(k.value(q) - k.value(-q)).max() > 1e-12:
                raise ModelError(f"{name} must be even")
        if self.convex:
            for a, b, label in ((self.phi, self.phi1, "initial"), (self.f_phi, self.f_phi1, "coupling")):
                eig = np.linalg.eigvalsh(a.hess(q) + b.hess(q)).min()
                if eig < -1e-10:
                    raise ModelError(f"{label} data flagged convex but D^2 phi + D^2 phi1 has eigenvalue {eig:.3g}")

    @classmethod
    def from_dict(cls, spec: dict, dimension: int) -> "DataModel":
        spec = dict(spec or {})
        known = {"phi", "phi1", "f_phi", "f_phi1", "f_shift", "convex", "lam", "lam1"}
        extra = set(spec) - known
        if extra:
            raise InvalidInputError(f"unknown data keys {sorted(extra)}")
        return cls(dimension, spec.get("phi"), spec.get("phi1"), spec.get("f_phi"), spec.get("f_phi1"),
                   f_shift=float(spec.get("f_shift", 0.0)), convex=bool(spec.get("convex", False)),
                   lam=spec.get("lam"), lam1=spec.get("lam1"))

    def to_dict(self) -> dict:
        return {"phi": self.phi.to_dict(), "phi1": self.phi1.to_dict(), "f_phi": self.f_phi.to_dict(),
                "f_phi1": self.f_phi1.to_dict(), "f_shift": self.f_shift, "convex": self.convex}

    @property
    def lam(self) -> float:
        if self._lam is not None:
            return float(self._lam)
        mod = self.phi.convexity_modulus
        if mod is None:
            raise ModelError("convexity modulus of phi unknown; pass lam explicitly")
        return float(mod)

    @property
    def lam1(self) -> float:
        if self._lam1 is not None:
            return float(self._lam1)
        return radial_min_eigenvalue(self.phi1, self.dimension)


def radial_min_eigenvalue(kernel: SmoothFunction, d: int, radii: int = 201, extent: float | None = None) -> float:
    """Smallest Hessian eigenvalue of kernel along the ray r e_1, r in [0, extent]."""
    extent = 1.5 * kernel.support_radius if extent is None else extent
    r = np.linspace(0.0, extent, radii)
    q = np.zeros((radii, d))
    q[:, 0] = r
    return float(np.linalg.eigvalsh(kernel.hess(q)).min())


def _as_measure(mu):
    if isinstance(mu, (EmpiricalMeasure, WeightedMeasure)):
        return mu
    return EmpiricalMeasure(mu)


def eval_U0(data: DataModel, mu) -> float:
    return data.U0.on_measure(_as_measure(mu))


def eval_F(data: DataModel, mu) -> float:
    return data.F.on_measure(_as_measure(mu))


def grad_w_U0(data: DataModel, mu, q) -> np.ndarray:
    mu = _as_measure(mu)
    return data.U0.pointwise_grad(q, mu.points, mu.weights)


def grad_w_F(data: DataModel, mu, q) -> np.ndarray:
    mu = _as_measure(mu)
    return data.F.pointwise_grad(q, mu.points, mu.weights)


def discrete_derivatives_U0(data: DataModel, q, order: int, q0=None) -> dict:
    """Closed-form derivatives of U0^(m) (and of u0^(m)(q0, .) when q0 is given)."""
    if order not in (1, 2, 3):
        raise InvalidInputError("order must be 1, 2 or 3")
    q = np.asarray(q, dtype=float)
    out = {"value": data.U0.value(q), "grad": data.U0.grad(q)}
    if order >= 2:
        out["hess"] = data.U0.hess(q)
    if order >= 3:
        out["third"] = data.U0.third(q)
    if q0 is not None:
        out["pointwise"] = data.U0.pointwise(q0, q)
        out["pointwise_particle_grad"] = data.U0.pointwise_particle_grad(q0, q)
    return out


@dataclass
class Certificate:
    kind: str
    verdict: bool
    witness: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "verdict": "pass" if self.verdict else "fail", "witness": float(self.witness)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def fourier_transform_grid(kernel: SmoothFunction, d: int, half_width: float, points: int):
    """Quadrature of the truncated transform int k(x) exp(-2 pi i x.xi) dx on a uniform grid."""
    dx = 2.0 * half_width / points
    x = -half_width + dx * np.arange(points)
    xi = (np.arange(points) - points // 2) / (2.0 * half_width)
    grids = np.meshgrid(*([x] * d), indexing="ij")
    vals = kernel.value(np.stack(grids, axis=-1))
    shell = np.max(np.abs(np.stack(grids, axis=-1)), axis=-1) >= 0.9 * half_width
    peak = np.abs(vals).max()
    if peak > 0 and np.abs(vals[shell]).max() > 1e-10 * peak:
        raise ResolutionError(f"kernel not negligible near the truncation box edge (half width {half_width})")
    E = np.exp(-2j * np.pi * np.outer(xi, x))
    out = vals.astype(complex)
    for axis in range(d):
        out = np.moveaxis(np.tensordot(E, out, axes=([1], [axis])), 0, axis)
    return xi, out.real * dx**d


def fourier_monotonicity(data: DataModel, half_width: float | None = None, points: int | None = None,
                         eps: float = 1e-8, kernel: SmoothFunction | None = None) -> Certificate:
    kernel = data.phi1 if kernel is None else kernel
    d = data.dimension
    if isinstance(kernel, Zero):
        return Certificate("monotonicity", True, 0.0, {"grid_points": 0})
    if half_width is None:
        half_width = 8.0 * kernel.support_radius
    if points is None:
        points = 2**8 if d == 1 else 2**6
    _, ft = fourier_transform_grid(kernel, d, half_width, points)
    witness = float(ft.min())
    return Certificate("monotonicity", witness >= -eps, witness,
                       {"half_width": half_width, "points": points, "max": float(ft.max())})


def displacement_modulus(data: DataModel) -> Certificate:
    lam, lam1 = data.lam, data.lam1
    kappa = lam - 2.0 * abs(lam1)
    return Certificate("displacement-convexity", kappa > 0, kappa, {"lam": lam, "lam1": lam1})


def fd_hessian(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    E = np.eye(n) * h
    H = np.empty((n, n))
    f0 = f(x)
    for a in range(n):
        H[a, a] = (f(x + 2 * E[a]) - 2 * f0 + f(x - 2 * E[a])) / (4 * h * h)
        for b in range(a + 1, n):
            v = (f(x + E[a] + E[b]) - f(x + E[a] - E[b]) - f(x - E[a] + E[b]) + f(x - E[a] - E[b])) / (4 * h * h)
            H[a, b] = H[b, a] = v
    return H


def discrete_convexity_check(evaluator, m: int, lam: float, region: AuditRegion, d: int = 1,
                             hessian=None, tol: float = 1e-5, h: float = 1e-3) -> AuditReport:
    """Min eigenvalue of the md x md Hessian of `evaluator` on configurations in the m-ball vs lam/m.

    `evaluator` takes an (m, d) configuration; `hessian`, if given, returns the md x md Hessian directly.
    """
    rng = np.random.default_rng(region.seed)
    samples = ball_sample(rng, region.samples, m * d, region.radius * np.sqrt(m))
    worst = np.inf
    for s in samples:
        qc = s.reshape(m, d)
        if hessian is not None:
            H = np.asarray(hessian(qc)).reshape(m * d, m * d)
        else:
            H = fd_hessian(lambda x: evaluator(x.reshape(m, d)), s, h)
        worst = min(worst, float(np.linalg.eigvalsh(0.5 * (H + H.T))[0]))
    threshold = lam / m
    return AuditReport("discrete_convexity", bool(worst >= threshold - tol),
                       {"min_eigenvalue": worst, "threshold": threshold}, tol)


def bump_phi1(inner: float, outer: float) -> Bump:
    if not inner < outer:
        raise InvalidInputError(f"bump needs inner < outer, got {inner} >= {outer}")
    return Bump(float(inner), float(outer))
