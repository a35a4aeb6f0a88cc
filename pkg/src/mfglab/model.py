"""Mechanical Hamiltonian/Lagrangian pairs and audits of their standing assumptions.

H(q, p) = 1/2 p.A^{-1}p - g(q),   L(q, v) = 1/2 v.A v + g(q).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ModelError
from .functions import SmoothFunction, Zero, from_dict


@dataclass(frozen=True)
class AuditRegion:
    radius: float = 1.0
    samples: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidInputError("audit radius must be positive")
        if int(self.samples) < 1:
            raise InvalidInputError("audit needs at least one sample")

    def draw(self, d: int, count: int = 2) -> list[np.ndarray]:
        """`count` independent arrays of shape (samples, d), uniform in the ball of this radius."""
        rng = np.random.default_rng(self.seed)
        return [ball_sample(rng, self.samples, d, self.radius) for _ in range(count)]


def ball_sample(rng: np.random.Generator, n: int, d: int, radius: float) -> np.ndarray:
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * radius * rng.random((n, 1)) ** (1.0 / d)


@dataclass
class AuditReport:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    tolerance: float = 0.0

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "tolerance": self.tolerance,
                "metrics": {k: float(v) for k, v in self.metrics.items()}}


class HamiltonianModel:
    # D_pH does not depend on q, and D^2_pp H is the constant A^{-1}
    separable = True
    constant_kinetic = True

    def __init__(self, dimension: int, kinetic=1.0, potential: SmoothFunction | None = None):
        d = int(dimension)
        if d < 1:
            raise ModelError("dimension must be a positive integer")
        A = np.asarray(kinetic, dtype=float)
        if A.ndim == 0:
            A = float(A) * np.eye(d)
        if A.shape != (d, d):
            raise ModelError(f"kinetic matrix must be {d}x{d}, got shape {A.shape}")
        if not np.all(np.isfinite(A)) or not np.allclose(A, A.T, rtol=0, atol=1e-12 * (1 + abs(A).max())):
            raise ModelError("kinetic matrix must be finite and symmetric")
        eig = np.linalg.eigvalsh(A)
        if eig[0] <= 0:
            raise ModelError(f"kinetic matrix is not positive definite (min eigenvalue {eig[0]:.3g})")
        self.dimension = d
        self.A = 0.5 * (A + A.T)
        self.Ainv = np.linalg.inv(self.A)
        self.Ainv = 0.5 * (self.Ainv + self.Ainv.T)
        self.kappa3 = float(eig[0])
        self.potential = potential if potential is not None else Zero()

    @classmethod
    def from_dict(cls, spec: dict) -> "HamiltonianModel":
        return cls(spec.get("dimension", 1), spec.get("kinetic", 1.0), from_dict(spec.get("potential")))

    def to_dict(self) -> dict:
        return {"dimension": self.dimension, "kinetic": self.A.tolist(), "potential": self.potential.to_dict()}

    # Hamiltonian side
    def H(self, q, p):
        p = np.asarray(p, dtype=float)
        return 0.5 * np.einsum("...a,ab,...b->...", p, self.Ainv, p) - self.potential.value(q)

    def dH_dp(self, q, p):
        return np.asarray(p, dtype=float) @ self.Ainv

    def dH_dq(self, q, p):
        return -self.potential.grad(q)

    def d2H_pp(self, q, p):
        return np.broadcast_to(self.Ainv, np.shape(p) + (self.dimension,))

    def d2H_qq(self, q, p):
        return -self.potential.hess(q)

    def d2H_qp(self, q, p):
        """d/dq of D_pH; identically zero for the mechanical family."""
        return np.zeros(np.shape(q) + (self.dimension,))

    # Lagrangian side
    def L(self, q, v):
        v = np.asarray(v, dtype=float)
        return 0.5 * np.einsum("...a,ab,...b->...", v, self.A, v) + self.potential.value(q)

    def dL_dv(self, q, v):
        return np.asarray(v, dtype=float) @ self.A

    def dL_dq(self, q, v):
        return self.potential.grad(q)

    def joint_derivatives(self, which: str, q, x):
        """Gradient, Hessian and third derivative of H(q,p) or L(q,v) in the joint variable (q, x)."""
        d = self.dimension
        sign = -1.0 if which == "H" else 1.0
        M = self.Ainv if which == "H" else self.A
        q = np.asarray(q, dtype=float)
        x = np.asarray(x, dtype=float)
        g1 = np.concatenate([sign * self.potential.grad(q), x @ M], axis=-1)
        g2 = np.zeros(q.shape[:-1] + (2 * d, 2 * d))
        g2[..., :d, :d] = sign * self.potential.hess(q)
        g2[..., d:, d:] = M
        g3 = np.zeros(q.shape[:-1] + (2 * d,) * 3)
        g3[..., :d, :d, :d] = sign * self.potential.third(q)
        return g1, g2, g3

    def value_of(self, which: str, q, x):
        return self.H(q, x) if which == "H" else self.L(q, x)


def legendre_check(model: HamiltonianModel, region: AuditRegion, tol: float = 1e-8) -> AuditReport:
    q, v = region.draw(model.dimension)
    p = model.dL_dv(q, v)
    defect = np.abs(model.H(q, p) - np.sum(v * p, axis=-1) + model.L(q, v)).max()
    roundtrip_v = np.abs(model.dH_dp(q, p) - v).max()
    roundtrip_p = np.abs(model.dL_dv(q, model.dH_dp(q, v)) - v).max()
    zero_momentum = np.abs(model.H(q, np.zeros_like(q)) + model.potential.value(q)).max()
    g_vals = model.potential.value(q)
    metrics = {
        "legendre_defect": defect,
        "roundtrip_v": roundtrip_v,
        "roundtrip_p": roundtrip_p,
        "h_zero_momentum_defect": zero_momentum,
        "kappa3": model.kappa3,
        "min_L": float(model.L(q, v).min()),
        "g_nonnegative": float(np.all(g_vals >= 0)),
    }
    passed = max(defect, roundtrip_v, roundtrip_p) < tol
    return AuditReport("legendre", bool(passed), metrics, tol)


def _fd_errors(model: HamiltonianModel, which: str, q, x, steps):
    d = model.dimension
    z = np.concatenate([q, x], axis=-1)
    n = 2 * d
    basis = np.eye(n)

    def split(zz):
        return zz[..., :d], zz[..., d:]

    g1, g2, g3 = model.joint_derivatives(which, q, x)

    def central(f, h, e):
        # fourth-order five-point stencil
        return (8 * (f(z + h * e) - f(z - h * e)) - (f(z + 2 * h * e) - f(z - 2 * h * e))) / (12 * h)

    f0 = lambda zz: model.value_of(which, *split(zz))
    f1 = lambda zz: model.joint_derivatives(which, *split(zz))[0]
    f2 = lambda zz: model.joint_derivatives(which, *split(zz))[1]
    h1, h2, h3 = steps
    fd1 = np.stack([central(f0, h1, e) for e in basis], axis=-1)
    fd2 = np.stack([central(f1, h2, e) for e in basis], axis=-1)
    fd3 = np.stack([central(f2, h3, e) for e in basis], axis=-1)
    out = {}
    for k, (fd, an) in enumerate([(fd1, g1), (fd2, g2), (fd3, g3)], start=1):
        scale = np.maximum(1.0, np.abs(an).reshape(len(an), -1).max(axis=1))
        err = np.abs(fd - an).reshape(len(an), -1).max(axis=1) / scale
        out[f"{which}_D{k}_relerr"] = float(err.max())
    return out, g2


def derivative_check(model: HamiltonianModel, region: AuditRegion, tol: float = 1e-5,
                     steps=(1e-4, 1e-3, 5e-3)) -> AuditReport:
    q, x = region.draw(model.dimension)
    metrics = {}
    kappa0 = 0.0
    for which in ("H", "L"):
        errs, hess = _fd_errors(model, which, q, x, steps)
        metrics.update(errs)
        kappa0 = max(kappa0, float(np.linalg.norm(hess, ord=2, axis=(-2, -1)).max()))
    metrics["kappa0"] = kappa0
    growth = np.linalg.norm(model.dH_dq(q, x), axis=-1) / (1 + np.linalg.norm(q, axis=-1) + np.linalg.norm(x, axis=-1))
    metrics["growth_constant"] = float(growth.max())
    worst = max(v for k, v in metrics.items() if k.endswith("relerr"))
    metrics["worst_relerr"] = worst
    return AuditReport("derivatives", bool(worst < tol), metrics, tol)
