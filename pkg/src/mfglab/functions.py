"""Smooth scalar functions on R^d with analytic derivatives up to order 3.

All evaluators accept arrays of shape (..., d) and return shapes
(...), (..., d), (..., d, d) and (..., d, d, d).  Used both for the
mechanical potentials g and for the data kernels phi, phi1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError


class SmoothFunction:
    name = "abstract"

    def value(self, q):
        raise NotImplementedError

    def grad(self, q):
        raise NotImplementedError

    def hess(self, q):
        raise NotImplementedError

    def third(self, q):
        raise NotImplementedError

    # lower bound on the Hessian eigenvalues, None if unknown
    convexity_modulus: float | None = None
    # radius beyond which the function is negligible (used for Fourier boxes)
    support_radius: float = 1.0

    def params(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {"name": self.name, **self.params()}

    def __add__(self, other: "SmoothFunction") -> "SmoothFunction":
        return SumFunction((self, other))


_EYES = {}


def _eye(d):
    if d not in _EYES:
        _EYES[d] = np.eye(d)
        _EYES[d].setflags(write=False)
    return _EYES[d]


class RadialFunction(SmoothFunction):
    """f(q) = F(|q|^2); subclasses supply F and its first three derivatives in s."""

    def profile(self, s, order: int):
        raise NotImplementedError

    def value(self, q):
        q = np.asarray(q, dtype=float)
        return self.profile(np.sum(q * q, axis=-1), 0)

    def grad(self, q):
        q = np.asarray(q, dtype=float)
        s = np.sum(q * q, axis=-1)
        return 2.0 * self.profile(s, 1)[..., None] * q

    def hess(self, q):
        q = np.asarray(q, dtype=float)
        s = np.sum(q * q, axis=-1)
        f1 = self.profile(s, 1)[..., None, None]
        f2 = self.profile(s, 2)[..., None, None]
        return 2.0 * f1 * _eye(q.shape[-1]) + 4.0 * f2 * q[..., :, None] * q[..., None, :]

    def third(self, q):
        q = np.asarray(q, dtype=float)
        d = q.shape[-1]
        s = np.sum(q * q, axis=-1)
        f2 = self.profile(s, 2)[..., None, None, None]
        f3 = self.profile(s, 3)[..., None, None, None]
        e = _eye(d)
        sym = (
            e[:, :, None] * q[..., None, None, :]
            + e[:, None, :] * q[..., None, :, None]
            + e[None, :, :] * q[..., :, None, None]
        )
        qqq = q[..., :, None, None] * q[..., None, :, None] * q[..., None, None, :]
        return 4.0 * f2 * sym + 8.0 * f3 * qqq


@dataclass(frozen=True)
class Zero(SmoothFunction):
    name = "zero"
    convexity_modulus = 0.0

    def value(self, q):
        return np.zeros(np.shape(q)[:-1])

    def grad(self, q):
        return np.zeros(np.shape(q))

    def hess(self, q):
        s = np.shape(q)
        return np.zeros(s + s[-1:])

    def third(self, q):
        s = np.shape(q)
        return np.zeros(s + s[-1:] * 2)


@dataclass(frozen=True)
class Quadratic(RadialFunction):
    """lam/2 |q|^2"""

    lam: float = 1.0
    name = "quadratic"

    @property
    def convexity_modulus(self):
        return float(self.lam)

    def profile(self, s, order):
        if order == 0:
            return 0.5 * self.lam * s
        if order == 1:
            return np.full(np.shape(s), 0.5 * self.lam)
        return np.zeros(np.shape(s))

    def params(self):
        return {"lam": self.lam}


@dataclass(frozen=True)
class SoftNorm(RadialFunction):
    """-alpha sqrt(1 + |q|^2)"""

    alpha: float = 1.0
    name = "soft_norm"

    @property
    def convexity_modulus(self):
        return -abs(self.alpha)

    def profile(self, s, order):
        a = 1.0 + s
        c = (1.0, 0.5, -0.25, 0.375)[order]
        return -self.alpha * c * a ** (0.5 - order)

    def params(self):
        return {"alpha": self.alpha}


@dataclass(frozen=True)
class Gaussian(RadialFunction):
    """amplitude * exp(-|q|^2 / width^2)"""

    amplitude: float = 1.0
    width: float = 1.0
    name = "gaussian"

    @property
    def convexity_modulus(self):
        return -2.0 * abs(self.amplitude) / self.width**2

    @property
    def support_radius(self):
        return 3.0 * self.width

    def profile(self, s, order):
        k = -1.0 / self.width**2
        return self.amplitude * k**order * np.exp(k * s)

    def params(self):
        return {"amplitude": self.amplitude, "width": self.width}


def _smoothstep(x, order):
    # quintic smoothstep 6x^5 - 15x^4 + 10x^3 and derivatives, constant outside [0,1]
    inside = (x > 0.0) & (x < 1.0)
    xc = np.clip(x, 0.0, 1.0)
    if order == 0:
        return xc**3 * (10.0 - 15.0 * xc + 6.0 * xc**2)
    if order == 1:
        v = 30.0 * xc**2 * (xc - 1.0) ** 2
    elif order == 2:
        v = 60.0 * xc * (2.0 * xc - 1.0) * (xc - 1.0)
    else:
        v = 60.0 * (6.0 * xc**2 - 6.0 * xc + 1.0)
    return np.where(inside, v, 0.0)


@dataclass(frozen=True)
class Bump(RadialFunction):
    """C^2 radial cutoff: 1 on the ball of radius inner, 0 outside radius outer."""

    inner: float = 1.0
    outer: float = 2.0
    name = "bump"

    def __post_init__(self):
        if not (0.0 < self.inner < self.outer):
            raise InvalidInputError(f"bump needs 0 < inner < outer, got {self.inner}, {self.outer}")

    @property
    def support_radius(self):
        return float(self.outer)

    def radial(self, r, order):
        w = self.outer - self.inner
        x = (r - self.inner) / w
        v = _smoothstep(x, order) / w**order
        return 1.0 - v if order == 0 else -v

    def profile(self, s, order):
        s = np.asarray(s, dtype=float)
        if order == 0:
            return self.radial(np.sqrt(s), 0)
        active = s > self.inner**2
        r = np.sqrt(np.where(active, s, 1.0))
        f1 = self.radial(r, 1)
        if order == 1:
            out = f1 / (2.0 * r)
        else:
            f2 = self.radial(r, 2)
            if order == 2:
                out = (f2 - f1 / r) / (4.0 * r**2)
            else:
                f3 = self.radial(r, 3)
                out = (f3 - 3.0 * f2 / r + 3.0 * f1 / r**2) / (8.0 * r**3)
        return np.where(active, out, 0.0)

    def params(self):
        return {"inner": self.inner, "outer": self.outer}


@dataclass(frozen=True)
class CosineRidge(SmoothFunction):
    """alpha * sum_k cos(q_k)"""

    alpha: float = 1.0
    name = "cosine"

    @property
    def convexity_modulus(self):
        return -abs(self.alpha)

    def value(self, q):
        return self.alpha * np.sum(np.cos(q), axis=-1)

    def grad(self, q):
        return -self.alpha * np.sin(q)

    def hess(self, q):
        q = np.asarray(q, dtype=float)
        return -self.alpha * np.cos(q)[..., None] * _eye(q.shape[-1])

    def third(self, q):
        q = np.asarray(q, dtype=float)
        d = q.shape[-1]
        diag = np.zeros((d, d, d))
        diag[np.arange(d), np.arange(d), np.arange(d)] = 1.0
        return self.alpha * np.sin(q)[..., None, None] * diag

    def params(self):
        return {"alpha": self.alpha}


@dataclass(frozen=True)
class SumFunction(SmoothFunction):
    parts: tuple = field(default_factory=tuple)
    name = "sum"

    @property
    def convexity_modulus(self):
        mods = [p.convexity_modulus for p in self.parts]
        return None if any(m is None for m in mods) else float(sum(mods))

    @property
    def support_radius(self):
        return max(p.support_radius for p in self.parts)

    def value(self, q):
        return sum(p.value(q) for p in self.parts)

    def grad(self, q):
        return sum(p.grad(q) for p in self.parts)

    def hess(self, q):
        return sum(p.hess(q) for p in self.parts)

    def third(self, q):
        return sum(p.third(q) for p in self.parts)

    def to_dict(self):
        return {"name": "sum", "parts": [p.to_dict() for p in self.parts]}


REGISTRY = {
    "zero": Zero,
    "quadratic": Quadratic,
    "soft_norm": SoftNorm,
    "cosine": CosineRidge,
    "gaussian": Gaussian,
    "bump": Bump,
}


def from_dict(spec) -> SmoothFunction:
    """Build a function from {"name": ..., **params}; None or 0 means zero."""
    if spec is None or spec == 0:
        return Zero()
    if isinstance(spec, str):
        spec = {"name": spec}
    if not isinstance(spec, dict) or "name" not in spec:
        raise InvalidInputError(f"function spec must be a dict with a name: {spec!r}")
    spec = dict(spec)
    name = spec.pop("name")
    if name == "sum":
        return SumFunction(tuple(from_dict(p) for p in spec.get("parts", [])))
    if name not in REGISTRY:
        raise InvalidInputError(f"unknown function {name!r}; known: {sorted(REGISTRY)}")
    try:
        return REGISTRY[name](**{k: float(v) for k, v in spec.items()})
    except TypeError as exc:
        raise InvalidInputError(f"bad parameters for {name}: {exc}") from None
