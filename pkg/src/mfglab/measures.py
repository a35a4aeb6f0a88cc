"""Uniform empirical measures, exact W2 by assignment, and interpolation paths."""

from __future__ import annotations

import io
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidInputError

BRUTE_FORCE_MAX = 8


def _points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise InvalidInputError("points must be a nonempty (m, d) array")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("points must be finite")
    return pts


class EmpiricalMeasure:
    """(1/m) sum_i delta_{q_i}."""

    def __init__(self, points):
        self.points = _points(points)
        self.points.setflags(write=False)

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.m, 1.0 / self.m)

    def __repr__(self):
        return f"EmpiricalMeasure(m={self.m}, d={self.dimension})"

    def __eq__(self, other):
        return isinstance(other, EmpiricalMeasure) and np.array_equal(self.points, other.points)

    def to_json(self) -> str:
        return json.dumps(self.points.tolist())

    @classmethod
    def from_json(cls, text: str) -> "EmpiricalMeasure":
        return cls(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("index," + ",".join(f"x{k}" for k in range(self.dimension)) + "\r\n")
        for i, row in enumerate(self.points):
            buf.write(f"{i}," + ",".join(format(float(v), ".17g") for v in row) + "\r\n")
        return buf.getvalue()


class WeightedMeasure:
    def __init__(self, points, weights):
        self.points = _points(points)
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.shape != (self.points.shape[0],) or np.any(self.weights < 0):
            raise InvalidInputError("weights must be nonnegative, one per point")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"weights sum to {self.weights.sum()!r}, not 1")

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def dimension(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class Coupling:
    perm: tuple
    cost: float


def _cost(a: np.ndarray, b: np.ndarray, perm) -> float:
    # fsum is correctly rounded, so tied optimal permutations give bit-identical costs
    diff = a - b[list(perm)]
    return math.fsum(np.sum(diff * diff, axis=1)) / a.shape[0]


def _check_pair(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    if mu.m != nu.m:
        raise InvalidInputError(f"particle counts differ: {mu.m} vs {nu.m}")
    if mu.dimension != nu.dimension:
        raise InvalidInputError(f"dimensions differ: {mu.dimension} vs {nu.dimension}")


def brute_force_coupling(a: np.ndarray, b: np.ndarray) -> Coupling:
    # permutations come out in lexicographic order, so strict < keeps the smallest optimal one
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(a.shape[0])):
        c = _cost(a, b, perm)
        if c < best_cost:
            best, best_cost = perm, c
    return Coupling(tuple(int(i) for i in best), best_cost)


def assignment_coupling(a: np.ndarray, b: np.ndarray) -> Coupling:
    C = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(a.shape[0], dtype=int)
    perm[rows] = cols
    return Coupling(tuple(int(i) for i in perm), _cost(a, b, perm))


def sorted_coupling(a: np.ndarray, b: np.ndarray) -> Coupling:
    ia = np.argsort(a[:, 0], kind="stable")
    ib = np.argsort(b[:, 0], kind="stable")
    perm = np.empty(a.shape[0], dtype=int)
    perm[ia] = ib
    return Coupling(tuple(int(i) for i in perm), _cost(a, b, perm))


def optimal_coupling(mu: EmpiricalMeasure, nu: EmpiricalMeasure, method: str = "auto") -> Coupling:
    _check_pair(mu, nu)
    a, b = mu.points, nu.points
    if method == "auto":
        if mu.dimension == 1:
            method = "sort"
        elif mu.m <= BRUTE_FORCE_MAX:
            method = "brute"
        else:
            method = "assignment"
    if method == "sort":
        if mu.dimension != 1:
            raise InvalidInputError("sorting coupling needs d = 1")
        return sorted_coupling(a, b)
    if method == "brute":
        return brute_force_coupling(a, b)
    if method == "assignment":
        return assignment_coupling(a, b)
    raise InvalidInputError(f"unknown coupling method {method!r}")


def w2_distance(mu: EmpiricalMeasure, nu: EmpiricalMeasure, method: str = "auto") -> tuple[float, Coupling]:
    c = optimal_coupling(mu, nu, method)
    return float(np.sqrt(c.cost)), c


def displacement_interpolate(mu: EmpiricalMeasure, nu: EmpiricalMeasure, t: float,
                             coupling: Coupling | None = None) -> EmpiricalMeasure:
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError("t must lie in [0, 1]")
    if coupling is None:
        coupling = optimal_coupling(mu, nu)
    else:
        _check_pair(mu, nu)
    if t == 0.0:
        return EmpiricalMeasure(mu.points.copy())
    target = nu.points[list(coupling.perm)]
    if t == 1.0:
        return EmpiricalMeasure(target.copy())
    return EmpiricalMeasure((1.0 - t) * mu.points + t * target)


def classical_interpolate(mu, nu, t: float) -> WeightedMeasure:
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError("t must lie in [0, 1]")
    pts = np.concatenate([mu.points, nu.points])
    w = np.concatenate([(1.0 - t) * mu.weights, t * nu.weights])
    return WeightedMeasure(pts, w)


def second_moment(mu) -> float:
    return float(np.sum(mu.weights * np.sum(mu.points**2, axis=1)))
