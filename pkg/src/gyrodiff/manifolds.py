"""Constant-curvature spaces (hyperboloid, sphere, Euclidean) and their products.

Points of the hyperbolic and spherical components live in R^{d+1}:
hyperboloid points satisfy <x, x>_L = 1/c (c < 0), sphere points satisfy
<x, x> = 1/c (c > 0). All functions operate on the last axis and keep the
input dtype, so the same code serves 32-bit stability sweeps and 64-bit
checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import DimensionError, DomainError

CLAMP_EPS = 1e-12
ON_MANIFOLD_TOL = 1e-6


@dataclass(frozen=True)
class CurvatureSpace:
    kind: str
    c: float
    d: int

    def __post_init__(self):
        expected = {"hyperbolic": -1, "spherical": 1, "euclidean": 0}
        if self.kind not in expected:
            raise ValueError(f"unknown space kind {self.kind!r}")
        if np.sign(self.c) != expected[self.kind]:
            raise ValueError(f"curvature {self.c} inconsistent with kind {self.kind}")
        if self.d < 1:
            raise ValueError("dimension must be >= 1")

    @property
    def ambient_dim(self) -> int:
        return self.d if self.kind == "euclidean" else self.d + 1

    def distance(self, x, y):
        if self.kind == "hyperbolic":
            return hyperbolic_distance(x, y, self.c)
        if self.kind == "spherical":
            return sphere_distance(x, y, self.c)
        return euclidean_distance(x, y)

    def exp(self, xp, v):
        if self.kind == "hyperbolic":
            return hyperbolic_exp(xp, v, self.c)
        if self.kind == "spherical":
            return sphere_exp(xp, v, self.c)
        return euclidean_exp(xp, v)

    def log(self, xp, y):
        if self.kind == "hyperbolic":
            return hyperbolic_log(xp, y, self.c)
        if self.kind == "spherical":
            return sphere_log(xp, y, self.c)
        return euclidean_log(xp, y)

    def origin(self, dtype=np.float64):
        o = np.zeros(self.ambient_dim, dtype=dtype)
        if self.kind != "euclidean":
            o[0] = 1.0 / np.sqrt(abs(self.c))
        return o

    def random_point(self, rng: np.random.Generator, scale: float = 1.0, dtype=np.float64):
        o = self.origin(dtype)
        if self.kind == "euclidean":
            return (scale * rng.standard_normal(self.d)).astype(dtype)
        v = np.zeros(self.ambient_dim, dtype=dtype)
        v[1:] = scale * rng.standard_normal(self.d)
        return self.exp(o, v)

    def project_tangent(self, xp, u):
        """Project an ambient vector onto the tangent space at ``xp``."""
        if self.kind == "hyperbolic":
            return u - self.c * lorentz_inner(xp, u)[..., None] * xp
        if self.kind == "spherical":
            return u - self.c * np.sum(xp * u, axis=-1)[..., None] * xp
        return u


@dataclass(frozen=True)
class ProductManifold:
    components: tuple[CurvatureSpace, ...]

    def __post_init__(self):
        if not self.components:
            raise ValueError("a product manifold needs at least one component")
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def dim(self) -> int:
        return sum(s.d for s in self.components)

    @property
    def ambient_dim(self) -> int:
        return sum(s.ambient_dim for s in self.components)

    def split(self, x) -> list[np.ndarray]:
        x = np.asarray(x)
        if x.shape[-1] != self.ambient_dim:
            raise DimensionError(f"expected ambient width {self.ambient_dim}, got {x.shape[-1]}")
        cuts = np.cumsum([s.ambient_dim for s in self.components])[:-1]
        return np.split(x, cuts, axis=-1)


def lorentz_inner(x, y):
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[-1] != y.shape[-1]:
        raise DimensionError(f"lorentz_inner: widths {x.shape[-1]} and {y.shape[-1]} differ")
    return -x[..., 0] * y[..., 0] + np.sum(x[..., 1:] * y[..., 1:], axis=-1)


def _check_on_hyperboloid(x, c, name):
    resid = np.abs(c * lorentz_inner(x, x) - 1.0)
    if not np.all(np.isfinite(resid)) or np.any(resid > ON_MANIFOLD_TOL):
        raise DomainError(f"{name}: point is off the hyperboloid (residual {np.max(resid):.3g})")


def _check_on_sphere(x, c, name):
    resid = np.abs(c * np.sum(x * x, axis=-1) - 1.0)
    if not np.all(np.isfinite(resid)) or np.any(resid > ON_MANIFOLD_TOL):
        raise DomainError(f"{name}: point is off the sphere (residual {np.max(resid):.3g})")


def hyperbolic_distance(x, y, c: float, check: bool = True):
    if c >= 0:
        raise ValueError("hyperbolic curvature must be negative")
    x = np.asarray(x)
    y = np.asarray(y)
    if check:
        _check_on_hyperboloid(x, c, "hyperbolic_distance")
        _check_on_hyperboloid(y, c, "hyperbolic_distance")
    arg = np.maximum(c * lorentz_inner(x, y), 1.0 + CLAMP_EPS)
    return np.arccosh(arg) / np.sqrt(-c)


def hyperbolic_exp(xp, v, c: float):
    """Exponential map at ``xp`` of a tangent vector ``v`` (Lorentz norm)."""
    if c >= 0:
        raise ValueError("hyperbolic curvature must be negative")
    xp = np.asarray(xp)
    v = np.asarray(v)
    vn = np.sqrt(np.maximum(lorentz_inner(v, v), 0.0))
    if not np.all(np.isfinite(vn)):
        raise DomainError("hyperbolic_exp: tangent norm is non-finite")
    a = (np.sqrt(-c) * vn)[..., None]
    safe = np.where(a > 0, a, 1.0)
    out = np.cosh(a) * xp + np.sinh(a) * v / safe
    return np.where(a > 0, out, xp)


def hyperbolic_log(xp, y, c: float):
    if c >= 0:
        raise ValueError("hyperbolic curvature must be negative")
    xp = np.asarray(xp)
    y = np.asarray(y)
    alpha = np.maximum(c * lorentz_inner(xp, y), 1.0)
    dist = np.arccosh(np.maximum(alpha, 1.0 + CLAMP_EPS)) / np.sqrt(-c)
    u = y - alpha[..., None] * xp
    un = np.sqrt(np.maximum(lorentz_inner(u, u), 0.0))[..., None]
    safe = np.where(un > 0, un, 1.0)
    return np.where(un > 0, dist[..., None] * u / safe, np.zeros_like(u))


def sphere_distance(x, y, c: float, check: bool = True):
    if c <= 0:
        raise ValueError("spherical curvature must be positive")
    x = np.asarray(x)
    y = np.asarray(y)
    if check:
        _check_on_sphere(x, c, "sphere_distance")
        _check_on_sphere(y, c, "sphere_distance")
    arg = np.clip(c * np.sum(x * y, axis=-1), -1.0 + CLAMP_EPS, 1.0 - CLAMP_EPS)
    d = np.arccos(arg) / np.sqrt(c)
    # clamping keeps arccos finite at +-1; snap the exact endpoints back
    exact = c * np.sum(x * y, axis=-1)
    d = np.where(exact >= 1.0, 0.0, d)
    return np.where(exact <= -1.0, np.pi / np.sqrt(c), d)


def sphere_exp(xp, v, c: float):
    if c <= 0:
        raise ValueError("spherical curvature must be positive")
    xp = np.asarray(xp)
    v = np.asarray(v)
    vn = np.linalg.norm(v, axis=-1)
    if not np.all(np.isfinite(vn)):
        raise DomainError("sphere_exp: tangent norm is non-finite")
    a = (np.sqrt(c) * vn)[..., None]
    safe = np.where(a > 0, a, 1.0)
    out = np.cos(a) * xp + np.sin(a) * v / safe
    return np.where(a > 0, out, xp)


def sphere_log(xp, y, c: float):
    if c <= 0:
        raise ValueError("spherical curvature must be positive")
    xp = np.asarray(xp)
    y = np.asarray(y)
    alpha = np.clip(c * np.sum(xp * y, axis=-1), -1.0, 1.0)
    dist = np.arccos(np.clip(alpha, -1.0 + CLAMP_EPS, 1.0 - CLAMP_EPS)) / np.sqrt(c)
    u = y - alpha[..., None] * xp
    un = np.linalg.norm(u, axis=-1)[..., None]
    safe = np.where(un > 0, un, 1.0)
    return np.where(un > 0, dist[..., None] * u / safe, np.zeros_like(u))


def euclidean_distance(x, y):
    return np.linalg.norm(np.asarray(x) - np.asarray(y), axis=-1)


def euclidean_exp(xp, v):
    return np.asarray(xp) + np.asarray(v)


def euclidean_log(xp, y):
    return np.asarray(y) - np.asarray(xp)


def product_distance(P: ProductManifold, x, y):
    xs = P.split(x)
    ys = P.split(y)
    sq = sum(np.square(s.distance(a, b)) for s, a, b in zip(P.components, xs, ys))
    return np.sqrt(sq)


def exp_log_roundtrip(
    norms: Sequence[float],
    c: float = -1.0,
    d: int = 4,
    trials: int = 64,
    dtype=np.float32,
    seed: int = 0,
    tol: float = 1e-3,
) -> list[dict]:
    """Round-trip log(exp(v)) == v on the hyperboloid for tangent norms ``norms``.

    Base points are random (distance up to ~2 from the origin) and every
    computation runs in ``dtype``. A trial fails if anything is non-finite or
    the round-trip error exceeds ``tol`` (relative above norm 1, absolute
    below, so v = 0 is not judged by float32 residue). Returns one record per norm.
    """
    space = CurvatureSpace("hyperbolic", c, d)
    rng = np.random.default_rng(seed)
    rows = []
    with np.errstate(all="ignore"):
        for norm in norms:
            failures = 0
            nonfinite = 0
            for _ in range(trials):
                # the tangent vector is built in float64 and cast once; only exp/log run in dtype
                x64 = space.random_point(rng, scale=1.0, dtype=np.float64)
                v64 = space.project_tangent(x64, rng.standard_normal(space.ambient_dim))
                v64 = v64 * (norm / np.sqrt(lorentz_inner(v64, v64)))
                xp, v = x64.astype(dtype), v64.astype(dtype)
                y = hyperbolic_exp(xp, v, dtype(c)).astype(dtype)
                back = hyperbolic_log(xp, y, dtype(c)).astype(dtype)
                finite = np.all(np.isfinite(y)) and np.all(np.isfinite(back))
                if not finite:
                    nonfinite += 1
                    failures += 1
                    continue
                err = np.linalg.norm((back - v).astype(np.float64)) / max(
                    np.linalg.norm(v.astype(np.float64)), 1.0
                )
                if err > tol:
                    failures += 1
            rows.append({"norm": float(norm), "trials": trials, "failures": failures, "nonfinite": nonfinite})
    return rows
