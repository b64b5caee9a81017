"""Seeded synthetic data sources with known intrinsic dimension."""
from __future__ import annotations

import math

import numpy as np
from scipy.stats import ortho_group

GENERATORS = ("torus", "subspace_uniform", "circle", "pareto_tail", "point", "two_atom")


def random_embedding(d_in: int, D: int, rng: np.random.Generator) -> np.ndarray:
    """A (d_in, D) matrix with orthonormal rows."""
    if d_in > D:
        raise ValueError(f"cannot embed dimension {d_in} isometrically into R^{D}")
    if D == 1:
        return np.ones((1, 1))
    Q = ortho_group.rvs(D, random_state=rng)
    return Q[:d_in]


def torus(n: int, d: int, D: int, rng: np.random.Generator, embed_rng: np.random.Generator | None = None) -> np.ndarray:
    """Product of d unit circles: angles mapped to (cos, sin) pairs, then rotated into R^D."""
    if d < 1:
        raise ValueError("torus dimension must be >= 1")
    if 2 * d > D:
        raise ValueError(f"a flat {d}-torus needs ambient dimension >= {2 * d}, got {D}")
    angles = rng.uniform(0.0, 2 * math.pi, size=(n, d))
    flat = np.empty((n, 2 * d))
    flat[:, 0::2] = np.cos(angles)
    flat[:, 1::2] = np.sin(angles)
    E = random_embedding(2 * d, D, embed_rng if embed_rng is not None else rng)
    return flat @ E


def subspace_uniform(n: int, d: int, D: int, rng: np.random.Generator, embed_rng: np.random.Generator | None = None) -> np.ndarray:
    """Uniform on the cube [0,1]^d placed on a random d-plane through the origin."""
    if not 1 <= d <= D:
        raise ValueError(f"need 1 <= d <= D, got d={d}, D={D}")
    cube = rng.uniform(0.0, 1.0, size=(n, d))
    E = random_embedding(d, D, embed_rng if embed_rng is not None else rng)
    return cube @ E


def circle(n: int, D: int, rng: np.random.Generator) -> np.ndarray:
    if D < 2:
        raise ValueError("circle needs D >= 2")
    angles = rng.uniform(0.0, 2 * math.pi, size=n)
    out = np.zeros((n, D))
    out[:, 0] = np.cos(angles)
    out[:, 1] = np.sin(angles)
    return out


def pareto_tail(n: int, D: int, rng: np.random.Generator, tail_index: float = 6.0) -> np.ndarray:
    """Uniform direction with a Pareto(tail_index) radius, so moments of order < tail_index exist."""
    if tail_index <= 0:
        raise ValueError("tail_index must be positive")
    direction = rng.normal(size=(n, D))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = (1.0 - rng.uniform(size=n)) ** (-1.0 / tail_index)
    return direction * radius[:, None]


def point(n: int, D: int, rng: np.random.Generator, location: float = 0.0) -> np.ndarray:
    return np.full((n, D), float(location))


def two_atom(n: int, D: int, rng: np.random.Generator, separation: float = 1.0) -> np.ndarray:
    """Fair mixture of two atoms at +-separation/2 along the first axis."""
    out = np.zeros((n, D))
    out[:, 0] = np.where(rng.uniform(size=n) < 0.5, -0.5, 0.5) * separation
    return out


def sample(name: str, n: int, D: int, rng: np.random.Generator, d: int = 1, embed_rng=None, **kw) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    if name == "torus":
        return torus(n, d, D, rng, embed_rng)
    if name == "subspace_uniform":
        return subspace_uniform(n, d, D, rng, embed_rng)
    if name == "circle":
        return circle(n, D, rng)
    if name == "pareto_tail":
        return pareto_tail(n, D, rng, **kw)
    if name == "point":
        return point(n, D, rng, **kw)
    if name == "two_atom":
        return two_atom(n, D, rng, **kw)
    raise ValueError(f"unknown generator {name!r}; choose from {GENERATORS}")
