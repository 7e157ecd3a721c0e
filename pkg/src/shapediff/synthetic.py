"""Small analytic shapes used for demos, tests and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .shape import Shape, icosphere


def fibonacci_sphere(n: int, radius: float = 1.0) -> Shape:
    """``n`` nearly uniform points on a sphere (golden-angle spiral)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return Shape(radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1))


def ellipsoid_mesh(axes=(1.0, 0.6, 0.4), level: int = 2) -> Shape:
    s = icosphere(level)
    return Shape(s.vertices * np.asarray(axes, dtype=np.float64), s.faces)


def ellipsoid_points(n: int, axes=(1.0, 0.6, 0.4)) -> Shape:
    return Shape(fibonacci_sphere(n).vertices * np.asarray(axes, dtype=np.float64))


def box_points(n: int, size=(1.4, 0.9, 0.7), seed: int = 0) -> Shape:
    """Points on the surface of an axis-aligned box, area-proportional per face."""
    rng = np.random.default_rng(seed)
    half = np.asarray(size, dtype=np.float64) / 2
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = face % 3
    pts[np.arange(n), axis] = np.where(face < 3, 1.0, -1.0)
    return Shape(pts * half)


def torus_points(n: int, major: float = 0.75, minor: float = 0.3) -> Shape:
    """Deterministic torus samples on a golden-ratio lattice in (u, v)."""
    i = np.arange(n) + 0.5
    u = 2 * np.pi * i / n
    v = 2 * np.pi * ((i * (np.sqrt(5.0) - 1) / 2) % 1.0)
    x = (major + minor * np.cos(v)) * np.cos(u)
    y = (major + minor * np.cos(v)) * np.sin(u)
    z = minor * np.sin(v)
    return Shape(np.stack([x, y, z], axis=1))


def planar_grid(nx: int = 5, ny: int = 5, spacing: float = 1.0, triangulate: bool = False) -> Shape:
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    if not triangulate:
        return Shape(v)
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b = i * ny + j, (i + 1) * ny + j
            faces += [(a, b, b + 1), (a, b + 1, a + 1)]
    return Shape(v, np.array(faces))


def random_smooth_cloud(n: int, rng: np.random.Generator) -> Shape:
    """A randomly deformed sphere: radial bumps from a few low-order harmonics."""
    base = fibonacci_sphere(n).vertices
    c = rng.normal(scale=0.15, size=(4, 3))
    scale = rng.uniform(0.6, 1.2, size=3)
    bump = 1.0 + np.sin(base @ c[:3].T * 2.0).sum(axis=1) * 0.1 + base @ c[3] * 0.2
    return Shape(base * bump[:, None] * scale)
