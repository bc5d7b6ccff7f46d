"""Deformed parametric primitives for desk-scale experiments.

Each shape is a triangulated superquadric or torus, bent, tapered, twisted
and bumped, then sampled by area like a ModelNet mesh.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import sample_mesh_surface


def _spow(x, p):
    return np.sign(x) * np.abs(x) ** p


@dataclass(frozen=True)
class ShapeParams:
    family: str  # "superquadric" or "torus"
    radii: tuple
    exponents: tuple
    taper: float
    bend: float
    twist: float
    bumps: tuple  # (amplitude, freq_u, freq_v, phase) tuples


def random_shape_params(seed) -> ShapeParams:
    rng = np.random.default_rng(seed)
    family = "torus" if rng.random() < 0.2 else "superquadric"
    if family == "torus":
        radii = (1.0, float(rng.uniform(0.25, 0.5)), float(rng.uniform(0.5, 1.2)))
    else:
        radii = tuple(float(v) for v in rng.uniform(0.3, 1.0, size=3))
    exponents = tuple(float(v) for v in rng.uniform(0.3, 1.6, size=2))
    bumps = tuple((float(rng.uniform(0.02, 0.12)), int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                   float(rng.uniform(0, 2 * np.pi))) for _ in range(int(rng.integers(1, 4))))
    return ShapeParams(family, radii, exponents, float(rng.uniform(-0.6, 0.6)),
                       float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-1.0, 1.0)), bumps)


def shape_mesh(params: ShapeParams, resolution: int = 48):
    """Vertices and triangles on a (u, v) grid; u wraps around, v runs pole to pole."""
    nu, nv = 2 * resolution, resolution
    u = np.linspace(-np.pi, np.pi, nu, endpoint=False)
    if params.family == "torus":
        v = np.linspace(-np.pi, np.pi, nv, endpoint=False)
    else:
        v = np.linspace(-np.pi / 2, np.pi / 2, nv)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    e1, e2 = params.exponents
    a, b, c = params.radii
    if params.family == "torus":
        big, small, height = a, b, c
        ring = big + small * _spow(np.cos(vv), e1)
        x = ring * _spow(np.cos(uu), e2)
        y = ring * _spow(np.sin(uu), e2)
        z = height * small * _spow(np.sin(vv), e1)
    else:
        x = a * _spow(np.cos(vv), e1) * _spow(np.cos(uu), e2)
        y = b * _spow(np.cos(vv), e1) * _spow(np.sin(uu), e2)
        z = c * _spow(np.sin(vv), e1)

    bump = np.ones_like(uu)
    for amp, fu, fv, ph in params.bumps:
        bump += amp * np.sin(fu * uu + ph) * np.cos(fv * vv)
    x, y, z = x * bump, y * bump, z * bump
    zmax = max(np.abs(z).max(), 1e-9)
    s = 1.0 + params.taper * z / zmax
    x, y = x * s, y * s
    ang = params.twist * z / zmax
    x, y = x * np.cos(ang) - y * np.sin(ang), x * np.sin(ang) + y * np.cos(ang)
    x = x + params.bend * (z / zmax) ** 2

    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    grid = np.arange(nu * nv).reshape(nu, nv)
    i0 = grid
    i1 = np.roll(grid, -1, axis=0)
    if params.family == "torus":
        j0, j1 = i0, np.roll(i0, -1, axis=1)
        k0, k1 = i1, np.roll(i1, -1, axis=1)
    else:
        j0, j1 = i0[:, :-1], i0[:, 1:]
        k0, k1 = i1[:, :-1], i1[:, 1:]
    tris = np.concatenate([np.stack([j0, k0, k1], -1).reshape(-1, 3),
                           np.stack([j0, k1, j1], -1).reshape(-1, 3)])
    # collapsed triangles at the poles
    area = np.linalg.norm(np.cross(verts[tris[:, 1]] - verts[tris[:, 0]],
                                   verts[tris[:, 2]] - verts[tris[:, 0]]), axis=1)
    return verts, tris[area > 1e-15]


def sample_shape(params: ShapeParams, n: int = 1024, seed=0) -> np.ndarray:
    verts, tris = shape_mesh(params)
    return sample_mesh_surface(verts, tris, n, seed=seed)


def shape_suite(count: int, n: int = 1024, seed: int = 0):
    """``count`` distinct unit-sphere-normalized shapes as ``[(params, cloud), ...]``."""
    out = []
    for i in range(count):
        params = random_shape_params([seed, i])
        out.append((params, sample_shape(params, n, seed=[seed, i, 1])))
    return out


def mirror_symmetric_cloud(n: int = 512, seed=0, axis: int = 0) -> np.ndarray:
    """Random blob mirrored across the plane through the origin normal to ``axis``."""
    rng = np.random.default_rng(seed)
    half = rng.normal(size=(n // 2, 3)) * rng.uniform(0.3, 1.0, size=3)
    half[:, axis] = np.abs(half[:, axis]) + 0.05
    other = half.copy()
    other[:, axis] *= -1.0
    pts = np.vstack([half, other])
    # remove the off-axis mean only, keeping the mirror plane at the origin
    mean = pts.mean(axis=0)
    mean[axis] = 0.0
    return pts - mean
