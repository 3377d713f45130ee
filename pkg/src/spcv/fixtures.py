"""Deterministic analytic point cloud sequences with index-aligned ground truth."""
from __future__ import annotations

import math

import numpy as np

from .geom import InvalidInputError

FIXTURE_KINDS = ("plane", "sphere", "translating-sphere", "bending-cylinder")


def plane(n: int = 4096) -> np.ndarray:
    """Regular s×s grid on z=0 spanning [0, 1]²; ``n`` must be a perfect square."""
    s = math.isqrt(n)
    if s * s != n or s < 2:
        raise InvalidInputError(f"plane fixture needs a square point count, got {n}")
    ii, jj = np.meshgrid(np.arange(s) / (s - 1), np.arange(s) / (s - 1), indexing="ij")
    return np.stack([ii.ravel(), jj.ravel(), np.zeros(n)], axis=1)


def sphere(n: int = 4096, radius: float = 0.5) -> np.ndarray:
    """Fibonacci lattice on a sphere centred at the origin."""
    if n < 1:
        raise InvalidInputError("sphere needs n >= 1")
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azimuth = math.pi * (1.0 + math.sqrt(5.0)) * i
    unit = np.stack([np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)], axis=1)
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    return radius * unit


def translating_sphere(frames: int = 4, step: float = 0.05, n: int = 4096, radius: float = 0.5) -> list[np.ndarray]:
    base = sphere(n, radius)
    return [base + np.array([t * step, 0.0, 0.0]) for t in range(frames)]


def bending_cylinder(frames: int = 4, n_around: int = 32, n_along: int = 64, radius: float = 0.1,
                     length: float = 1.0, max_angle: float = math.pi / 2) -> list[np.ndarray]:
    """A cylinder whose axis bends into a circular arc of fixed length.

    Frame t bends the axis through ``t/(T-1) · max_angle``; the axis arc length
    stays ``length`` in every frame.
    """
    if frames < 1:
        raise InvalidInputError("need at least one frame")
    theta = 2 * math.pi * np.arange(n_around) / n_around
    s = length * np.arange(n_along) / (n_along - 1)
    ss, tt = np.meshgrid(s, theta, indexing="ij")
    ss, tt = ss.ravel(), tt.ravel()
    out = []
    for t in range(frames):
        angle = 0.0 if frames == 1 else max_angle * t / (frames - 1)
        kappa = angle / length
        if kappa == 0:
            centre = np.stack([np.zeros_like(ss), np.zeros_like(ss), ss], axis=1)
            normal = np.tile([1.0, 0.0, 0.0], (len(ss), 1))
        else:
            centre = np.stack([(1 - np.cos(kappa * ss)) / kappa, np.zeros_like(ss), np.sin(kappa * ss) / kappa], axis=1)
            normal = np.stack([np.cos(kappa * ss), np.zeros_like(ss), -np.sin(kappa * ss)], axis=1)
        binormal = np.array([0.0, 1.0, 0.0])
        pts = centre + radius * (np.cos(tt)[:, None] * normal + np.sin(tt)[:, None] * binormal)
        out.append(pts - np.array([0.0, 0.0, length / 2]))
    return out


def make_fixture(kind: str, frames: int = 4, n: int = 4096, step: float = 0.05) -> list[np.ndarray]:
    if kind == "plane":
        return [plane(n)]
    if kind == "sphere":
        return [sphere(n)]
    if kind == "translating-sphere":
        return translating_sphere(frames, step, n)
    if kind == "bending-cylinder":
        around = 32
        if n % around:
            raise InvalidInputError(f"bending-cylinder needs n divisible by {around}")
        return bending_cylinder(frames, around, n // around)
    raise InvalidInputError(f"unknown fixture kind {kind!r}; choose from {FIXTURE_KINDS}")
