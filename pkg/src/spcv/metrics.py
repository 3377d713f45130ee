"""Point-set distances: Chamfer, Hausdorff, exact and entropic EMD, and mNUC.

All inputs are ``(N, 3)`` arrays. Chamfer uses the sum of both directed mean
*squared* nearest-neighbor distances; Hausdorff uses plain Euclidean distances.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .geom import InvalidInputError, as_points, farthest_point_sample

EMD_EXACT_MAX_POINTS = 1024
NUC_DISK_FRACTIONS = (0.004, 0.006, 0.008, 0.010, 0.012)


@dataclass(frozen=True)
class MetricConfig:
    kind: Literal["chamfer", "emd-exact", "emd-sinkhorn"] = "chamfer"
    epsilon: float = 1e-3
    iterations: int = 200
    # geometric annealing from epsilon_start down to epsilon; None disables it
    epsilon_start: float | None = None
    anneal_stages: int = 8
    tol: float = 1e-9

    def __post_init__(self):
        if self.kind not in ("chamfer", "emd-exact", "emd-sinkhorn"):
            raise InvalidInputError(f"unknown metric kind {self.kind!r}")
        if not self.epsilon > 0:
            raise InvalidInputError("sinkhorn epsilon must be > 0")
        if self.iterations < 1:
            raise InvalidInputError("sinkhorn iterations must be >= 1")
        if self.epsilon_start is not None and self.epsilon_start < self.epsilon:
            raise InvalidInputError("epsilon_start must be >= epsilon")

    def schedule(self) -> list[float]:
        if self.epsilon_start is None or self.anneal_stages <= 1:
            return [self.epsilon]
        return list(np.geomspace(self.epsilon_start, self.epsilon, self.anneal_stages))


def _nn(src: np.ndarray, dst: np.ndarray, tree: cKDTree | None = None):
    """For each row of ``src``: squared distance and id of the nearest row of ``dst``."""
    tree = cKDTree(dst) if tree is None else tree
    _, idx = tree.query(src, k=1)
    diff = src - dst[idx]
    return np.einsum("ij,ij->i", diff, diff), idx


def chamfer(a, b) -> float:
    a, b = as_points(a), as_points(b)
    d_ab, _ = _nn(a, b)
    d_ba, _ = _nn(b, a)
    return float(d_ab.mean() + d_ba.mean())


def chamfer_with_grad(a, b, tree_b: cKDTree | None = None) -> tuple[float, np.ndarray]:
    """Chamfer value and its gradient with respect to ``a`` (``b`` fixed)."""
    a, b = as_points(a), as_points(b)
    d_ab, idx_ab = _nn(a, b, tree_b)
    d_ba, idx_ba = _nn(b, a)
    n, m = len(a), len(b)
    grad = (2.0 / n) * (a - b[idx_ab])
    back = (2.0 / m) * (a[idx_ba] - b)
    np.add.at(grad, idx_ba, back)
    return float(d_ab.mean() + d_ba.mean()), grad


def hausdorff(a, b) -> float:
    a, b = as_points(a), as_points(b)
    d_ab, _ = _nn(a, b)
    d_ba, _ = _nn(b, a)
    return float(np.sqrt(max(d_ab.max(), d_ba.max())))


def _sq_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def emd_exact(a, b) -> float:
    """Mean squared distance under the optimal bijection (Hungarian assignment)."""
    a, b = as_points(a), as_points(b)
    if len(a) != len(b):
        raise InvalidInputError(f"emd_exact needs equal sizes, got {len(a)} and {len(b)}")
    if len(a) > EMD_EXACT_MAX_POINTS:
        raise InvalidInputError(f"emd_exact is capped at {EMD_EXACT_MAX_POINTS} points, got {len(a)}")
    cost = _sq_cost(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


@dataclass
class SinkhornResult:
    cost: float
    grad: np.ndarray
    # dual objective of the cross term after each iteration of the final epsilon stage
    dual_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    # plain numpy log-sum-exp; scipy's version carries heavy per-call overhead on small inputs
    m = x.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x - m).sum(axis=axis)) + np.squeeze(m, axis=axis)
    return out


CHECK_EVERY = 10


def _sinkhorn_potentials(cost: np.ndarray, schedule, iterations: int, tol: float,
                         symmetric: bool, trace: list | None = None):
    n, m = cost.shape
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    done = 0
    converged = False
    for stage, eps in enumerate(schedule):
        last = stage == len(schedule) - 1
        for _ in range(iterations):
            if symmetric:
                # averaged fixed-point update for OT(x, x); f == g throughout
                f_new = -eps * _lse((f[None, :] - cost) / eps + log_a[None, :], axis=1)
                f = 0.5 * (f + f_new)
                g = f
            else:
                f = -eps * _lse((g[None, :] - cost) / eps + log_b[None, :], axis=1)
                g = -eps * _lse((f[:, None] - cost) / eps + log_a[:, None], axis=0)
            done += 1
            if last and trace is not None:
                trace.append(float(f @ np.exp(log_a) + g @ np.exp(log_b)))
            if done % CHECK_EVERY:
                continue
            # row-marginal violation (columns are exact after the g update)
            rows = np.exp(_lse((f[:, None] + g[None, :] - cost) / eps + log_b[None, :], axis=1))
            if np.max(np.abs(rows - 1.0)) < tol:
                converged = last
                break
    eps = schedule[-1]
    log_plan = (f[:, None] + g[None, :] - cost) / eps + log_a[:, None] + log_b[None, :]
    dual = float(f @ np.exp(log_a) + g @ np.exp(log_b))
    return np.exp(log_plan), dual, done, converged


def emd_sinkhorn(a, b, cfg: MetricConfig | None = None) -> SinkhornResult:
    """Debiased entropic OT (Sinkhorn divergence) and its gradient w.r.t. ``a``.

    S(a, b) = OT(a, b) - OT(a, a)/2 - OT(b, b)/2 with squared-Euclidean ground cost
    and uniform weights, each OT term the log-domain dual value. The gradient is
    the barycentric displacement of the converged plans.
    """
    cfg = cfg or MetricConfig(kind="emd-sinkhorn")
    a, b = as_points(a), as_points(b)
    sched = cfg.schedule()
    trace: list[float] = []
    c_ab = _sq_cost(a, b)
    plan_ab, ot_ab, iters, conv = _sinkhorn_potentials(c_ab, sched, cfg.iterations, cfg.tol, False, trace)
    plan_aa, ot_aa, _, _ = _sinkhorn_potentials(_sq_cost(a, a), sched, cfg.iterations, cfg.tol, True)
    _, ot_bb, _, _ = _sinkhorn_potentials(_sq_cost(b, b), sched, cfg.iterations, cfg.tol, True)
    cost = ot_ab - 0.5 * ot_aa - 0.5 * ot_bb
    # d OT(a,b)/da_i = 2 sum_j P_ij (a_i - b_j); for OT(a,a) both slots move: 4 sum_j Q_ij (a_i - a_j)
    g_ab = 2.0 * (plan_ab.sum(1)[:, None] * a - plan_ab @ b)
    g_aa = 4.0 * (plan_aa.sum(1)[:, None] * a - plan_aa @ a)
    grad = g_ab - 0.5 * g_aa
    if not (np.isfinite(cost) and np.all(np.isfinite(grad))):
        raise FloatingPointError("sinkhorn produced non-finite values")
    return SinkhornResult(max(cost, 0.0), grad, trace, iters, conv)


def distance_with_grad(a, b, cfg: MetricConfig, tree_b: cKDTree | None = None) -> tuple[float, np.ndarray]:
    """Training-loss entry point: value and gradient w.r.t. ``a`` for the configured metric."""
    if cfg.kind == "chamfer":
        return chamfer_with_grad(a, b, tree_b)
    if cfg.kind == "emd-sinkhorn":
        res = emd_sinkhorn(a, b, cfg)
        return res.cost, res.grad
    raise InvalidInputError("emd-exact has no gradient; use chamfer or emd-sinkhorn for fitting")


def nuc(points, disk_fraction: float, num_disks: int = 100, seed: int = 0) -> float:
    """Normalized uniformity coefficient for one disk size.

    Disk centers come from farthest point sampling started at a seeded random id;
    radius is ``disk_fraction`` times the unit-box diagonal (sqrt 3).
    """
    pts = as_points(points)
    if not 0 < disk_fraction < 1:
        raise InvalidInputError("disk_fraction must be in (0, 1)")
    if num_disks < 1:
        raise InvalidInputError("num_disks must be >= 1")
    rng = np.random.default_rng(seed)
    m = min(num_disks, len(pts))
    centers = farthest_point_sample(pts, m, int(rng.integers(len(pts))))
    if m < num_disks:
        # fewer distinct points than disks: reuse centers cyclically
        centers = np.resize(centers, num_disks)
    tree = cKDTree(pts)
    radius = disk_fraction * np.sqrt(3.0)
    counts = np.array([len(c) for c in tree.query_ball_point(pts[centers], radius)], dtype=np.float64)
    mean = counts.mean()
    return float(counts.std() / mean) if mean > 0 else 0.0


def mnuc(points, disk_fractions=NUC_DISK_FRACTIONS, num_disks: int = 100, seed: int = 0) -> float:
    if np.isscalar(disk_fractions):
        disk_fractions = (float(disk_fractions),)
    return float(np.mean([nuc(points, p, num_disks, seed) for p in disk_fractions]))
