"""Sequence-wise structurization: carry the structured grid from frame to frame with
per-pixel deformation fields, plus the linear interpolation baseline."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .container import SpcvContainer
from .frame import FitAborted, FitReport, FrameFitConfig, reproject, structurize_frame
from .geom import InvalidInputError, SpatialIndex, as_points, unit_box_transform
from .metrics import MetricConfig, chamfer, distance_with_grad

log = logging.getLogger(__name__)


@dataclass
class KnnGraph:
    ids: np.ndarray       # (N, K) neighbor ids, self excluded
    weights: np.ndarray   # (N, K) inverse squared distances, clamped

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def normalized_weights(self) -> np.ndarray:
        return self.weights / self.weights.sum(axis=1, keepdims=True)


@dataclass
class SeqFitConfig:
    lam: float = 100.0
    k: int = 8
    metric: MetricConfig = field(default_factory=MetricConfig)
    steps: int = 2000
    lr: float = 1e-2
    lr_min: float = 0.0
    eps_w: float = 1e-8

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInputError("K must be >= 1")
        if not self.eps_w > 0:
            raise InvalidInputError("eps_w must be > 0")
        if self.lam < 0:
            raise InvalidInputError("lambda must be nonnegative")
        if self.steps < 1:
            raise InvalidInputError("steps must be >= 1")

    def lr_at(self, step: int) -> float:
        frac = step / max(self.steps - 1, 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))


def build_knn_graph(points, k: int = 8, eps_w: float = 1e-8) -> KnnGraph:
    pts = as_points(points)
    if len(pts) < 2:
        raise InvalidInputError("a k-NN graph needs at least two points")
    ids, dists = SpatialIndex(pts).knn_batch(pts, min(k, len(pts) - 1), exclude_self=True)
    return KnnGraph(ids, 1.0 / np.maximum(dists**2, eps_w))


def r_smooth_tensor(delta: ad.Tensor, graph: KnnGraph) -> ad.Tensor:
    """Differentiable k-NN smoothness of an ``(N, 3)`` displacement tensor."""
    n = delta.shape[0]
    if graph.ids.shape[0] != n:
        raise InvalidInputError(f"graph has {graph.ids.shape[0]} nodes, field has {n}")
    nb = delta.take(graph.ids.reshape(-1), axis=0).reshape(n, graph.k, 3)
    diff = delta.reshape(n, 1, 3) - nb
    sq = diff.square().sum(axis=2)
    return (sq * graph.normalized_weights()).sum() * (1.0 / n)


def r_smooth(delta, graph: KnnGraph) -> float:
    d = np.asarray(delta, dtype=np.float64).reshape(-1, 3)
    return float(r_smooth_tensor(ad.Tensor(d), graph).data)


@dataclass
class DeformationResult:
    delta: np.ndarray  # (U, V, 3)
    report: FitReport


def estimate_deformation(prev, target, cfg: SeqFitConfig | None = None, seed: int = 0,
                         log_every: int = 0) -> DeformationResult:
    """Fit the displacement field carrying frame ``prev`` (U×V×3) onto ``target`` points.

    The field starts at zero. ``seed`` is accepted for interface symmetry: the
    optimization itself is deterministic.
    """
    cfg = cfg or SeqFitConfig()
    prev = np.asarray(prev, dtype=np.float64)
    if prev.ndim != 3 or prev.shape[2] != 3:
        raise InvalidInputError(f"previous frame must be U×V×3, got {prev.shape}")
    target = as_points(target, "target frame")
    base = reproject(prev)
    graph = build_knn_graph(base, cfg.k, cfg.eps_w)
    tree = cKDTree(target) if cfg.metric.kind == "chamfer" else None
    delta = ad.parameter(np.zeros_like(base))
    state = ad.AdamState(lr=cfg.lr)
    report = FitReport()
    for step in range(cfg.steps):
        try:
            dval, dgrad = distance_with_grad(base + delta.data, target, cfg.metric, tree)
            loss = ad.external_scalar(delta, dval, dgrad)
            reg = r_smooth_tensor(delta, graph)
            total = loss + reg * cfg.lam
            delta.zero_grad()
            total.backward()
            total.release_graph()
            ad.adam_step([delta], [delta.grad], state, lr=cfg.lr_at(step))
        except (ad.NonFiniteError, FloatingPointError) as exc:
            report.diagnostic = f"aborted at step {step}: {exc}"
            raise FitAborted(report.diagnostic, None, report) from exc
        report.losses.append(float(total.data))
        report.distances.append(float(dval))
        report.regularizers.append(float(reg.data))
        report.steps_run = step + 1
        if log_every and step % log_every == 0:
            log.info("deformation step %d loss %.6g dist %.6g smooth %.6g", step, total.data, dval, reg.data)
    return DeformationResult(delta.data.reshape(prev.shape).copy(), report)


class SequenceError(RuntimeError):
    def __init__(self, frame_index: int, cause: Exception):
        super().__init__(f"frame {frame_index}: {cause}")
        self.frame_index = frame_index
        self.cause = cause


def structurize_sequence(frames, u: int, v: int, frame_cfg: FrameFitConfig | None = None,
                         seq_cfg: SeqFitConfig | None = None, seed: int = 0,
                         names: list[str] | None = None, log_every: int = 0,
                         reports: list | None = None) -> SpcvContainer:
    """Structure a sequence of ``U·V``-point frames given in original units.

    One unit-box transform is computed over the union of all frames; the container
    stores frames in normalized units together with that transform. Per-frame fit
    reports are appended to ``reports`` when a list is passed.
    """
    if len(frames) < 1:
        raise InvalidInputError("need at least one frame")
    frames = [as_points(f, f"frame {t}") for t, f in enumerate(frames)]
    for t, f in enumerate(frames):
        if len(f) != u * v:
            raise InvalidInputError(f"frame {t} has {len(f)} points, grid needs {u * v}")
    names = list(names) if names is not None else [f"frame{t:06d}" for t in range(len(frames))]
    tf = unit_box_transform(np.concatenate(frames))
    normed = [tf.apply(f) for f in frames]

    try:
        g0, _, rep0 = structurize_frame(normed[0], u, v, frame_cfg, seed=seed, log_every=log_every)
    except (FitAborted, InvalidInputError, FloatingPointError) as exc:
        raise SequenceError(0, exc) from exc
    grids = [g0]
    if reports is not None:
        reports.append(rep0)
    losses = [rep0.final_loss]
    cds = [chamfer(reproject(g0), normed[0])]
    for t in range(1, len(frames)):
        try:
            res = estimate_deformation(grids[-1], normed[t], seq_cfg, seed=seed + t, log_every=log_every)
        except (FitAborted, InvalidInputError, FloatingPointError) as exc:
            raise SequenceError(t, exc) from exc
        grids.append(grids[-1] + res.delta)
        if reports is not None:
            reports.append(res.report)
        losses.append(res.report.final_loss)
        cds.append(chamfer(reproject(grids[-1]), normed[t]))
        log.info("frame %d structured, chamfer %.6g", t, cds[-1])
    meta = [{"source": n, "fit_loss": float(l), "chamfer": float(c)} for n, l, c in zip(names, losses, cds)]
    return SpcvContainer(np.stack(grids), tf, meta)


def interpolate_linear(f1, f2, t1: float, t2: float, t: float) -> np.ndarray:
    """Pixel-wise convex combination of two frames at time ``t`` in [t1, t2]."""
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape:
        raise InvalidInputError(f"frame dims differ: {f1.shape} vs {f2.shape}")
    if not t1 < t2:
        raise InvalidInputError("need t1 < t2")
    if not t1 <= t <= t2:
        raise InvalidInputError(f"t={t} outside [{t1}, {t2}]")
    if t == t1:
        return f1.copy()
    if t == t2:
        return f2.copy()
    w2 = (t - t1) / (t2 - t1)
    return (1.0 - w2) * f1 + w2 * f2
