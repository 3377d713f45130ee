"""Frame-wise structurization: fit a conv generator mapping a flat (u, v, 0) grid onto
the first point cloud of a sequence.

Frames are ``(U, V, 3)`` arrays of 3D coordinates; the generator works channel-first
(``3×U×V``), so tensors are transposed at the boundary.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .geom import InvalidInputError, as_points
from .metrics import MetricConfig, distance_with_grad

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12


class FitAborted(RuntimeError):
    """Optimization hit a non-finite value; carries the last valid result."""

    def __init__(self, message: str, frame: np.ndarray | None, report: "FitReport"):
        super().__init__(message)
        self.frame = frame
        self.report = report


@dataclass
class GeneratorConfig:
    num_layers: int = 6
    hidden: int = 32
    kernel: int = 3
    activation: str = "sine"
    frequency: float = 1.0
    first_frequency: float = 10.0
    # add the centred flat grid to the network output, so a zero last layer starts
    # the fit from the plane instead of collapsing every pixel onto the origin
    residual: bool = True


@dataclass
class FrameFitConfig:
    lambda_s: float = 0.01
    lambda_n: float = 0.001
    window: int = 3
    metric: MetricConfig = field(default_factory=MetricConfig)
    steps: int = 5000
    lr: float = 1e-3
    lr_min: float = 0.0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise InvalidInputError(f"window size must be odd and >= 3, got {self.window}")
        if self.steps < 1:
            raise InvalidInputError("steps must be >= 1")
        if self.lambda_s < 0 or self.lambda_n < 0:
            raise InvalidInputError("regularizer weights must be nonnegative")

    def lr_at(self, step: int) -> float:
        """Cosine decay from ``lr`` to ``lr_min`` over ``steps``."""
        frac = step / max(self.steps - 1, 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class FitReport:
    losses: list[float] = field(default_factory=list)
    distances: list[float] = field(default_factory=list)
    regularizers: list[float] = field(default_factory=list)
    steps_run: int = 0
    diagnostic: str = ""

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def make_grid_init(u: int, v: int) -> np.ndarray:
    """``(U, V, 3)`` grid holding (i/(U-1), j/(V-1), 0)."""
    if u < 2 or v < 2:
        raise InvalidInputError(f"grid needs U, V >= 2, got {u}×{v}")
    grid = np.zeros((u, v, 3))
    grid[..., 0] = (np.arange(u) / (u - 1))[:, None]
    grid[..., 1] = (np.arange(v) / (v - 1))[None, :]
    return grid


def flat_start(u: int, v: int) -> np.ndarray:
    """The grid init shifted to the unit box centre, ``3×U×V``."""
    g = make_grid_init(u, v)
    g[..., :2] -= 0.5
    return g.transpose(2, 0, 1).copy()


def generate(params: ad.GeneratorParams, grid_in: np.ndarray, base: np.ndarray | None):
    out, tape = ad.forward_generator(params, grid_in)
    return (out + base if base is not None else out), tape


def reproject(frame: np.ndarray) -> np.ndarray:
    """Row-major flattening: pixel (i, j) becomes point i·V + j."""
    frame = np.asarray(frame)
    return frame.reshape(-1, 3)


def regrid(points, u: int, v: int) -> np.ndarray:
    points = np.asarray(points)
    if points.shape != (u * v, 3):
        raise InvalidInputError(f"cannot regrid {points.shape} points into {u}×{v}")
    return points.reshape(u, v, 3)


def _diff_indices(n: int):
    plus = np.minimum(np.arange(n) + 1, n - 1)
    minus = np.maximum(np.arange(n) - 1, 0)
    coef = 1.0 / (plus - minus)
    return plus, minus, coef


def grid_partials(g: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    """Central differences along the two grid axes (one-sided at borders) of a 3×U×V tensor."""
    _, u, v = g.shape
    pu, mu, cu = _diff_indices(u)
    pv, mv, cv = _diff_indices(v)
    du = (g.take(pu, 1) - g.take(mu, 1)) * cu[None, :, None]
    dv = (g.take(pv, 2) - g.take(mv, 2)) * cv[None, None, :]
    return du, dv


def normals_tensor(g: ad.Tensor) -> tuple[ad.Tensor, np.ndarray]:
    """Unit normals (3×U×V) and the degenerate mask (U×V, True where undefined)."""
    du, dv = grid_partials(g)
    c = ad.cross(du, dv, axis=0)
    sq = (c.square()).sum(axis=0)
    degenerate = np.sqrt(sq.data) <= DEGENERATE_NORM
    # degenerate pixels get a unit denominator and a zero normal
    norm = (sq + degenerate.astype(np.float64)).sqrt()
    return c / norm.reshape(1, *norm.shape), degenerate


def compute_normals(frame) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel unit normals ``(U, V, 3)`` and degenerate mask ``(U, V)``."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise InvalidInputError(f"frame must be U×V×3, got {frame.shape}")
    if min(frame.shape[:2]) < 3:
        raise InvalidInputError("normals need U, V >= 3")
    n, deg = normals_tensor(ad.Tensor(frame.transpose(2, 0, 1)))
    return n.data.transpose(1, 2, 0), deg


def _window_sum(t: ad.Tensor, window: int) -> ad.Tensor:
    """Sum over each full L×L window; output covers interior pixels only."""
    _, u, v = t.shape
    ho, wo = u - window + 1, v - window + 1
    total = None
    for i in range(window):
        for j in range(window):
            part = t[:, i:i + ho, j:j + wo]
            total = part if total is None else total + part
    return total


def r_geo_tensor(g: ad.Tensor, lambda_s: float, lambda_n: float, window: int) -> ad.Tensor:
    """Differentiable geometric regularizer of a 3×U×V generated grid."""
    _, u, v = g.shape
    if u < window or v < window:
        raise InvalidInputError(f"grid {u}×{v} smaller than window {window}")
    r = window // 2
    centre = (slice(None), slice(r, u - r), slice(r, v - r))
    total = ad.Tensor(0.0)
    if lambda_s > 0:
        mean = _window_sum(g, window) * (1.0 / window**2)
        total = total + ((g[centre] - mean).square()).sum() * lambda_s
    if lambda_n > 0 and min(u, v) >= 3:
        n, degenerate = normals_tensor(g)
        valid = (~degenerate).astype(np.float64)
        counts = _window_sum(ad.Tensor(valid[None]), window).data
        nsum = _window_sum(n, window)  # degenerate normals are zero, so they drop out
        mean_n = nsum / np.maximum(counts, 1.0)
        keep = valid[r:u - r, r:v - r] * (counts[0] > 0)
        total = total + ((n[centre] - mean_n).square().sum(axis=0) * keep).sum() * lambda_n
    return total


def r_geo(frame, normals=None, cfg: FrameFitConfig | None = None, *, lambda_s: float | None = None,
          lambda_n: float | None = None, window: int | None = None) -> float:
    """Regularizer value for a ``(U, V, 3)`` frame.

    Normals are always recomputed from the frame (``normals`` is accepted for
    signature compatibility and checked for shape only).
    """
    cfg = cfg or FrameFitConfig()
    frame = np.asarray(frame, dtype=np.float64)
    if normals is not None and np.shape(normals) != frame.shape:
        raise InvalidInputError("normal map shape must match the frame")
    ls = cfg.lambda_s if lambda_s is None else lambda_s
    ln = cfg.lambda_n if lambda_n is None else lambda_n
    win = cfg.window if window is None else window
    return float(r_geo_tensor(ad.Tensor(frame.transpose(2, 0, 1)), ls, ln, win).data)


def structurize_frame(points, u: int, v: int, cfg: FrameFitConfig | None = None, seed: int = 0,
                      log_every: int = 0):
    """Fit the generator to ``points`` (already normalized, ``U·V`` of them).

    Returns ``(frame, params, report)``; ``frame`` is produced by the returned params.
    """
    cfg = cfg or FrameFitConfig()
    target = as_points(points, "target frame")
    if len(target) != u * v:
        raise InvalidInputError(f"target has {len(target)} points, grid needs {u * v}")
    gc = cfg.generator
    params = ad.init_generator(gc.num_layers, gc.hidden, gc.kernel, gc.activation, gc.frequency,
                               zero_last=True, seed=seed, first_frequency=gc.first_frequency)
    grid_in = make_grid_init(u, v).transpose(2, 0, 1).copy()
    base = flat_start(u, v) if gc.residual else None
    tree = cKDTree(target) if cfg.metric.kind == "chamfer" else None
    state = ad.AdamState(lr=cfg.lr)
    tensors = params.tensors()
    report = FitReport()
    last_frame = None
    best_loss, best_state = math.inf, None
    for step in range(cfg.steps):
        try:
            out, tape = generate(params, grid_in, base)
            last_frame = out.data.transpose(1, 2, 0).copy()
            dval, dgrad = distance_with_grad(reproject(last_frame), target, cfg.metric, tree)
            dist = ad.external_scalar(out, dval, regrid(dgrad, u, v).transpose(2, 0, 1))
            reg = r_geo_tensor(out, cfg.lambda_s, cfg.lambda_n, cfg.window)
            total = dist + reg
            if not np.isfinite(total.data):
                raise ad.NonFiniteError(f"non-finite loss at step {step}")
            if total.data < best_loss:
                best_loss, best_state = float(total.data), params.state_arrays()
            params.zero_grad()
            ad.backward(tape, total)
            ad.adam_step(tensors, [t.grad for t in tensors], state, lr=cfg.lr_at(step))
        except (ad.NonFiniteError, FloatingPointError) as exc:
            report.diagnostic = f"aborted at step {step}: {exc}"
            raise FitAborted(report.diagnostic, last_frame, report) from exc
        report.losses.append(float(total.data))
        report.distances.append(float(dval))
        report.regularizers.append(float(reg.data))
        report.steps_run = step + 1
        if log_every and step % log_every == 0:
            log.info("frame fit step %d loss %.6g dist %.6g reg %.6g", step, total.data, dval, reg.data)
    # Adam can spike late in a run; hand back whichever iterate scored best
    out, _ = generate(params, grid_in, base)
    frame = out.data.transpose(1, 2, 0).copy()
    dval, _ = distance_with_grad(reproject(frame), target, cfg.metric, tree)
    final = dval + float(r_geo_tensor(out, cfg.lambda_s, cfg.lambda_n, cfg.window).data)
    if best_state is not None and best_loss < final:
        for t, arr in zip(tensors, best_state):
            t.data[...] = arr
        out, _ = generate(params, grid_in, base)
        frame = out.data.transpose(1, 2, 0).copy()
    return frame, params, report
