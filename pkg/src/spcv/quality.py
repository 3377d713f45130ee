"""Representation quality: spatial smoothness ratio, temporal consistency ratio and
per-frame geometric fidelity, with a line-oriented ``key=value`` serialization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import SpcvContainer
from .geom import InvalidInputError, SpatialIndex, as_points
from .metrics import NUC_DISK_FRACTIONS, chamfer, hausdorff, mnuc

DEFAULT_WINDOWS = (3, 5, 7, 9, 11)


@dataclass
class SmoothnessReport:
    ratios: dict[int, float] = field(default_factory=dict)

    @property
    def windows(self) -> list[int]:
        return sorted(self.ratios)


@dataclass
class ConsistencyReport:
    ratios: dict[int, float] = field(default_factory=dict)
    # per K: ratio for each adjacent pair (t, t+1)
    per_pair: dict[int, list[float]] = field(default_factory=dict)


@dataclass
class FidelityReport:
    cd: list[float]
    hd: list[float]
    mnuc: list[float]

    @property
    def mean_cd(self) -> float:
        return float(np.mean(self.cd))

    @property
    def mean_hd(self) -> float:
        return float(np.mean(self.hd))

    @property
    def mean_mnuc(self) -> float:
        return float(np.mean(self.mnuc))


def _window_members(u: int, v: int, k: int):
    # even k: the centre sits at the upper-left of the middle 2×2 block
    lo, hi = (k - 1) // 2, k // 2
    ii, jj = np.meshgrid(np.arange(lo, u - hi), np.arange(lo, v - hi), indexing="ij")
    centres = (ii * v + jj).reshape(-1)
    offs = [(di, dj) for di in range(-lo, hi + 1) for dj in range(-lo, hi + 1) if (di, dj) != (0, 0)]
    members = np.stack([centres + di * v + dj for di, dj in offs], axis=1)
    return centres, members


def spatial_smoothness_ratio(frame, k: int = 3) -> float:
    """Mean fraction of each k×k window (minus its centre) found among the centre's
    (k²−1) nearest neighbours in the reprojected cloud; only windows fully inside
    the grid count."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise InvalidInputError(f"frame must be U×V×3, got {frame.shape}")
    if k < 2:
        raise InvalidInputError(f"window size must be >= 2, got {k}")
    u, v = frame.shape[:2]
    if u < k or v < k:
        raise InvalidInputError(f"frame {u}×{v} smaller than window {k}")
    pts = frame.reshape(-1, 3)
    nn = k * k - 1
    if len(pts) - 1 < nn:
        raise InvalidInputError("not enough points for the neighbourhood size")
    centres, members = _window_members(u, v, k)
    ids, _ = SpatialIndex(pts).knn_batch(pts, nn, exclude_self=True)
    ids = ids[centres]
    hits = (members[:, :, None] == ids[:, None, :]).any(axis=2).sum(axis=1)
    return float(np.mean(hits / nn))


def smoothness_report(frame, windows=DEFAULT_WINDOWS) -> SmoothnessReport:
    return SmoothnessReport({int(k): spatial_smoothness_ratio(frame, int(k)) for k in windows})


def temporal_consistency_ratio(spcv: SpcvContainer | np.ndarray, gt, ks=(8,)) -> ConsistencyReport:
    """Correspondence ratio against index-aligned ground-truth frames.

    For pixel q and frames (t, t+1): a = G_t(q), b = G_{t+1}(q); i = nearest gt_t id
    to a; the pair counts as consistent when b's nearest gt_{t+1} id lies in the
    K-NN set of gt_{t+1}[i] (which contains i itself).
    """
    frames = spcv.frames if isinstance(spcv, SpcvContainer) else np.asarray(spcv, dtype=np.float64)
    gt = [as_points(g, f"gt frame {t}") for t, g in enumerate(gt)]
    if len(gt) != frames.shape[0]:
        raise InvalidInputError(f"{len(gt)} ground-truth frames for {frames.shape[0]} SPCV frames")
    if len({len(g) for g in gt}) != 1:
        raise InvalidInputError("ground-truth frames must share one vertex count (index-aligned)")
    n_gt = len(gt[0])
    ks = [int(k) for k in (ks if np.iterable(ks) else (ks,))]
    if any(k < 1 for k in ks):
        raise InvalidInputError("K must be >= 1")
    report = ConsistencyReport({}, {k: [] for k in ks})
    if frames.shape[0] < 2:
        report.ratios = {k: 1.0 for k in ks}
        return report
    indices = [SpatialIndex(g) for g in gt]
    kmax = min(max(ks), n_gt)
    for t in range(frames.shape[0] - 1):
        a = frames[t].reshape(-1, 3)
        b = frames[t + 1].reshape(-1, 3)
        i_ids, _ = indices[t].knn_batch(a, 1)
        j_ids, _ = indices[t + 1].knn_batch(b, 1)
        i_ids, j_ids = i_ids[:, 0], j_ids[:, 0]
        if kmax > 1:
            nb, _ = indices[t + 1].knn_batch(gt[t + 1], kmax - 1, exclude_self=True)
            sets = np.concatenate([np.arange(n_gt)[:, None], nb], axis=1)
        else:
            sets = np.arange(n_gt)[:, None]
        for k in ks:
            kk = min(k, n_gt)
            ok = (sets[i_ids, :kk] == j_ids[:, None]).any(axis=1)
            report.per_pair[k].append(float(ok.mean()))
    report.ratios = {k: float(np.mean(report.per_pair[k])) for k in ks}
    return report


def fidelity_report(spcv: SpcvContainer, originals, denormalize: bool = False,
                    nuc_fractions=NUC_DISK_FRACTIONS, num_disks: int = 100, seed: int = 0) -> FidelityReport:
    """CD/HD/mNUC of every frame against its source cloud (given in original units).

    Distances are in unit-box units unless ``denormalize``; mNUC is always taken on
    the normalized reprojection.
    """
    if len(originals) != spcv.T:
        raise InvalidInputError(f"{len(originals)} original frames for {spcv.T} SPCV frames")
    cds, hds, nucs = [], [], []
    for t, orig in enumerate(originals):
        orig = as_points(orig, f"original frame {t}")
        mine = spcv.point_cloud(t)
        if denormalize:
            a, b = spcv.transform.invert(mine), orig
        else:
            a, b = mine, spcv.transform.apply(orig)
        cds.append(chamfer(a, b))
        hds.append(hausdorff(a, b))
        nucs.append(mnuc(mine, nuc_fractions, num_disks, seed))
    return FidelityReport(cds, hds, nucs)


def _fmt(x: float) -> str:
    return repr(float(x))


def format_report(smoothness: list[SmoothnessReport] | None = None,
                  consistency: ConsistencyReport | None = None,
                  fidelity: FidelityReport | None = None,
                  extra: dict | None = None) -> str:
    """Serialize reports as one ``key=value`` record per line."""
    lines = []
    for key, val in (extra or {}).items():
        lines.append(f"record=info key={key} value={val}")
    if smoothness:
        for t, rep in enumerate(smoothness):
            for k in rep.windows:
                lines.append(f"record=smoothness frame={t} k={k} ratio={_fmt(rep.ratios[k])}")
        for k in smoothness[0].windows:
            mean = np.mean([r.ratios[k] for r in smoothness])
            lines.append(f"record=smoothness_mean k={k} ratio={_fmt(mean)}")
    if consistency is not None:
        for k in sorted(consistency.ratios):
            for t, r in enumerate(consistency.per_pair[k]):
                lines.append(f"record=consistency K={k} pair={t}-{t + 1} ratio={_fmt(r)}")
            lines.append(f"record=consistency_mean K={k} ratio={_fmt(consistency.ratios[k])}")
    if fidelity is not None:
        for t, (c, h, m) in enumerate(zip(fidelity.cd, fidelity.hd, fidelity.mnuc)):
            lines.append(f"record=fidelity frame={t} cd={_fmt(c)} hd={_fmt(h)} mnuc={_fmt(m)}")
        lines.append(f"record=fidelity_mean cd={_fmt(fidelity.mean_cd)} hd={_fmt(fidelity.mean_hd)} "
                     f"mnuc={_fmt(fidelity.mean_mnuc)}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> list[dict[str, str]]:
    out = []
    for line in text.splitlines():
        if line.strip():
            out.append(dict(part.split("=", 1) for part in line.split()))
    return out
