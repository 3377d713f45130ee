import numpy as np
import pytest

from spcv.container import SpcvContainer
from spcv.fixtures import plane, sphere, translating_sphere
from spcv.frame import make_grid_init, regrid
from spcv.geom import InvalidInputError, NormalizationTransform, brute_force_knn
from spcv.metrics import chamfer, hausdorff, mnuc
from spcv.quality import (fidelity_report, format_report, parse_report, smoothness_report,
                          spatial_smoothness_ratio, temporal_consistency_ratio)


def smoothness_brute(frame, k):
    u, v, _ = frame.shape
    pts = frame.reshape(-1, 3)
    lo, hi = (k - 1) // 2, k // 2
    fracs = []
    for i in range(lo, u - hi):
        for j in range(lo, v - hi):
            c = i * v + j
            ids, _ = brute_force_knn(pts, pts[c], k * k)
            nn = set(ids.tolist()) - {c}
            if len(nn) > k * k - 1:  # centre not among its own k² nearest: drop the farthest
                nn = set(list(ids[ids != c])[:k * k - 1])
            win = {a * v + b for a in range(i - lo, i + hi + 1) for b in range(j - lo, j + hi + 1)} - {c}
            fracs.append(len(win & nn) / (k * k - 1))
    return float(np.mean(fracs))


def test_smoothness_regular_grid():
    assert spatial_smoothness_ratio(make_grid_init(12, 12), 3) == 1.0


def test_smoothness_matches_brute_force(rng):
    frame = regrid(sphere(400) + 1e-3 * rng.normal(size=(400, 3)), 20, 20)
    for k in (3, 4, 5):
        assert spatial_smoothness_ratio(frame, k) == pytest.approx(smoothness_brute(frame, k), abs=1e-12)


def test_smoothness_random_permutation(rng):
    s = 24
    pts = plane(s * s)
    k = 3
    vals = [spatial_smoothness_ratio(regrid(pts[rng.permutation(s * s)], s, s), k) for _ in range(20)]
    p = (k * k - 1) / (s * s - 1)
    stderr = np.std(vals, ddof=1) / np.sqrt(len(vals))
    assert abs(np.mean(vals) - p) <= 3 * stderr


def test_smoothness_rigid_invariance(rng):
    frame = regrid(sphere(256), 16, 16)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    moved = frame @ q.T + rng.normal(size=3)
    assert spatial_smoothness_ratio(moved, 3) == spatial_smoothness_ratio(frame, 3)


def test_smoothness_errors():
    with pytest.raises(InvalidInputError):
        spatial_smoothness_ratio(np.zeros((4, 4, 3)), 5)
    with pytest.raises(InvalidInputError):
        spatial_smoothness_ratio(np.zeros((4, 4)), 3)


def test_smoothness_report_windows():
    rep = smoothness_report(make_grid_init(14, 14), (3, 5, 12))
    assert rep.windows == [3, 5, 12]
    assert all(0 <= r <= 1 for r in rep.ratios.values())


def test_consistency_exact_match():
    gt = translating_sphere(3, 0.05, 256)
    frames = np.stack([regrid(g, 16, 16) for g in gt])
    rep = temporal_consistency_ratio(frames, gt, (1, 4))
    assert rep.ratios == {1: 1.0, 4: 1.0}
    assert len(rep.per_pair[1]) == 2


def test_consistency_random_permutation(rng):
    n = 1024
    base = sphere(n)
    gt = [base, base + [0.01, 0, 0]]
    K = 8
    vals = []
    for _ in range(20):
        f0 = regrid(gt[0], 32, 32)
        f1 = regrid(gt[1][rng.permutation(n)], 32, 32)
        vals.append(temporal_consistency_ratio(np.stack([f0, f1]), gt, (K,)).ratios[K])
    p = K / n
    stderr = np.std(vals, ddof=1) / np.sqrt(len(vals))
    assert abs(np.mean(vals) - p) <= 3 * stderr


def test_consistency_monotone_in_k(rng):
    gt = [sphere(144) + rng.normal(scale=0.01, size=(144, 3)) for _ in range(3)]
    frames = np.stack([regrid(g + rng.normal(scale=0.05, size=g.shape), 12, 12) for g in gt])
    rep = temporal_consistency_ratio(frames, gt, (1, 2, 4, 8, 32, 144))
    vals = [rep.ratios[k] for k in (1, 2, 4, 8, 32, 144)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 1.0


def test_consistency_errors():
    gt = translating_sphere(2, 0.05, 256)
    frames = np.stack([regrid(g, 16, 16) for g in gt])
    with pytest.raises(InvalidInputError):
        temporal_consistency_ratio(frames, gt[:1])
    with pytest.raises(InvalidInputError):
        temporal_consistency_ratio(frames, [gt[0], gt[1][:100]])


def test_fidelity_identity_and_delegation(rng):
    pts = sphere(256)
    tf = NormalizationTransform((0.1, 0.0, -0.2), 2.0)
    c = SpcvContainer(regrid(tf.apply(pts), 16, 16)[None], tf)
    rep = fidelity_report(c, [pts])
    assert rep.cd[0] == pytest.approx(0.0, abs=1e-28) and rep.hd[0] == pytest.approx(0.0, abs=1e-14)
    noisy = pts + rng.normal(scale=0.01, size=pts.shape)
    rep = fidelity_report(c, [noisy])
    assert rep.cd[0] == pytest.approx(chamfer(c.point_cloud(0), tf.apply(noisy)), abs=1e-12)
    assert rep.hd[0] == pytest.approx(hausdorff(c.point_cloud(0), tf.apply(noisy)), abs=1e-12)
    assert rep.mnuc[0] == mnuc(c.point_cloud(0))
    den = fidelity_report(c, [noisy], denormalize=True)
    assert den.cd[0] == pytest.approx(chamfer(tf.invert(c.point_cloud(0)), noisy), abs=1e-12)
    with pytest.raises(InvalidInputError):
        fidelity_report(c, [pts, pts])


def test_report_roundtrip_and_stable(rng):
    s = [smoothness_report(make_grid_init(8, 8), (3, 5))]
    gt = translating_sphere(2, 0.05, 64)
    cons = temporal_consistency_ratio(np.stack([regrid(g, 8, 8) for g in gt]), gt)
    text = format_report(s, cons, extra={"frames": 2})
    assert text == format_report(s, cons, extra={"frames": 2})
    recs = parse_report(text)
    assert recs[0] == {"record": "info", "key": "frames", "value": "2"}
    sm = [r for r in recs if r["record"] == "smoothness"]
    assert float(sm[0]["ratio"]) == s[0].ratios[3]
