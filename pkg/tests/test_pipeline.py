import json
import math

import numpy as np
import pytest

from spcv import cli
from spcv import pipeline as pl
from spcv.container import SpcvContainer, read_spcv, write_spcv
from spcv.fileio import read_point_cloud, write_point_cloud
from spcv.fixtures import bending_cylinder, sphere, translating_sphere
from spcv.geom import InvalidInputError
from spcv.quality import parse_report

FAST = ["--set", "u=16", "--set", "v=16", "--set", "frame.steps=40", "--set", "sequence.steps=40",
        "--set", "frame.generator.hidden=8"]


def run(argv, capsys=None):
    code = cli.main(["--quiet"] + argv)
    return code


def test_config_defaults_and_overrides(tmp_path, monkeypatch):
    cfg = pl.load_config(None, {})
    assert (cfg.u, cfg.v, cfg.seed) == (64, 64, 0)
    assert cfg.frame.metric is cfg.metric and cfg.sequence.metric is cfg.metric
    p = tmp_path / "c.yaml"
    p.write_text("u: 8\nframe:\n  steps: 7\n  generator:\n    hidden: 4\nmetric:\n  kind: emd-sinkhorn\n")
    cfg = pl.load_config(p, {"frame.steps": 9})
    assert cfg.u == 8 and cfg.frame.steps == 9 and cfg.frame.generator.hidden == 4
    assert cfg.frame.metric.kind == "emd-sinkhorn"
    monkeypatch.setenv(pl.CONFIG_ENV, str(p))
    assert pl.load_config(None).u == 8
    assert "steps: 7" in pl.dump_config(pl.load_config(None))


def test_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("frame:\n  stepz: 3\n")
    with pytest.raises(pl.ConfigError, match="frame.stepz"):
        pl.load_config(p)
    with pytest.raises(pl.ConfigError):
        pl.load_config(None, {"nope": 1})
    with pytest.raises(pl.ConfigError):
        pl.parse_override("frame.steps")
    key, val = pl.parse_override("frame.lr=1e-2")
    assert pl.load_config(None, {key: val}).frame.lr == 0.01
    with pytest.raises(pl.ConfigError, match="frame.steps"):
        pl.load_config(None, {"frame.steps": "many"})


def test_resample_counts(rng):
    pts = rng.normal(size=(50, 3))
    same = pl.resample(pts, 50)
    np.testing.assert_array_equal(same.points, pts)
    down = pl.resample(pts, 20)
    assert down.points.shape == (20, 3) and down.duplicates == 0
    up = pl.resample(pts, 64, seed=1)
    assert up.points.shape == (64, 3) and up.duplicates == 14
    # every original point survives the padding
    assert len({tuple(p) for p in up.points}) == 50
    np.testing.assert_array_equal(up.points, pl.resample(pts, 64, seed=1).points)


def test_make_fixture_files(tmp_path):
    fx = pl.cmd_make_fixture("translating-sphere", tmp_path, frames=4, n=256, step=0.05)
    man = json.loads(fx.manifest.read_text())
    assert len(man["frames"]) == 4 and len(man["gt"]) == 4
    f0 = read_point_cloud(fx.frames[0])
    for t in range(4):
        ft = read_point_cloud(fx.frames[t])
        np.testing.assert_array_equal(ft, f0 + np.array([t * 0.05, 0, 0]))
        np.testing.assert_array_equal(read_point_cloud(fx.gt[t]), ft)
    with pytest.raises(InvalidInputError):
        pl.cmd_make_fixture("torus", tmp_path / "x")


def test_fixture_sphere_radius():
    pts = sphere(4096)
    assert len(pts) == 4096
    assert np.abs(np.linalg.norm(pts, axis=1) - 0.5).max() <= 1e-12


def test_fixture_translation_exact():
    fr = translating_sphere(4, 0.05)
    for t in range(4):
        np.testing.assert_array_equal(fr[t], fr[0] + np.array([t * 0.05, 0.0, 0.0]))


def test_fixture_bending_arc_length():
    n_around, n_along, length = 32, 64, 1.0
    frames = bending_cylinder(5, n_around, n_along, radius=0.1, length=length)
    for f in frames:
        # the axis is the mean over each ring; its polyline length approximates the arc
        rings = f.reshape(n_along, n_around, 3).mean(axis=1)
        arc = np.linalg.norm(np.diff(rings, axis=0), axis=1).sum()
        assert abs(arc - length) <= 0.01 * length


def test_cli_end_to_end(tmp_path, capsys):
    fx = tmp_path / "fx"
    assert run(["make-fixture", "translating-sphere", str(fx), "--frames", "3", "-n", "256"]) == 0
    frames = sorted(str(p) for p in fx.glob("frame*.ply"))
    gts = sorted(str(p) for p in fx.glob("gt*.xyz"))
    out = tmp_path / "seq.spcv"
    assert run(["structurize", *frames, "-o", str(out), "--gt", *gts, *FAST]) == 0
    c = read_spcv(out)
    assert (c.T, c.U, c.V) == (3, 16, 16)
    recs = parse_report((tmp_path / "seq.spcv.report.txt").read_text())
    kinds = {r["record"] for r in recs}
    assert {"fidelity", "fidelity_mean", "consistency", "consistency_mean"} <= kinds
    assert len([r for r in recs if r["record"] == "fidelity"]) == 3

    capsys.readouterr()
    assert run(["evaluate", str(out), "--originals", *gts, "--gt", *gts]) == 0
    text1 = capsys.readouterr().out
    assert run(["evaluate", str(out), "--originals", *gts, "--gt", *gts]) == 0
    assert capsys.readouterr().out == text1
    assert "record=smoothness frame=2 k=11" in text1

    assert run(["evaluate", str(out), "--originals", *gts[:2]]) == 1
    assert "error=InvalidInputError" in capsys.readouterr().err


def test_structurize_single_frame_and_short_input(tmp_path):
    p = tmp_path / "few.xyz"
    write_point_cloud(sphere(200), p)
    out = tmp_path / "one.spcv"
    assert run(["structurize", str(p), "-o", str(out), *FAST]) == 0
    c = read_spcv(out)
    assert c.T == 1
    assert c.metadata[0]["duplicates"] == 256 - 200


def test_structurize_missing_input(tmp_path, capsys):
    missing = tmp_path / "nope.ply"
    assert run(["structurize", str(missing), "-o", str(tmp_path / "x.spcv")]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith("error=missing_path") and str(missing) in err[0]


def test_structurize_deterministic(tmp_path):
    p = tmp_path / "s.ply"
    write_point_cloud(sphere(256), p)
    outs = []
    for i in range(2):
        o = tmp_path / f"r{i}.spcv"
        assert run(["structurize", str(p), "-o", str(o), "--seed", "3", *FAST]) == 0
        outs.append((o.read_bytes(), (tmp_path / f"r{i}.spcv.report.txt").read_text()))
    assert outs[0] == outs[1]


def test_evaluate_structured_plane(tmp_path, capsys):
    fx = tmp_path / "fx"
    assert run(["make-fixture", "plane", str(fx), "-n", "256"]) == 0
    out = tmp_path / "plane.spcv"
    assert run(["structurize", str(fx / "frame0000.ply"), "-o", str(out), *FAST]) == 0
    capsys.readouterr()
    assert run(["evaluate", str(out), "--windows", "3"]) == 0
    recs = parse_report(capsys.readouterr().out)
    ratio = [float(r["ratio"]) for r in recs if r["record"] == "smoothness"][0]
    assert ratio >= 0.95


def _container(t, u=4, v=4, seed=0):
    rng = np.random.default_rng(seed)
    return SpcvContainer(rng.uniform(-0.5, 0.5, size=(t, u, v, 3)))


def test_interpolate_command(tmp_path):
    src = tmp_path / "c.spcv"
    c = _container(3)
    write_spcv(c, src)
    same = pl.cmd_interpolate(src, 0, 2, 0, tmp_path / "same.spcv")
    assert same.equals(read_spcv(src))
    out = pl.cmd_interpolate(src, 0, 2, 3, tmp_path / "more.spcv")
    assert out.T == 6
    times = [m.get("time") for m in out.metadata]
    # original frame 1 sits between the sub-steps 0.5 and 1.5
    assert times == [None, 0.5, None, 1.0, 1.5, None]
    np.testing.assert_array_equal(out.frames[0], read_spcv(src).frames[0])
    np.testing.assert_array_equal(out.frames[5], read_spcv(src).frames[2])
    with pytest.raises(InvalidInputError):
        pl.cmd_interpolate(src, 2, 1, 1, tmp_path / "bad.spcv")


def test_interpolate_identical_midpoint(tmp_path):
    f = _container(1).frames[0]
    src = tmp_path / "c.spcv"
    write_spcv(SpcvContainer(np.stack([f, f])), src)
    out = pl.cmd_interpolate(src, 0, 1, 1, tmp_path / "o.spcv")
    np.testing.assert_array_equal(out.frames[1], out.frames[0])


def test_export_command(tmp_path, capsys):
    src = tmp_path / "s.spcv"
    pts = sphere(4096)
    write_spcv(SpcvContainer(pts.reshape(1, 64, 64, 3)), src)
    assert run(["export", str(src), str(tmp_path / "codec"), "--bits", "16"]) == 0
    back = pl.codec_roundtrip(tmp_path / "codec")
    stored = read_spcv(src).point_cloud(0)
    from spcv.metrics import chamfer
    assert chamfer(back.point_cloud(0), stored) <= 1e-9
    assert run(["export", str(src), str(tmp_path / "c12"), "--bits", "12"]) == 1
    assert "bit depth 12" in capsys.readouterr().err
    empty = tmp_path / "e.spcv"
    write_spcv(SpcvContainer(np.zeros((0, 4, 4, 3))), empty)
    with pytest.raises(InvalidInputError):
        pl.cmd_export(empty, 16, tmp_path / "ce")


def test_common_flags_before_or_after_verb():
    parser = cli.build_parser()
    before = parser.parse_args(["--quiet", "--seed", "7", "--jobs", "2", "export", "a.spcv", "d"])
    after = parser.parse_args(["export", "--quiet", "--seed", "7", "--jobs", "2", "a.spcv", "d"])
    plain = parser.parse_args(["export", "a.spcv", "d"])
    for args in (before, after):
        assert (args.quiet, args.seed, args.jobs) == (True, 7, 2)
    assert (plain.quiet, plain.seed, plain.jobs, plain.config) == (False, None, None, None)
