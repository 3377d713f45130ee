"""Command implementations behind the ``spcv`` CLI.

Each ``cmd_*`` function takes plain arguments, does its work and returns a small
result object; argument parsing and error-to-exit-code mapping live in :mod:`spcv.cli`.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .container import SpcvContainer, read_spcv, write_spcv
from .fileio import (dequantize_frames, export_codec_frames, import_codec_frames, quantize_frames,
                     read_point_cloud, write_point_cloud)
from .fixtures import FIXTURE_KINDS, make_fixture
from .frame import FrameFitConfig, GeneratorConfig
from .geom import InvalidInputError, farthest_point_sample
from .metrics import MetricConfig, chamfer
from .quality import (DEFAULT_WINDOWS, fidelity_report, format_report, smoothness_report,
                      temporal_consistency_ratio)
from .sequence import SeqFitConfig, interpolate_linear, structurize_sequence

log = logging.getLogger(__name__)

CONFIG_ENV = "SPCV_CONFIG"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------------------
# Configuration


@dataclass
class RunConfig:
    inputs: list[str] = field(default_factory=list)
    output: str = "out.spcv"
    report: str | None = None     # defaults to <output>.report.txt
    gt: list[str] = field(default_factory=list)
    u: int = 64
    v: int = 64
    seed: int = 0
    jobs: int = 1
    consistency_k: list[int] = field(default_factory=lambda: [8])
    log_every: int = 0
    frame: FrameFitConfig = field(default_factory=FrameFitConfig)
    sequence: SeqFitConfig = field(default_factory=SeqFitConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)

    def __post_init__(self):
        if self.u < 2 or self.v < 2:
            raise ConfigError(f"grid needs u, v >= 2, got {self.u}×{self.v}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        # one metric section drives both stages
        self.frame = dataclasses.replace(self.frame, metric=self.metric)
        self.sequence = dataclasses.replace(self.sequence, metric=self.metric)

    @property
    def report_path(self) -> str:
        return self.report or self.output + ".report.txt"


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}{name}.") if sub else _coerce(fields[name].type, value,
                                                                                 where + name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _coerce(annotation: str, value, key: str):
    # YAML 1.1 reads "1e-3" as a string; numeric fields take it anyway
    kinds = [t.strip() for t in str(annotation).split("|")]
    if value is None and "None" in kinds:
        return None
    for name, conv in (("float", float), ("int", int)):
        if name in kinds and isinstance(value, (str, int, float)) and not isinstance(value, bool):
            try:
                out = conv(value)
            except ValueError:
                break
            if conv is int and isinstance(value, float) and out != value:
                break
            return out
    if kinds[0] in ("float", "int"):
        raise ConfigError(f"{key}: expected {annotation}, got {value!r}")
    return value


_NESTED = {
    (RunConfig, "frame"): FrameFitConfig,
    (RunConfig, "sequence"): SeqFitConfig,
    (RunConfig, "metric"): MetricConfig,
    (FrameFitConfig, "generator"): GeneratorConfig,
}


def _set_dotted(tree: dict, key: str, value) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {p} is not a section")
    node[parts[-1]] = value


def _config_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        out[f.name] = _config_dict(val) if dataclasses.is_dataclass(val) else val
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML run config and apply ``dotted.key -> value`` overrides.

    The config path falls back to ``$SPCV_CONFIG``; no path means all defaults.
    """
    path = path or os.environ.get(CONFIG_ENV)
    data: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(2, "config file not found", str(p))
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    # the frame section may carry its own metric; the shared section is canonical
    if isinstance(data.get("frame"), dict) and "metric" in data["frame"]:
        raise ConfigError("set the metric in the top-level 'metric' section")
    for key, value in (overrides or {}).items():
        _set_dotted(data, key, value)
    return _build(RunConfig, data, "")


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def dump_config(cfg: RunConfig) -> str:
    data = _config_dict(cfg)
    data["frame"].pop("metric", None)
    data["sequence"].pop("metric", None)
    return yaml.safe_dump(data, sort_keys=True)


# ---------------------------------------------------------------------------------------
# Resampling


@dataclass
class Resampled:
    points: np.ndarray
    duplicates: int


def resample(points, m: int, seed: int = 0) -> Resampled:
    """Exactly ``m`` points: FPS when there are more, padding with random repeats of
    the FPS ordering when there are fewer, untouched when the count already fits."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n == 0:
        raise InvalidInputError("cannot resample an empty point cloud")
    if n == m:
        return Resampled(pts.copy(), 0)
    if n > m:
        return Resampled(pts[farthest_point_sample(pts, m, seed_id=0)], 0)
    order = farthest_point_sample(pts, n, seed_id=0)
    extra = np.random.default_rng(seed).choice(n, size=m - n, replace=True)
    return Resampled(np.concatenate([pts[order], pts[order[extra]]]), m - n)


def _load_and_resample(args):
    path, m, seed = args
    return resample(read_point_cloud(path), m, seed)


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------------------
# Commands


@dataclass
class StructurizeResult:
    container: SpcvContainer
    report_text: str
    output: Path
    report: Path
    fit_reports: list = field(default_factory=list)


def _require_inputs(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(2, "input not found", str(p))
        out.append(p)
    return out


def cmd_structurize(cfg: RunConfig) -> StructurizeResult:
    if not cfg.inputs:
        raise ConfigError("no inputs given")
    paths = _require_inputs(cfg.inputs)
    gt_paths = _require_inputs(cfg.gt)
    if gt_paths and len(gt_paths) != len(paths):
        raise InvalidInputError(f"{len(gt_paths)} ground-truth files for {len(paths)} inputs")
    m = cfg.u * cfg.v
    res = _map(_load_and_resample, [(str(p), m, cfg.seed + t) for t, p in enumerate(paths)], cfg.jobs)
    frames = [r.points for r in res]
    fit_reports: list = []
    container = structurize_sequence(frames, cfg.u, cfg.v, cfg.frame, cfg.sequence, seed=cfg.seed,
                                     names=[p.name for p in paths], log_every=cfg.log_every,
                                     reports=fit_reports)
    for meta, r in zip(container.metadata, res):
        meta["duplicates"] = r.duplicates
    fid = fidelity_report(container, frames, seed=cfg.seed)
    cons = None
    if gt_paths:
        gt = [container.transform.apply(read_point_cloud(p)) for p in gt_paths]
        cons = temporal_consistency_ratio(container, gt, cfg.consistency_k)
    extra = {"frames": container.T, "u": cfg.u, "v": cfg.v, "seed": cfg.seed,
             "duplicates": sum(r.duplicates for r in res)}
    for t, meta in enumerate(container.metadata):
        extra[f"fit_loss.{t}"] = repr(meta["fit_loss"])
    text = format_report(consistency=cons, fidelity=fid, extra=extra)
    out, rep = Path(cfg.output), Path(cfg.report_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.parent.mkdir(parents=True, exist_ok=True)
    write_spcv(container, out)
    rep.write_text(text)
    return StructurizeResult(container, text, out, rep, fit_reports)


def cmd_evaluate(spcv_path, originals=(), gt=(), windows=DEFAULT_WINDOWS, ks=(8,),
                 denormalize: bool = False, seed: int = 0) -> str:
    """Smoothness for every frame, consistency when ground truth is given, fidelity when
    the original clouds are given. Returns the report text."""
    (spcv_path,) = _require_inputs([spcv_path])
    container = read_spcv(spcv_path)
    orig_paths = _require_inputs(originals)
    gt_paths = _require_inputs(gt)
    for name, group in (("original", orig_paths), ("ground-truth", gt_paths)):
        if group and len(group) != container.T:
            raise InvalidInputError(f"{len(group)} {name} frames for a {container.T}-frame container")
    fits = [k for k in windows if k <= min(container.U, container.V)]
    smooth = [smoothness_report(container.frames[t], fits) for t in range(container.T)] if fits else None
    cons = None
    if gt_paths:
        cons = temporal_consistency_ratio(container, [container.transform.apply(read_point_cloud(p))
                                                      for p in gt_paths], ks)
    fid = None
    if orig_paths:
        fid = fidelity_report(container, [read_point_cloud(p) for p in orig_paths],
                              denormalize=denormalize, seed=seed)
    return format_report(smooth, cons, fid, extra={"frames": container.T, "u": container.U, "v": container.V})


def cmd_interpolate(spcv_path, t1: int, t2: int, count: int, output) -> SpcvContainer:
    """Insert ``count`` frames at uniform sub-steps of (t1, t2); frames stay time-sorted."""
    (spcv_path,) = _require_inputs([spcv_path])
    c = read_spcv(spcv_path)
    if not (0 <= t1 < t2 < c.T):
        raise InvalidInputError(f"need 0 <= t1 < t2 < {c.T}, got t1={t1} t2={t2}")
    if count < 0:
        raise InvalidInputError("count must be >= 0")
    times = [float(t) for t in range(c.T)]
    frames = list(c.frames)
    meta = list(c.metadata) if c.metadata else [{} for _ in range(c.T)]
    for s in range(1, count + 1):
        t = t1 + (t2 - t1) * s / (count + 1)
        times.append(t)
        frames.append(interpolate_linear(c.frames[t1], c.frames[t2], t1, t2, t))
        meta.append({"source": f"interp({t1},{t2})", "time": t})
    order = sorted(range(len(times)), key=lambda i: (times[i], i))
    keep_meta = bool(c.metadata) or count > 0
    out = SpcvContainer(np.stack([frames[i] for i in order]), c.transform,
                        [meta[i] for i in order] if keep_meta else [])
    write_spcv(out, output)
    return out


def cmd_export(spcv_path, bits: int, directory) -> list[Path]:
    (spcv_path,) = _require_inputs([spcv_path])
    c = read_spcv(spcv_path)
    if c.T == 0 or c.U * c.V == 0:
        raise InvalidInputError("container is empty")
    qfs = quantize_frames(c, bits)
    return export_codec_frames(qfs, directory)


def codec_roundtrip(directory) -> SpcvContainer:
    return dequantize_frames(import_codec_frames(directory))


@dataclass
class FixtureFiles:
    frames: list[Path]
    gt: list[Path]
    manifest: Path


def cmd_make_fixture(kind: str, directory, frames: int = 4, n: int = 4096, step: float = 0.05,
                     fmt: str = "ply-binary-le") -> FixtureFiles:
    """Write a synthetic sequence plus index-aligned ground truth.

    Frame files and ground-truth files carry the same points; ground truth is kept as a
    separate lossless xyz copy so inputs can be re-encoded without breaking alignment.
    """
    if kind not in FIXTURE_KINDS:
        raise InvalidInputError(f"unknown fixture kind {kind!r}; choose from {FIXTURE_KINDS}")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    clouds = make_fixture(kind, frames, n, step)
    ext = {"xyz": "xyz", "off": "off"}.get(fmt, "ply")
    fpaths, gpaths = [], []
    for t, pts in enumerate(clouds):
        fp, gp = d / f"frame{t:04d}.{ext}", d / f"gt{t:04d}.xyz"
        write_point_cloud(pts, fp, fmt)
        write_point_cloud(pts, gp, "xyz")
        fpaths.append(fp)
        gpaths.append(gp)
    manifest = d / "manifest.json"
    manifest.write_text(json.dumps({
        "kind": kind, "frames": [p.name for p in fpaths], "gt": [p.name for p in gpaths],
        "n": int(len(clouds[0])), "step": step, "format": fmt,
    }, indent=2, sort_keys=True) + "\n")
    return FixtureFiles(fpaths, gpaths, manifest)


def held_out_cd(interpolated: np.ndarray, truth) -> float:
    return chamfer(np.asarray(interpolated).reshape(-1, 3), truth)
