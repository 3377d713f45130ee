"""Point cloud file parsing (PLY ascii / binary little-endian, OFF, XYZ) and the
quantized codec-frame export path."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import SpcvContainer
from .geom import InvalidInputError, NormalizationTransform, as_points

POINT_FORMATS = ("ply-ascii", "ply-binary-le", "off", "xyz")
SIDECAR_NAME = "spcv_frames.json"
SUPPORTED_BITS = (10, 16)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class PointCloudParseError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None, offset: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.line = line
        self.offset = offset


class MissingMetadataError(FileNotFoundError):
    pass


def guess_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".xyz" or suffix == ".txt":
        return "xyz"
    if suffix == ".off":
        return "off"
    if suffix == ".ply":
        with open(path, "rb") as fh:
            head = fh.read(512)
        return "ply-binary-le" if b"binary_little_endian" in head else "ply-ascii"
    raise InvalidInputError(f"cannot infer point cloud format from {path}")


def read_point_cloud(path, fmt: str | None = None) -> np.ndarray:
    path = Path(path)
    fmt = fmt or guess_format(path)
    if fmt == "xyz":
        return _read_xyz(path)
    if fmt == "off":
        return _read_off(path)
    if fmt in ("ply-ascii", "ply-binary-le"):
        return _read_ply(path, fmt)
    raise InvalidInputError(f"unsupported point cloud format {fmt!r}")


def _read_xyz(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            parts = s.replace(",", " ").split()
            if len(parts) < 3:
                raise PointCloudParseError(f"expected at least 3 values, got {len(parts)}", path, lineno)
            try:
                rows.append([float(x) for x in parts[:3]])
            except ValueError as exc:
                raise PointCloudParseError(str(exc), path, lineno) from exc
    if not rows:
        raise PointCloudParseError("no points found", path)
    return as_points(rows)


def _read_off(path: Path) -> np.ndarray:
    with open(path) as fh:
        lines = [(i, l.split("#", 1)[0].strip()) for i, l in enumerate(fh, 1)]
    lines = [(i, l) for i, l in lines if l]
    if not lines or not lines[0][1].startswith("OFF"):
        raise PointCloudParseError("missing OFF header", path, lines[0][0] if lines else 1)
    first = lines[0][1][3:].split()
    pos = 1
    if not first:
        if len(lines) < 2:
            raise PointCloudParseError("missing element counts", path, lines[0][0])
        first = lines[1][1].split()
        pos = 2
    try:
        nv = int(first[0])
    except (ValueError, IndexError) as exc:
        raise PointCloudParseError("bad element counts", path, lines[pos - 1][0]) from exc
    if len(lines) < pos + nv:
        raise PointCloudParseError(f"header declares {nv} vertices, file has {len(lines) - pos} data lines",
                                   path, lines[-1][0])
    pts = []
    for lineno, l in lines[pos:pos + nv]:
        parts = l.split()
        try:
            pts.append([float(x) for x in parts[:3]])
        except ValueError as exc:
            raise PointCloudParseError(str(exc), path, lineno) from exc
        if len(parts) < 3:
            raise PointCloudParseError("vertex needs 3 coordinates", path, lineno)
    return as_points(pts)


@dataclass
class _PlyElement:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, (count_dtype, item_dtype))


def _parse_ply_header(fh, path):
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise PointCloudParseError("missing 'ply' magic", path, 1, 0)
    fmt = None
    elements: list[_PlyElement] = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PointCloudParseError("header not terminated by end_header", path, lineno)
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
        elif parts[0] == "element":
            try:
                elements.append(_PlyElement(parts[1], int(parts[2])))
            except (IndexError, ValueError) as exc:
                raise PointCloudParseError("malformed element line", path, lineno) from exc
        elif parts[0] == "property":
            if not elements:
                raise PointCloudParseError("property before any element", path, lineno)
            try:
                if parts[1] == "list":
                    elements[-1].props.append((parts[4], (_PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
                else:
                    elements[-1].props.append((parts[2], _PLY_TYPES[parts[1]]))
            except (IndexError, KeyError) as exc:
                raise PointCloudParseError(f"malformed property line {raw!r}", path, lineno) from exc
        else:
            raise PointCloudParseError(f"unknown header keyword {parts[0]!r}", path, lineno)
    return fmt, elements, lineno


def _read_ply(path: Path, fmt: str) -> np.ndarray:
    with open(path, "rb") as fh:
        file_fmt, elements, header_lines = _parse_ply_header(fh, path)
        body_offset = fh.tell()
        body = fh.read()
    want = {"ply-ascii": "ascii", "ply-binary-le": "binary_little_endian"}[fmt]
    if file_fmt != want:
        raise PointCloudParseError(f"format is {file_fmt!r}, expected {want!r}", path, None, 0)
    vertex = next((e for e in elements if e.name == "vertex"), None)
    if vertex is None:
        raise PointCloudParseError("no vertex element", path)
    names = [p[0] for p in vertex.props]
    for axis in "xyz":
        if axis not in names:
            raise PointCloudParseError(f"vertex element lacks property {axis!r}", path)
    if fmt == "ply-ascii":
        return _read_ply_ascii(path, body, elements, header_lines)
    return _read_ply_binary(path, body, elements, body_offset)


def _read_ply_ascii(path, body: bytes, elements, header_lines: int) -> np.ndarray:
    lines = body.decode("ascii", errors="replace").splitlines()
    pos = 0
    for el in elements:
        if el.name != "vertex":
            pos += el.count
            continue
        if pos + el.count > len(lines):
            raise PointCloudParseError(f"vertex element declares {el.count} rows, file ends early",
                                       path, header_lines + len(lines))
        cols = {name: i for i, (name, t) in enumerate(el.props)}
        if any(isinstance(t, tuple) for _, t in el.props):
            raise PointCloudParseError("list properties on vertices are not supported", path)
        pts = np.empty((el.count, 3))
        for r in range(el.count):
            parts = lines[pos + r].split()
            if len(parts) < len(el.props):
                raise PointCloudParseError(f"expected {len(el.props)} values", path, header_lines + pos + r + 1)
            try:
                pts[r] = [float(parts[cols[a]]) for a in "xyz"]
            except ValueError as exc:
                raise PointCloudParseError(str(exc), path, header_lines + pos + r + 1) from exc
        return as_points(pts)
    raise PointCloudParseError("no vertex element", path)


def _read_ply_binary(path, body: bytes, elements, body_offset: int) -> np.ndarray:
    pos = 0
    for el in elements:
        has_list = any(isinstance(t, tuple) for _, t in el.props)
        if not has_list:
            dt = np.dtype([(name, "<" + t) for name, t in el.props])
            nbytes = dt.itemsize * el.count
            if pos + nbytes > len(body):
                raise PointCloudParseError(f"element {el.name!r} truncated", path, None, body_offset + pos)
            if el.name == "vertex":
                rec = np.frombuffer(body, dtype=dt, count=el.count, offset=pos)
                return as_points(np.stack([rec[a].astype(np.float64) for a in "xyz"], axis=1))
            pos += nbytes
            continue
        if el.name == "vertex":
            raise PointCloudParseError("list properties on vertices are not supported", path)
        # skip variable-length rows (faces) property by property
        for _ in range(el.count):
            for _, t in el.props:
                if isinstance(t, tuple):
                    cdt, idt = np.dtype("<" + t[0]), np.dtype("<" + t[1])
                    if pos + cdt.itemsize > len(body):
                        raise PointCloudParseError(f"element {el.name!r} truncated", path, None, body_offset + pos)
                    cnt = int(np.frombuffer(body, cdt, 1, pos)[0])
                    pos += cdt.itemsize + cnt * idt.itemsize
                else:
                    pos += np.dtype(t).itemsize
        if pos > len(body):
            raise PointCloudParseError(f"element {el.name!r} truncated", path, None, body_offset + len(body))
    raise PointCloudParseError("no vertex element", path)


def write_point_cloud(points, path, fmt: str | None = None) -> None:
    """Write positions only. Binary PLY stores float64 so reading back is bit-exact."""
    pts = as_points(points)
    path = Path(path)
    if fmt is None:
        fmt = {".xyz": "xyz", ".off": "off"}.get(path.suffix.lower(), "ply-binary-le")
    if fmt == "xyz":
        path.write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()))
    elif fmt == "off":
        path.write_text(f"OFF\n{len(pts)} 0 0\n" + "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()))
    elif fmt in ("ply-ascii", "ply-binary-le"):
        kind = "ascii" if fmt == "ply-ascii" else "binary_little_endian"
        header = (f"ply\nformat {kind} 1.0\nelement vertex {len(pts)}\n"
                  "property double x\nproperty double y\nproperty double z\nend_header\n")
        if fmt == "ply-ascii":
            path.write_text(header + "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()))
        else:
            path.write_bytes(header.encode("ascii") + pts.astype("<f8").tobytes())
    else:
        raise InvalidInputError(f"unsupported point cloud format {fmt!r}")


# ---------------------------------------------------------------------------------------
# Quantization and codec frames


@dataclass
class QuantizedFrameSet:
    planes: np.ndarray       # (T, 3, U, V) uint16
    lo: np.ndarray           # (3,) per-axis range start
    hi: np.ndarray           # (3,) per-axis range end
    bits: int
    transform: NormalizationTransform = field(default_factory=lambda: NormalizationTransform((0.0, 0.0, 0.0), 1.0))
    metadata: list[dict] = field(default_factory=list)

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    def step(self) -> np.ndarray:
        return (self.hi - self.lo) / self.levels


def quantize_frames(container: SpcvContainer, bits: int = 16, value_range=None) -> QuantizedFrameSet:
    """Per-axis linear quantization over the sequence-wide range.

    ``value_range`` declares the range explicitly, either as ``(lo, hi)`` scalars or
    as two 3-vectors; values outside it are rejected. By default the data min/max
    per axis is used.
    """
    if bits not in SUPPORTED_BITS:
        raise InvalidInputError(f"unsupported bit depth {bits}; choose one of {SUPPORTED_BITS}")
    if container.T == 0:
        raise InvalidInputError("container has no frames")
    data = container.frames
    flat = data.reshape(-1, 3)
    if value_range is None:
        lo, hi = flat.min(axis=0), flat.max(axis=0)
    else:
        lo = np.broadcast_to(np.asarray(value_range[0], dtype=np.float64), (3,)).copy()
        hi = np.broadcast_to(np.asarray(value_range[1], dtype=np.float64), (3,)).copy()
        if np.any(hi < lo):
            raise InvalidInputError("value range has hi < lo")
        if np.any(flat < lo) or np.any(flat > hi):
            raise InvalidInputError("frame values fall outside the declared quantization range")
    levels = (1 << bits) - 1
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    q = np.rint((data - lo) / safe * levels)
    q = np.where(span > 0, q, 0.0)
    q = np.clip(q, 0, levels).astype(np.uint16)
    return QuantizedFrameSet(np.ascontiguousarray(q.transpose(0, 3, 1, 2)), lo.copy(), hi.copy(), bits,
                             container.transform, list(container.metadata))


def dequantize_frames(qfs: QuantizedFrameSet) -> SpcvContainer:
    q = qfs.planes.transpose(0, 2, 3, 1).astype(np.float64)
    frames = qfs.lo + q * qfs.step()
    return SpcvContainer(frames, qfs.transform, list(qfs.metadata))


def export_codec_frames(qfs: QuantizedFrameSet, directory) -> list[Path]:
    """One planar little-endian 16-bit file per frame (x, y, z planes) plus a JSON sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for t in range(qfs.planes.shape[0]):
        p = d / f"{t:06d}.raw"
        p.write_bytes(qfs.planes[t].astype("<u2").tobytes())
        names.append(p)
    t_, _, u, v = qfs.planes.shape
    sidecar = {
        "format": "planar-u16le",
        "planes": ["x", "y", "z"],
        "frames": [p.name for p in names],
        "T": t_, "U": u, "V": v,
        "bits": qfs.bits,
        "lo": [float(x) for x in qfs.lo],
        "hi": [float(x) for x in qfs.hi],
        "center": list(qfs.transform.center),
        "scale": qfs.transform.scale,
        "metadata": qfs.metadata,
    }
    (d / SIDECAR_NAME).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return names


def import_codec_frames(directory) -> QuantizedFrameSet:
    d = Path(directory)
    side = d / SIDECAR_NAME
    if not side.exists():
        raise MissingMetadataError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    u, v, bits = meta["U"], meta["V"], meta["bits"]
    planes = np.empty((len(meta["frames"]), 3, u, v), dtype=np.uint16)
    for t, name in enumerate(meta["frames"]):
        raw = (d / name).read_bytes()
        if len(raw) != 3 * u * v * 2:
            raise InvalidInputError(f"{name}: expected {3 * u * v * 2} bytes, got {len(raw)}")
        planes[t] = np.frombuffer(raw, dtype="<u2").reshape(3, u, v)
    return QuantizedFrameSet(planes, np.asarray(meta["lo"], dtype=np.float64), np.asarray(meta["hi"], dtype=np.float64),
                             bits, NormalizationTransform(tuple(meta["center"]), meta["scale"]), meta.get("metadata", []))
