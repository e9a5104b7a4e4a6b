"""On-disk formats: tensor archives (checkpoints, view dumps), config files, PLY, metrics CSV."""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import fields

import numpy as np

MAGIC = b"UCLD"
VERSION = 1

CSV_HEADER = ("scene", "cd_l1", "cd_l2_x1e3", "emd_x1e2", "fscore_5pct", "siou")


class FormatError(ValueError):
    pass


# --- tensor framing -------------------------------------------------------

def _write_section(buf, tensors):
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(buf, n):
    b = buf.read(n)
    if len(b) != n:
        raise FormatError("truncated archive")
    return b


def _read_section(buf):
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", _read_exact(buf, 4))
        name = _read_exact(buf, ln).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(buf, 4))
        shape = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(_read_exact(buf, 4 * size), dtype="<f4").astype(np.float32)
        if name in out:
            raise FormatError(f"duplicate tensor {name!r}")
        out[name] = data.reshape(shape)
    return out


def dump_archive(*sections) -> bytes:
    """Magic, version, then each section as {count, tensors}."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for sec in sections:
        _write_section(buf, sec)
    return buf.getvalue()


def load_archive(data: bytes, sections: int) -> list:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise FormatError("bad magic; not a uclidnet archive")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != VERSION:
        raise FormatError(f"unsupported archive version {version}")
    out = [_read_section(buf) for _ in range(sections)]
    if buf.read(1):
        raise FormatError("trailing bytes after archive")
    return out


def text_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_text(arr) -> str:
    return bytes(np.asarray(arr, dtype=np.float32).astype(np.uint8)).decode("utf-8")


# --- key = value configs --------------------------------------------------

def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw, default, key):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "1")
        if isinstance(default, tuple):
            kind = type(default[0]) if default else int
            return tuple(kind(x.strip()) for x in raw.split(",") if x.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise FormatError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str, defaults: dict) -> dict:
    """Parse ``key = value`` lines against ``defaults`` (which also fixes each type)."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise FormatError(f"line {lineno}: unknown key {key!r}")
        out[key] = _parse_value(raw, defaults[key], key)
    return out


def format_config(obj) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(obj, f.name))}\n" for f in fields(obj))


def dataclass_defaults(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


# --- PLY ------------------------------------------------------------------

def tag_colors(tags) -> np.ndarray:
    """Deterministic RGB per voxel tag."""
    h = (np.asarray(tags, dtype=np.uint64) * np.uint64(2654435761)) & np.uint64(0xFFFFFFFF)
    rgb = np.stack([(h >> np.uint64(s)) & np.uint64(0xFF) for s in (0, 8, 16)], axis=1)
    # keep colors away from black
    return (64 + rgb.astype(np.int64) * 3 // 4).astype(np.uint8)


def ply_text(points, tags) -> str:
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    cols = tag_colors(tags)
    if len(cols) != len(pts):
        raise ValueError("one tag per point required")
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    for (x, y, z), (r, g, b) in zip(pts.tolist(), cols.tolist()):
        # 9 significant digits round-trip any float32
        lines.append(f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}")
    return "\n".join(lines) + "\n"


def write_ply(path, points, tags):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(ply_text(points, tags))


def read_ply(path):
    """Points [n, 3] and colors [n, 3] from an ASCII PLY written by :func:`write_ply`."""
    with open(path, encoding="ascii") as fh:
        lines = fh.read().split("\n")
    if lines[:2] != ["ply", "format ascii 1.0"]:
        raise FormatError("not an ASCII PLY file")
    n = None
    end = None
    for i, line in enumerate(lines):
        if line.startswith("element vertex "):
            n = int(line.split()[2])
        if line == "end_header":
            end = i
            break
    if n is None or end is None:
        raise FormatError("missing vertex element or header end")
    body = [l for l in lines[end + 1:] if l.strip()]
    if len(body) != n:
        raise FormatError(f"header declares {n} vertices, found {len(body)}")
    if n == 0:
        return np.zeros((0, 3), np.float32), np.zeros((0, 3), np.uint8)
    vals = np.array([l.split() for l in body])
    return vals[:, :3].astype(np.float32), vals[:, 3:6].astype(np.uint8)


# --- metrics CSV ----------------------------------------------------------

def write_metrics_csv(path, rows):
    """``rows``: (scene label, values tuple or None for a failed row)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for scene, vals in rows:
            if vals is None:
                w.writerow([scene] + ["failed"] * (len(CSV_HEADER) - 1))
            else:
                w.writerow([scene] + [repr(float(v)) for v in vals])


def read_metrics_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        r = list(csv.reader(fh))
    if tuple(r[0]) != CSV_HEADER:
        raise FormatError("unexpected metrics header")
    return r[1:]
