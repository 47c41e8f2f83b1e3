"""Deterministic artifact writers: CSV, JSON, 8-bit images, SVG plots, and a
write-once output directory that keeps a hash manifest."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

SEPARATOR_VALUE = 255


def fmt(x) -> str:
    """Shortest round-trip text for a float; ints and None pass through."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) for x in row])
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        # JSON has no NaN/inf; undefined values travel as null
        return x if np.isfinite(x) else None
    return obj


# ---------------------------------------------------------------------------
# images


def quantize(img) -> np.ndarray:
    """Clamp to [0, 1] and round half-to-even onto 0..255."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.rint(x * 255.0).astype(np.uint8)


def image_grid(tiles) -> np.ndarray:
    """Assemble ``(rows, cols, h, w)`` 8-bit tiles with 1-pixel separators."""
    tiles = np.asarray(tiles, dtype=np.uint8)
    rows, cols, h, w = tiles.shape
    out = np.full((rows * (h + 1) - 1, cols * (w + 1) - 1), SEPARATOR_VALUE, dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            out[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = tiles[r, c]
    return out


def pgm_bytes(img) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _chunk(tag: bytes, body: bytes) -> bytes:
    return (struct.pack(">I", len(body)) + tag + body
            + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF))


def png_bytes(img) -> bytes:
    """8-bit grayscale PNG with filter type 0 on every row."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(h))
    return (b"\x89PNG\r\n\x1a\n"
            + _chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0))
            + _chunk(b"IDAT", zlib.compress(raw, 9))
            + _chunk(b"IEND", b""))


# ---------------------------------------------------------------------------
# plots

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#7f7f7f")


def svg_plot(series: dict, title: str = "", log_y: bool = False, width: int = 480,
             height: int = 320, xlabel: str = "", ylabel: str = "") -> str:
    """Polyline plot of ``{label: (x, y)}``; non-positive values are dropped on log axes."""
    prepared = {}
    for label, (x, y) in series.items():
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        keep = np.isfinite(x) & np.isfinite(y)
        if log_y:
            keep &= y > 0
            y = np.where(keep, np.log10(np.where(keep, y, 1.0)), 0.0)
        prepared[label] = (x[keep], y[keep])
    xs = np.concatenate([p[0] for p in prepared.values()] or [np.zeros(1)])
    ys = np.concatenate([p[1] for p in prepared.values()] or [np.zeros(1)])
    if xs.size == 0:
        xs = ys = np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    ml, mr, mt, mb = 60, 110, 30, 40
    pw, ph = width - ml - mr, height - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
           f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" '
           f'font-size="11">{xlabel}</text>',
           f'<text x="12" y="{mt + ph / 2:.1f}" font-size="11" transform="rotate(-90 12 '
           f'{mt + ph / 2:.1f})" text-anchor="middle">{ylabel}{" (log10)" if log_y else ""}</text>']
    for val, y in ((y0, py(y0)), (y1, py(y1))):
        out.append(f'<text x="{ml - 4}" y="{y + 4:.1f}" text-anchor="end" font-size="10">'
                   f'{val:.3g}</text>')
    for val, x in ((x0, px(x0)), (x1, px(x1))):
        out.append(f'<text x="{x:.1f}" y="{mt + ph + 14}" text-anchor="middle" '
                   f'font-size="10">{val:.3g}</text>')
    for i, (label, (x, y)) in enumerate(prepared.items()):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{ml + pw + 8}" y="{mt + 12 + 14 * i}" font-size="10" '
                   f'fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# output directory


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class OutputDir:
    """Write-once directory: refuses to reuse a non-empty directory unless forced.

    Every write is recorded so the manifest covers all emitted files.
    """

    def __init__(self, path, force: bool = False):
        self.path = Path(path)
        if self.path.exists():
            if not self.path.is_dir():
                raise FileExistsError(f"{self.path} exists and is not a directory")
            if any(self.path.iterdir()) and not force:
                raise FileExistsError(f"{self.path} is not empty; pass --force to overwrite")
        self.path.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def write_bytes(self, name: str, data: bytes) -> Path:
        target = self.path / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
        self.files[name] = sha256(data)
        return target

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode("utf-8"))

    def manifest(self) -> list[dict]:
        return [{"path": k, "sha256": v} for k, v in sorted(self.files.items())]


def verify_manifest(directory, manifest) -> list[str]:
    """Paths whose file is missing or whose hash no longer matches."""
    bad = []
    for entry in manifest:
        p = Path(directory) / entry["path"]
        if not p.is_file() or sha256(p.read_bytes()) != entry["sha256"]:
            bad.append(entry["path"])
    return bad
