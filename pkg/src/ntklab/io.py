"""File formats: matrix dumps, CSV tables, JSON manifests, SVG plots, PGM images."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np


def write_matrix_bin(path, M):
    """Little-endian dump: two uint32 (rows, cols) then row-major float64."""
    M = np.atleast_2d(np.asarray(M, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *M.shape))
        fh.write(np.ascontiguousarray(M).tobytes())
    return Path(path)


def read_matrix_bin(path):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: missing 8-byte header")
    rows, cols = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 8 * rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} float64 payload, got {len(raw) - 8} bytes")
    return np.frombuffer(raw, dtype="<f8", offset=8).reshape(rows, cols).copy()


def write_matrix_csv(path, M):
    np.savetxt(path, np.atleast_2d(M), delimiter=",", fmt="%.17g")
    return Path(path)


def write_table_csv(path, columns: dict):
    """Write named equal-length columns; floats use round-trip precision."""
    names = list(columns)
    cols = [np.asarray(columns[k]) for k in names]
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("columns differ in length")
    lines = [",".join(names)]
    for i in range(n):
        lines.append(",".join(_fmt(c[i]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def read_table_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    names = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:]]
    out = {}
    for j, name in enumerate(names):
        vals = [r[j] for r in rows]
        try:
            out[name] = np.array([float(v) for v in vals])
        except ValueError:
            out[name] = vals
    return out


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return Path(path)


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# SVG

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"]


def svg_line_plot(path, series: dict, title="", xlabel="", ylabel="", logy=False, logx=False,
                  width=640, height=420):
    """Minimal line plot. ``series`` maps label -> (x, y)."""
    ml, mr, mt, mb = 70, 20, 40, 50
    pw, ph = width - ml - mr, height - mt - mb

    def tx(v, log):
        v = np.asarray(v, dtype=float)
        return np.log10(v) if log else v

    xs, ys = [], []
    for x, y in series.values():
        x, y = tx(x, logx), tx(y, logy)
        ok = np.isfinite(x) & np.isfinite(y)
        xs.append(x[ok])
        ys.append(y[ok])
    allx = np.concatenate(xs) if xs else np.array([0.0, 1.0])
    ally = np.concatenate(ys) if ys else np.array([0.0, 1.0])
    if allx.size == 0:
        allx = np.array([0.0, 1.0])
    if ally.size == 0:
        ally = np.array([0.0, 1.0])
    x0, x1 = allx.min(), allx.max()
    y0, y1 = ally.min(), ally.max()
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{_esc(title)}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for frac in np.linspace(0, 1, 5):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        xl = f"1e{xv:.1f}" if logx else f"{xv:.3g}"
        yl = f"1e{yv:.1f}" if logy else f"{yv:.3g}"
        out.append(f'<text x="{px(xv):.1f}" y="{mt + ph + 16}" text-anchor="middle" font-size="11">{xl}</text>')
        out.append(f'<text x="{ml - 6}" y="{py(yv) + 4:.1f}" text-anchor="end" font-size="11">{yl}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for k, (label, x, y) in enumerate(zip(series, xs, ys)):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{ml + 8}" y="{mt + 16 + 14 * k}" font-size="11" fill="{color}">{_esc(label)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
    return Path(path)


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# ---------------------------------------------------------------------------
# images

def to_gray(img):
    """Rescale to 0..255 bytes over the image's own range."""
    img = np.asarray(img, dtype=float)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    return np.round(scaled * 255).astype(np.uint8)


def write_pgm(path, img):
    """Binary (P5) grayscale PGM."""
    g = to_gray(img)
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(g.tobytes())
    return Path(path)


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a P5 PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def svg_image_montage(path, images, labels=None, cell=4, cols=8):
    """Grid of grayscale images as SVG rects (one rect per pixel)."""
    labels = labels or [""] * len(images)
    if not images:
        Path(path).write_text('<svg xmlns="http://www.w3.org/2000/svg" width="1" height="1"/>\n')
        return Path(path)
    h, w = np.asarray(images[0]).shape
    tile_w, tile_h = w * cell + 10, h * cell + 24
    rows = (len(images) + cols - 1) // cols
    W, H = tile_w * min(cols, len(images)), tile_h * rows
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>']
    for k, (img, label) in enumerate(zip(images, labels)):
        g = to_gray(img)
        ox, oy = (k % cols) * tile_w + 5, (k // cols) * tile_h + 18
        out.append(f'<text x="{ox}" y="{oy - 5}" font-size="10">{_esc(label)}</text>')
        for i in range(h):
            for j in range(w):
                v = int(g[i, j])
                out.append(f'<rect x="{ox + j * cell}" y="{oy + i * cell}" width="{cell}" height="{cell}" '
                           f'fill="rgb({v},{v},{v})"/>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
    return Path(path)
