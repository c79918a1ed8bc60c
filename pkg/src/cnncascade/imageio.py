"""Netpbm (PGM/PPM) I/O with optional Pillow fallback, and rectangle drawing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated netpbm header")
        out.append(data[start:pos])
    return out, pos


def parse_netpbm(data: bytes) -> np.ndarray:
    """P2/P5 -> (H, W) uint8; P3/P6 -> (H, W, 3) uint8.  16-bit data is scaled to 8 bits."""
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ImageFormatError("not a PGM/PPM file")
    try:
        (w, h, maxval), pos = _tokens(data, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError("bad netpbm header") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"bad netpbm geometry {w}x{h} maxval {maxval}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    n = w * h * channels
    if magic in (b"P5", b"P6"):
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        raw = data[pos:pos + n * dtype.itemsize]
        if len(raw) < n * dtype.itemsize:
            raise ImageFormatError("truncated netpbm pixel data")
        px = np.frombuffer(raw, dtype).astype(np.float64)
    else:
        toks, _ = _tokens(data, n, pos)
        px = np.array([int(t) for t in toks], np.float64)
    if maxval != 255:
        px = np.floor(px * 255.0 / maxval + 0.5)
    img = np.clip(px, 0, 255).astype(np.uint8)
    return img.reshape(h, w, 3) if channels == 3 else img.reshape(h, w)


def encode_netpbm(image: np.ndarray) -> bytes:
    a = np.asarray(image)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot encode array of shape {a.shape}")
    a = np.clip(np.floor(np.asarray(a, np.float64) + 0.5), 0, 255).astype(np.uint8)
    return magic + f"\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + a.tobytes()


def read_image(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P2", b"P3", b"P5", b"P6"):
        return parse_netpbm(data)
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageFormatError(f"{path.name}: only PGM/PPM are supported without Pillow") from exc
    try:
        with Image.open(path) as im:
            im = im.convert("L") if im.mode in ("L", "I", "I;16", "1", "P", "LA") else im.convert("RGB")
            return np.asarray(im, np.uint8)
    except OSError as exc:
        raise ImageFormatError(f"{path.name}: unreadable image") from exc


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        path.write_bytes(encode_netpbm(image))
        return
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageFormatError("writing non-netpbm images needs Pillow") from exc
    Image.fromarray(np.asarray(image, np.uint8)).save(path)


def draw_rects(image: np.ndarray, rects, value=255, thickness: int = 1) -> np.ndarray:
    """Copy of ``image`` with rectangle outlines burned in."""
    out = np.array(image, copy=True)
    h, w = out.shape[:2]
    for x, y, rw, rh in rects:
        x0, y0 = int(round(x)), int(round(y))
        x1, y1 = int(round(x + rw)) - 1, int(round(y + rh)) - 1
        for t in range(thickness):
            xa, ya, xb, yb = x0 + t, y0 + t, x1 - t, y1 - t
            if xa > xb or ya > yb:
                break
            cx0, cx1 = max(xa, 0), min(xb, w - 1)
            cy0, cy1 = max(ya, 0), min(yb, h - 1)
            if cx0 > cx1 or cy0 > cy1:
                continue
            for yy in (ya, yb):
                if 0 <= yy < h:
                    out[yy, cx0:cx1 + 1] = value
            for xx in (xa, xb):
                if 0 <= xx < w:
                    out[cy0:cy1 + 1, xx] = value
    return out
