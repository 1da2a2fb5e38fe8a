"""Small on-disk formats: PPM/PNG images, float depth grids, key=value configs.

Formats are intentionally simple and fully specified here:

* Images: binary PPM (P6, maxval 255) is the native format. PNG is read and
  written through Pillow when the file extension is ``.png``.
* Depth grids: a one-line ASCII header ``DEPTH <width> <height> <min> <max>``
  followed by ``width*height`` little-endian float32 values in row-major
  order. Missing depth uses the sentinel -1.0 (and is excluded from min/max).
* Config files: one ``key = value`` per line, ``#`` starts a comment.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError, ValidationError

DEPTH_NODATA = -1.0


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float array in [0, 1] as a binary P6 PPM."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected (H, W, 3) image, got shape {image.shape}")
    data = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    data = data.astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM into an (H, W, 3) float32 array in [0, 1]."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise FormatError(f"not a binary PPM (magic {magic!r})", path)
        fields = []
        while len(fields) < 3:
            line = f.readline()
            if not line:
                raise FormatError("truncated PPM header", path)
            line = line.split(b"#", 1)[0]
            fields.extend(line.split())
        w, h, maxval = (int(v) for v in fields)
        if maxval != 255:
            raise FormatError(f"unsupported PPM maxval {maxval}", path)
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise FormatError("truncated PPM pixel data", path)
    data = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float32) / 255.0


def write_image(path, image: np.ndarray) -> None:
    """Write an image as PPM or (if the extension is .png) as PNG."""
    path = os.fspath(path)
    if path.lower().endswith(".png"):
        from PIL import Image

        data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(data, mode="RGB").save(path)
    else:
        write_ppm(path, image)


def read_image(path) -> np.ndarray:
    """Read a PPM or PNG image into (H, W, 3) float32 in [0, 1]."""
    path = os.fspath(path)
    if path.lower().endswith(".png"):
        from PIL import Image

        with Image.open(path) as im:
            data = np.asarray(im.convert("RGB"))
        return data.astype(np.float32) / 255.0
    return read_ppm(path)


def write_depth_grid(path, depth: np.ndarray) -> None:
    """Write a single-channel float32 depth map with a small text header."""
    if depth.ndim != 2:
        raise ValidationError(f"expected (H, W) depth map, got shape {depth.shape}")
    data = np.asarray(depth, dtype=np.float32)
    valid = data != DEPTH_NODATA
    lo = float(data[valid].min()) if valid.any() else 0.0
    hi = float(data[valid].max()) if valid.any() else 0.0
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"DEPTH {w} {h} {lo!r} {hi!r}\n".encode("ascii"))
        f.write(data.astype("<f4").tobytes())


def read_depth_grid(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().split()
        if not header or header[0] != b"DEPTH" or len(header) != 5:
            raise FormatError("bad depth-grid header", path)
        w, h = int(header[1]), int(header[2])
        raw = f.read(w * h * 4)
        if len(raw) != w * h * 4:
            raise FormatError("truncated depth-grid data", path)
    return np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()


def parse_kv_text(text: str, path=None) -> dict[str, str]:
    """Parse flat ``key = value`` text. Duplicate keys are an error."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise FormatError(f"expected 'key = value', got {line.strip()!r}", path, lineno)
        key, value = body.split("=", 1)
        key = key.strip()
        if not key:
            raise FormatError("empty key", path, lineno)
        if key in out:
            raise FormatError(f"duplicate key {key!r}", path, lineno)
        out[key] = value.strip()
    return out


def read_kv_file(path) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise FormatError(f"cannot read config: {e}", path) from e
    return parse_kv_text(text, path)


def write_kv_file(path, values: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key, value in values.items():
            f.write(f"{key} = {value}\n")


def format_float(x: float) -> str:
    """Canonical float formatting (shortest round-trip repr)."""
    return repr(float(x))
