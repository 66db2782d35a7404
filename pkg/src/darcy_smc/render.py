"""Rainbow rendering of scalar fields to plain portable pixmaps.

Field values are normalized to [0, 1] per image, quantized to 256 hue
levels, and mapped through HSV with full saturation and value.  The plain
(uncompressed) pixmap format keeps outputs byte-reproducible without any
codec dependency.
"""

from __future__ import annotations

import numpy as np

__all__ = ["quantize_levels", "hue_levels_to_rgb", "write_ppm", "render_field"]

N_LEVELS = 256


def quantize_levels(values: np.ndarray) -> np.ndarray:
    """Map finite field values to integer hue levels 0..255.

    The minimum maps to level 0 and the maximum to level 255; a constant
    field degenerates to level 0 everywhere.
    """
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("field values must be finite")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros(values.shape, dtype=np.int64)
    norm = (values - lo) / (hi - lo)
    return np.floor(norm * (N_LEVELS - 1) + 0.5).astype(np.int64)


def hue_levels_to_rgb(levels: np.ndarray) -> np.ndarray:
    """HSV (hue = level/255, saturation = value = 1) to 8-bit RGB."""
    hue = levels / (N_LEVELS - 1)
    h6 = hue * 6.0
    sector = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    one = np.ones_like(f)
    zero = np.zeros_like(f)
    q = 1.0 - f
    channels = {
        0: (one, f, zero),
        1: (q, one, zero),
        2: (zero, one, f),
        3: (zero, q, one),
        4: (f, zero, one),
        5: (one, zero, q),
    }
    rgb = np.zeros(levels.shape + (3,))
    for sec, (r, g, b) in channels.items():
        mask = sector == sec
        rgb[mask, 0] = r[mask]
        rgb[mask, 1] = g[mask]
        rgb[mask, 2] = b[mask]
    return np.floor(rgb * 255 + 0.5).astype(np.int64)


def write_ppm(path, rgb: np.ndarray, comments=()) -> None:
    """Write an (h, w, 3) 8-bit RGB array as a plain PPM (type P3)."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("rgb must have shape (height, width, 3)")
    height, width = rgb.shape[:2]
    lines = ["P3"]
    lines += [f"# {c}" for c in comments]
    lines.append(f"{width} {height}")
    lines.append("255")
    flat = rgb.reshape(height, width * 3)
    for row in flat:
        lines.append(" ".join(str(int(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def render_field(values: np.ndarray, path, comments=()) -> np.ndarray:
    """Render a 2-d field array to a pixmap; returns the hue levels used.

    The first array axis runs down the image.  Normalization is per image;
    the value range is recorded in the file comments.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("render_field expects a 2-d array")
    levels = quantize_levels(values)
    rgb = hue_levels_to_rgb(levels)
    meta = list(comments) + [
        f"normalization=per-image min={values.min()!r} max={values.max()!r}"
    ]
    write_ppm(path, rgb, meta)
    return levels
