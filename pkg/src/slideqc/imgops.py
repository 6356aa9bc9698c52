"""Low-level raster helpers shared by the slide reader, generators, and inference.

Rasters are numpy arrays: HxWx3 uint8 for RGB, HxW uint8 for label/binary
masks. All operations here are deterministic.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def mean_pool(img: np.ndarray, k: int) -> np.ndarray:
    """Mean-pool by integer factor k (floor semantics: trailing remainder rows/cols dropped).

    Returns float64; callers round/cast as needed.
    """
    if k < 1:
        raise ValueError(f"pool factor must be >= 1, got {k}")
    if k == 1:
        return img.astype(np.float64)
    h, w = img.shape[:2]
    hh, ww = h // k, w // k
    if hh == 0 or ww == 0:
        raise ValueError(f"image {w}x{h} too small to pool by {k}")
    img = img[: hh * k, : ww * k]
    if img.ndim == 3:
        return img.reshape(hh, k, ww, k, img.shape[2]).astype(np.float64).mean(axis=(1, 3))
    return img.reshape(hh, k, ww, k).astype(np.float64).mean(axis=(1, 3))


def mean_pool_u8(img: np.ndarray, k: int) -> np.ndarray:
    return np.rint(mean_pool(img, k)).astype(np.uint8)


def _box_sum_1d(img: np.ndarray, radius: int, axis: int) -> np.ndarray:
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="edge")
    c = np.cumsum(padded, axis=axis, dtype=np.float64)
    zeros_shape = list(c.shape)
    zeros_shape[axis] = 1
    c = np.concatenate([np.zeros(zeros_shape), c], axis=axis)
    n = img.shape[axis]
    w = 2 * radius + 1
    hi = np.take(c, np.arange(w, w + n), axis=axis)
    lo = np.take(c, np.arange(0, n), axis=axis)
    return hi - lo


def box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    """Normalized (2r+1)^2 uniform box filter with clamp-to-edge handling.

    radius 0 is the identity. Returns float64.
    """
    if radius < 0:
        raise ValueError(f"blur radius must be >= 0, got {radius}")
    out = img.astype(np.float64)
    if radius == 0:
        return out
    out = _box_sum_1d(out, radius, axis=0)
    out = _box_sum_1d(out, radius, axis=1)
    return out / float((2 * radius + 1) ** 2)


def _pooled_box_rows(x: np.ndarray, radius: int, pool: int) -> np.ndarray:
    """Pooled clamped box sums along axis 0 of a 2-D integer array.

    x is already edge-padded by radius on axis 0; output row j holds
    sum_{t in block j} sum_{u=t-r..t+r} x[u]. Row-vectorized running sums
    instead of cumsum: np.cumsum over axis 0 walks columns element-wise and
    is ~4x slower here.
    """
    win = 2 * radius + 1
    n = x.shape[0] - 2 * radius
    out = np.empty((n // pool, x.shape[1]), np.int64)
    acc = x[:win].sum(axis=0, dtype=np.int64)
    blk = np.zeros(x.shape[1], np.int64)
    j = 0
    for t in range(n):
        blk += acc
        if (t + 1) % pool == 0:
            out[j] = blk
            blk[:] = 0
            j += 1
        if t + 1 < n:
            acc += x[t + win]
            acc -= x[t]
    return out


def box_pool(img: np.ndarray, radius: int, pool: int) -> np.ndarray:
    """box_blur followed by mean_pool, fused over exact integer sums.

    Equal to mean_pool(box_blur(img, radius), pool) up to float64 rounding
    (integer sums here vs per-stage division there), several times faster on
    large uint8 images. Returns float64 at the pooled resolution.
    """
    if radius < 0:
        raise ValueError(f"blur radius must be >= 0, got {radius}")
    if not np.issubdtype(img.dtype, np.integer):
        raise ValueError(f"box_pool needs an integer image, got {img.dtype}")
    h, w = img.shape[:2]
    if h % pool or w % pool:
        raise ValueError(f"image {img.shape} not divisible by pool {pool}")
    arr = img.reshape(h, -1)
    p = np.pad(arr, ((radius, radius), (0, 0)), mode="edge")
    s = _pooled_box_rows(p, radius, pool).reshape(h // pool, w, -1)
    st = np.ascontiguousarray(np.swapaxes(s, 0, 1)).reshape(w, -1)
    p = np.pad(st, ((radius, radius), (0, 0)), mode="edge")
    s = _pooled_box_rows(p, radius, pool).reshape(w // pool, h // pool, -1)
    out = np.swapaxes(s, 0, 1) / float(((2 * radius + 1) * pool) ** 2)
    return out if img.ndim == 3 else out[..., 0]


def value_noise(h: int, w: int, cell: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth noise in [0,1): coarse random grid bilinearly interpolated to HxW.

    float32 output; full-slide textures at float64 would double peak memory.
    """
    gh = h // cell + 2
    gw = w // cell + 2
    grid = rng.random((gh, gw), dtype=np.float32)
    ys = np.arange(h, dtype=np.float32) / cell
    xs = np.arange(w, dtype=np.float32) / cell
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    top = g00 * (1 - fx) + g01 * fx
    bot = g10 * (1 - fx) + g11 * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize of an RGB uint8 raster (used only for non-integer mag ratios)."""
    pil = Image.fromarray(img, mode="RGB")
    return np.asarray(pil.resize((out_w, out_h), Image.BILINEAR))


def resize_nearest_labels(mask: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Nearest-neighbor label resampling; preserves the label alphabet."""
    h, w = mask.shape[:2]
    rows = (np.arange(out_h, dtype=np.int64) * h) // out_h
    cols = (np.arange(out_w, dtype=np.int64) * w) // out_w
    return mask[rows][:, cols]


def save_png(arr: np.ndarray, path, palette: list[tuple[int, int, int]] | None = None) -> None:
    """Save RGB (HxWx3) or single-channel (HxW) raster as PNG.

    Single-channel arrays are written as indexed-palette PNGs when a palette
    is given, grayscale otherwise.
    """
    if arr.ndim == 3:
        Image.fromarray(arr, mode="RGB").save(path)
        return
    if palette is not None:
        img = Image.fromarray(arr, mode="P")
        flat = []
        for rgb in palette:
            flat.extend(rgb)
        flat.extend([0] * (768 - len(flat)))
        img.putpalette(flat)
        img.save(path)
    else:
        Image.fromarray(arr, mode="L").save(path)


def load_png(path) -> np.ndarray:
    """Load a PNG as HxWx3 uint8 (RGB files) or HxW uint8 (palette/gray files).

    Palette files decode to their palette *indices*, not colors.
    """
    img = Image.open(path)
    if img.mode in ("P", "L", "1"):
        return np.asarray(img, dtype=np.uint8)
    return np.asarray(img.convert("RGB"))
