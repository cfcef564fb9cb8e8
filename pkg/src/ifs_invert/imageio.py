"""PNG input/output and input conditioning.

Internally the fractal is 1 and the background 0. On disk the default is the
opposite (dark fractal on white paper), so reads and writes invert unless told
otherwise.
"""

from __future__ import annotations

import logging

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

# fraction of the side left empty on each side of the foreground
PADDING = 0.25


def load_image(path, invert: bool = True) -> np.ndarray:
    """Read an 8- or 16-bit grayscale (or RGB) PNG into a float array in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            peak = 65535.0 if arr.max(initial=0) > 255 or im.mode.startswith("I;16") else 255.0
            img = arr / peak
        else:
            img = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    img = np.clip(img, 0.0, 1.0)
    return 1.0 - img if invert else img


def save_image(path, img, invert: bool = True, bits: int = 8) -> None:
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if invert:
        img = 1.0 - img
    if bits == 8:
        Image.fromarray(np.round(img * 255.0).astype(np.uint8), mode="L").save(path)
    elif bits == 16:
        Image.fromarray(np.round(img * 65535.0).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def foreground_bbox(img, tau: float = 0.5):
    """``(row0, row1, col0, col1)`` half-open bounds of pixels >= tau, or None."""
    mask = np.asarray(img) >= tau
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def resize_square(img, size: int, mode: str = "max") -> np.ndarray:
    """Resize a square image to ``size``.

    Integer downscales pool blocks: ``max`` keeps one-pixel-wide structure (a
    pixel is lit if anything under it is), ``mean`` averages. Other ratios fall
    back to a box filter.
    """
    img = np.asarray(img, dtype=np.float64)
    n = img.shape[0]
    if n == size:
        return img
    if n % size == 0:
        blocks = img.reshape(size, n // size, size, n // size)
        return blocks.max(axis=(1, 3)) if mode == "max" else blocks.mean(axis=(1, 3))
    pil = Image.fromarray(img.astype(np.float32), mode="F").resize((size, size), Image.Resampling.BOX)
    return np.clip(np.asarray(pil, dtype=np.float64), 0.0, 1.0)


def ensure_padding(img, tol: float = 0.02) -> tuple[np.ndarray, bool]:
    """Re-centre and rescale so the foreground box spans the middle half of the canvas.

    Returns the (possibly) modified square image and whether anything changed.
    Images already within ``tol`` (in fractions of the side) of the assumed
    layout are returned untouched.
    """
    img = np.asarray(img, dtype=np.float64)
    n = img.shape[0]
    if img.ndim != 2 or img.shape[1] != n:
        raise ValueError(f"expected a square image, got {img.shape}")
    box = foreground_bbox(img)
    if box is None:
        return img, False
    r0, r1, c0, c1 = box
    side = max(r1 - r0, c1 - c0)
    cy, cx = (r0 + r1) / 2.0, (c0 + c1) / 2.0
    if abs(side / n - (1.0 - 2 * PADDING)) <= tol and abs(cx / n - 0.5) <= tol and abs(cy / n - 0.5) <= tol:
        return img, False
    # crop a square around the box, then place it in the centre of a blank canvas
    half = side / 2.0
    top, left = int(round(cy - half)), int(round(cx - half))
    crop = np.zeros((side, side))
    src = img[max(top, 0):top + side, max(left, 0):left + side]
    crop[max(-top, 0):max(-top, 0) + src.shape[0], max(-left, 0):max(-left, 0) + src.shape[1]] = src
    inner = max(1, int(round(n * (1.0 - 2 * PADDING))))
    scaled = np.asarray(Image.fromarray(crop.astype(np.float32), mode="F").resize((inner, inner),
                                                                                   Image.Resampling.BILINEAR))
    out = np.zeros((n, n))
    o = (n - inner) // 2
    out[o:o + inner, o:o + inner] = np.clip(scaled, 0.0, 1.0)
    logger.info("input re-padded: foreground box %s rescaled to the central %d px", box, inner)
    return out, True


def prepare_target(img, canvas: int, pad: bool = True, resize: str = "max") -> np.ndarray:
    """Square-check, pad and resize an input image to the optimisation canvas."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"input image must be square, got {img.shape}")
    if pad:
        img, _ = ensure_padding(img)
    return resize_square(img, canvas, resize)
