"""Corruption masks: procedural irregular I-masks and sounding-object S-masks.

Convention: 1 marks a missing pixel.  PNG files store holes as 255.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .errors import GenerationError, InvalidInputError

log = logging.getLogger(__name__)

_STRUCT = np.ones((3, 3), dtype=bool)


def _check_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise InvalidInputError(f"mask must be a non-empty 2-D grid, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise InvalidInputError("mask values must be 0 or 1")
    return m.astype(np.uint8)


def coverage(mask) -> float:
    m = _check_mask(mask)
    return float(m.sum()) / m.size


# ----------------------------------------------------------------------------
# I-masks
# ----------------------------------------------------------------------------

def _random_element(canvas: np.ndarray, rng: np.random.Generator, scale: float) -> None:
    h, w = canvas.shape
    size = max(3, int((h + w) * 0.03 * scale))
    kind = rng.integers(3)
    if kind == 0:
        # stroke: short random walk of thick segments
        x, y = int(rng.integers(w)), int(rng.integers(h))
        thickness = int(rng.integers(max(2, size // 3), size + 1))
        for _ in range(int(rng.integers(2, 6))):
            angle = rng.uniform(0, 2 * np.pi)
            length = rng.uniform(0.05, 0.2) * max(h, w)
            nx = int(np.clip(x + length * np.cos(angle), 0, w - 1))
            ny = int(np.clip(y + length * np.sin(angle), 0, h - 1))
            cv2.line(canvas, (x, y), (nx, ny), 1, thickness)
            x, y = nx, ny
    elif kind == 1:
        center = (int(rng.integers(w)), int(rng.integers(h)))
        axes = (int(rng.integers(2, max(3, w // 8))), int(rng.integers(2, max(3, h // 8))))
        cv2.ellipse(canvas, center, axes, float(rng.uniform(0, 180)), 0, 360, 1, -1)
    else:
        center = (int(rng.integers(w)), int(rng.integers(h)))
        axes = (int(rng.integers(3, max(4, w // 5))), int(rng.integers(3, max(4, h // 5))))
        start = float(rng.uniform(0, 180))
        thickness = int(rng.integers(max(2, size // 3), size + 1))
        cv2.ellipse(canvas, center, axes, float(rng.uniform(0, 180)), start,
                    start + float(rng.uniform(90, 270)), 1, thickness)


def generate_imask(h: int, w: int, target_ratio: float, rng: np.random.Generator,
                   tolerance: float = 0.02, max_attempts: int = 200) -> np.ndarray:
    """Union of random thick strokes and ellipses covering ``target_ratio`` +- ``tolerance``.

    Elements are added one by one; an element that would overshoot the band
    is discarded and redrawn at a smaller scale.
    """
    if not 0.0 < target_ratio < 0.5:
        raise InvalidInputError(f"target_ratio must lie in (0, 0.5), got {target_ratio}")
    if h <= 0 or w <= 0:
        raise InvalidInputError("mask size must be positive")
    mask = np.zeros((h, w), dtype=np.uint8)
    lo, hi = target_ratio - tolerance, target_ratio + tolerance
    scale = 1.0
    for _ in range(max_attempts):
        candidate = mask.copy()
        _random_element(candidate, rng, scale)
        cov = candidate.mean()
        if cov > hi:
            scale = max(0.2, scale * 0.7)
            continue
        mask = candidate
        if cov >= lo and (cov >= target_ratio or rng.random() < 0.5):
            return mask
    if lo <= mask.mean() <= hi:
        return mask
    raise GenerationError(
        f"could not reach coverage {target_ratio:.3f} within {max_attempts} attempts")


# ----------------------------------------------------------------------------
# S-masks
# ----------------------------------------------------------------------------

@dataclass
class SMaskResult:
    mask: np.ndarray
    direction: str  # "dilate", "erode", "none" or "fallback"
    steps: int
    fallback: bool = False


def centered_square(h: int, w: int, target_ratio: float) -> np.ndarray:
    """Near-square block centred in the frame with exactly round(ratio*h*w) pixels."""
    n = int(round(target_ratio * h * w))
    side = min(int(np.floor(np.sqrt(n))), h, w)
    rows_full = min(n // side, h)
    extra = n - rows_full * side
    top = (h - rows_full - (1 if extra else 0)) // 2
    left = (w - side) // 2
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[top:top + rows_full, left:left + side] = 1
    if extra:
        mask[top + rows_full, left:left + extra] = 1
    return mask


def _partial_step(before: np.ndarray, after: np.ndarray, n_target: int) -> np.ndarray:
    """Take only part of the last morphological ring so the count hits `n_target`.

    Ring pixels are ordered by distance to the pre-step mask (growing) or to
    its background (shrinking), ties broken in raster order.
    """
    grow = after.sum() > before.sum()
    ring = (after != before)
    if grow:
        dist = ndimage.distance_transform_edt(before == 0)
        need = n_target - int(before.sum())
    else:
        dist = ndimage.distance_transform_edt(before)
        need = int(before.sum()) - n_target
    idx = np.flatnonzero(ring)
    order = idx[np.argsort(dist.ravel()[idx], kind="stable")]
    out = before.copy().ravel()
    if grow:
        out[order[:need]] = 1
    else:
        out[order[:need]] = 0
    return out.reshape(before.shape)


def morph_step(mask: np.ndarray, direction: str) -> np.ndarray:
    """One 3x3 dilation or erosion; pixels outside the frame count as background."""
    if direction == "dilate":
        return ndimage.binary_dilation(mask, structure=_STRUCT).astype(np.uint8)
    return ndimage.binary_erosion(mask, structure=_STRUCT, border_value=0).astype(np.uint8)


def generate_smask(object_mask, target_ratio: float = 0.20, tolerance: float = 0.01,
                   max_steps: int = 1000) -> SMaskResult:
    """Grow or shrink an object footprint until it covers ``target_ratio`` of the frame.

    Dilates while coverage is below the target and erodes while above, stopping
    at the first 3x3 step that crosses it.  If that step lands outside the
    tolerance band, only the part of its ring nearest the previous mask is
    kept.  An empty input yields a centred square with a fallback flag.
    """
    m = _check_mask(object_mask)
    h, w = m.shape
    n_total = h * w
    n_target = int(round(target_ratio * n_total))
    if m.sum() == 0:
        log.warning("empty object mask; using centred-square S-mask")
        return SMaskResult(centered_square(h, w, target_ratio), "fallback", 0, fallback=True)

    cov = m.sum() / n_total
    if abs(cov - target_ratio) <= 0.5 / n_total or m.sum() == n_target:
        return SMaskResult(m.copy(), "none", 0)
    direction = "dilate" if cov < target_ratio else "erode"
    current = m
    for step in range(1, max_steps + 1):
        nxt = morph_step(current, direction)
        n_next = int(nxt.sum())
        if n_next == int(current.sum()):
            # stalled: full frame reached, or erosion emptied the mask
            break
        crossed = n_next >= n_target if direction == "dilate" else n_next <= n_target
        if crossed:
            if abs(n_next / n_total - target_ratio) > tolerance:
                nxt = _partial_step(current, nxt, n_target)
            return SMaskResult(nxt, direction, step)
        current = nxt
    raise GenerationError(f"S-mask adjustment stalled at coverage {current.mean():.4f}")


def upsample_mask(mask, size: int) -> np.ndarray:
    """Nearest-neighbour upsampling of a feature-resolution mask to size x size."""
    m = _check_mask(mask)
    return cv2.resize(m, (size, size), interpolation=cv2.INTER_NEAREST)


# ----------------------------------------------------------------------------
# Application and persistence
# ----------------------------------------------------------------------------

def apply_mask(frame, mask) -> np.ndarray:
    """Zero the holes of a 3xHxW frame and append the mask as a 4th channel."""
    f = np.asarray(frame, dtype=np.float32)
    m = _check_mask(mask)
    if f.ndim != 3 or f.shape[0] not in (3, 4) or f.shape[1:] != m.shape:
        raise InvalidInputError(f"frame {f.shape} and mask {m.shape} disagree")
    rgb = f[:3] * (1.0 - m)[None]
    return np.concatenate([rgb, m[None].astype(np.float32)], axis=0)


def save_mask_png(path, mask) -> None:
    m = _check_mask(mask)
    cv2.imwrite(str(path), (m * 255).astype(np.uint8))


def load_mask_png(path) -> np.ndarray:
    """Load a single-channel mask; any nonzero value is a hole."""
    img = cv2.imread(str(Path(path)), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise InvalidInputError(f"cannot read mask {path}")
    if img.ndim == 3:
        img = img.max(axis=2)
    return (img != 0).astype(np.uint8)
