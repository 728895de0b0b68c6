"""PSNR, SSIM and video-level Frechet distance (VFID)."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import signal

from .errors import InvalidInputError

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
_LUMA = np.array([0.299, 0.587, 0.114])


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInputError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, max_value: float = 1.0, return_flag: bool = False):
    """10 log10(max^2 / MSE) in dB; an exact match reports PSNR_CAP with flag set."""
    x, y = _pair(x, y)
    mse = np.mean((x - y) ** 2)
    capped = mse == 0
    value = PSNR_CAP if capped else min(PSNR_CAP, 10.0 * np.log10(max_value ** 2 / mse))
    return (float(value), bool(capped)) if return_flag else float(value)


def masked_psnr(x, y, mask, max_value: float = 1.0) -> float:
    """PSNR over hole pixels only (mask (H, W) broadcast across channels)."""
    x, y = _pair(x, y)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not m.any():
        return PSNR_CAP
    mse = np.mean((x[m] - y[m]) ** 2)
    return PSNR_CAP if mse == 0 else float(min(PSNR_CAP, 10 * np.log10(max_value ** 2 / mse)))


def _luma(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(_LUMA, img, axes=(0, 0))
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ _LUMA
    if img.ndim == 2:
        return img
    raise InvalidInputError(f"cannot interpret image of shape {img.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x, y, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all valid window positions, on luma."""
    x, y = _pair(x, y)
    x, y = _luma(x), _luma(y)
    if min(x.shape) < win_size:
        raise InvalidInputError(f"image {x.shape} smaller than the {win_size}x{win_size} window")
    w = gaussian_window(win_size, sigma)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2

    def filt(img):
        return signal.convolve2d(img, w, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# ----------------------------------------------------------------------------
# VFID
# ----------------------------------------------------------------------------

class RandomProjectionExtractor:
    """Fixed, seeded linear map from a 16x16 thumbnail to `dim` features."""

    name = "random-projection"

    def __init__(self, dim: int = 64, seed: int = 0, thumb: int = 16):
        rng = np.random.default_rng(seed)
        self.thumb = thumb
        self.dim = dim
        self.proj = rng.normal(0.0, 1.0 / np.sqrt(3 * thumb * thumb), (dim, 3 * thumb * thumb))

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        t, c, h, w = frames.shape
        fh, fw = h // self.thumb, w // self.thumb
        if fh < 1 or fw < 1:
            raise InvalidInputError("frames smaller than the thumbnail")
        crop = frames[:, :, :fh * self.thumb, :fw * self.thumb]
        thumbs = crop.reshape(t, c, self.thumb, fh, self.thumb, fw).mean(axis=(3, 5))
        return thumbs.reshape(t, -1) @ self.proj.T


class AVNetExtractor:
    """Per-frame global average of the frozen guider's visual feature map."""

    name = "avnet-visual"

    def __init__(self, avnet):
        self.avnet = avnet

    @torch.no_grad()
    def __call__(self, frames: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(frames, dtype=np.float32))
        return self.avnet.visual_map(x).mean(dim=(2, 3)).double().numpy()


def video_features(clip_frames, extractor) -> np.ndarray:
    """Mean over frames of per-frame features: one vector per clip."""
    frames = np.asarray(clip_frames)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise InvalidInputError("need a non-empty (T, 3, H, W) clip")
    return np.asarray(extractor(frames), dtype=np.float64).mean(axis=0)


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The cross term uses the symmetric form (S1^(1/2) S2 S1^(1/2))^(1/2), whose
    trace equals that of (S1 S2)^(1/2); negative eigenvalues are clipped.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    root1 = _sqrtm_psd(cov1)
    inner = root1 @ cov2 @ root1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2 * tr_cross)
    return max(d, 0.0)


def vfid(features_real, features_fake) -> float:
    a = np.asarray(features_real, dtype=np.float64)
    b = np.asarray(features_fake, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InvalidInputError("VFID needs at least two clips per set")
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError("feature dimensions differ")
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


# ----------------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------------

@dataclass
class ClipScore:
    clip_id: str
    psnr: float
    ssim: float
    hole_psnr: float
    psnr_capped: bool = False


@dataclass
class MetricReport:
    dataset: str
    mask_type: str
    method: str
    extractor: str
    clips: list = field(default_factory=list)
    vfid: float = float("nan")

    @property
    def psnr(self) -> float:
        return float(np.mean([c.psnr for c in self.clips]))

    @property
    def ssim(self) -> float:
        return float(np.mean([c.ssim for c in self.clips]))

    @property
    def hole_psnr(self) -> float:
        return float(np.mean([c.hole_psnr for c in self.clips]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(psnr=self.psnr, ssim=self.ssim, hole_psnr=self.hole_psnr)
        return d


def score_clip(clip_id, pred, gt, mask) -> ClipScore:
    """Per-frame PSNR/SSIM averaged over the clip.  pred, gt: (T, 3, H, W)."""
    pred, gt = _pair(pred, gt)
    results = [psnr(p, g, return_flag=True) for p, g in zip(pred, gt)]
    return ClipScore(
        clip_id,
        psnr=float(np.mean([r[0] for r in results])),
        ssim=float(np.mean([ssim(p, g) for p, g in zip(pred, gt)])),
        hole_psnr=float(np.mean([masked_psnr(p, g, mask) for p, g in zip(pred, gt)])),
        psnr_capped=all(r[1] for r in results))
