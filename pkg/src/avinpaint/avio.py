"""Clip containers, frame preparation and the log-mel audio front end.

Audio is 16 kHz mono, video is 8 fps RGB in [0, 1].  A 1 s audio segment
becomes a 201 x 80 log-mel matrix (160-sample Hann window, 80-sample hop,
256-point FFT, centre reflect padding, 80 area-normalised triangular
filters over 0-8 kHz).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.io import wavfile

from .errors import InvalidInputError

FPS = 8
SAMPLE_RATE = 16000
SEGMENT_SAMPLES = SAMPLE_RATE  # 1 second
WIN_LENGTH = 160
HOP_LENGTH = 80
N_FFT = 256
N_MELS = 80
LOG_EPS = 1e-6
FRAME_SIZE = 224
RESIZE_SIZE = 256


@dataclass
class VideoClip:
    """Synchronised frames (T, H, W, 3) and mono waveform."""

    clip_id: str
    frames: np.ndarray
    waveform: np.ndarray
    duration_s: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.waveform = np.asarray(self.waveform, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise InvalidInputError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.frames.shape[0] != round(self.duration_s * FPS):
            raise InvalidInputError(
                f"{self.frames.shape[0]} frames for {self.duration_s}s clip at {FPS} fps")
        if self.waveform.ndim != 1 or self.waveform.shape[0] != round(self.duration_s * SAMPLE_RATE):
            raise InvalidInputError("waveform length does not match duration")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def frame_time(self, index: int) -> float:
        """Timestamp of frame `index`, taken at the middle of its 1/8 s slot."""
        return (index + 0.5) / FPS


# ----------------------------------------------------------------------------
# Frames
# ----------------------------------------------------------------------------

def _resize(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h == size and w == size:
        return img
    interp = cv2.INTER_AREA if (h > size and w > size) else cv2.INTER_LINEAR
    return cv2.resize(img, (size, size), interpolation=interp)


def crop_offset(rng: np.random.Generator, resized: int, size: int) -> tuple[int, int]:
    """Draw the (top, left) offset of a random `size` crop from a `resized` square."""
    top = int(rng.integers(0, resized - size + 1))
    left = int(rng.integers(0, resized - size + 1))
    return top, left


def prepare_frame(frame, mode: str = "test", rng: np.random.Generator | None = None,
                  size: int = FRAME_SIZE) -> np.ndarray:
    """Resize an HxWx3 frame to the network's 3 x size x size layout.

    The frame is first brought to the 256/224-scaled square, then randomly
    cropped (``mode="train"``) or resized (``mode="test"``).
    """
    img = np.asarray(frame, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1 or img.shape[2] != 3:
        raise InvalidInputError(f"expected a non-empty HxWx3 image, got shape {img.shape}")
    resized = int(round(size * RESIZE_SIZE / FRAME_SIZE))
    img = _resize(img, resized)
    if mode == "train":
        if rng is None:
            raise InvalidInputError("train mode needs a seeded generator")
        top, left = crop_offset(rng, resized, size)
        img = img[top:top + size, left:left + size]
    elif mode == "test":
        img = _resize(img, size)
    else:
        raise InvalidInputError(f"unknown mode {mode!r}")
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1).copy()


def prepare_mask(mask, size: int = FRAME_SIZE) -> np.ndarray:
    """Nearest-neighbour resize of a 2-D {0,1} mask, matching test-mode frame geometry."""
    m = np.asarray(mask, dtype=np.uint8)
    if m.shape == (size, size):
        return m.copy()
    return cv2.resize(m, (size, size), interpolation=cv2.INTER_NEAREST)


# ----------------------------------------------------------------------------
# Audio
# ----------------------------------------------------------------------------

def sample_audio_segment(clip: VideoClip, center_time_s: float) -> np.ndarray:
    """Return exactly one second of audio centred on `center_time_s`.

    Windows that would run past either end of the clip are shifted inward.
    """
    n = clip.waveform.shape[0]
    if n < SEGMENT_SAMPLES:
        raise InvalidInputError(f"clip {clip.clip_id!r} is shorter than 1 s")
    start = int(round(center_time_s * SAMPLE_RATE)) - SEGMENT_SAMPLES // 2
    start = min(max(start, 0), n - SEGMENT_SAMPLES)
    return clip.waveform[start:start + SEGMENT_SAMPLES]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = 0.0,
                           fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Centre frequency (Hz) of each triangular filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the HTK mel scale, each scaled to unit area in Hz.

    Returns an (n_mels, n_fft // 2 + 1) matrix.
    """
    fmax = sr / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fft_freqs = np.linspace(0.0, sr / 2, n_fft // 2 + 1)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= (2.0 / (upper - lower))
    return weights


_MEL_FB = mel_filterbank()
_WINDOW = np.hanning(WIN_LENGTH + 1)[:-1]  # periodic Hann


def mel_power(segment) -> np.ndarray:
    """Linear mel energies, shape (201, 80), before the log."""
    x = np.asarray(segment, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != SEGMENT_SAMPLES:
        raise InvalidInputError(f"expected {SEGMENT_SAMPLES} samples, got shape {x.shape}")
    pad = WIN_LENGTH // 2
    x = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (x.shape[0] - WIN_LENGTH) // HOP_LENGTH
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(n_frames)[:, None]
    frames = x[idx] * _WINDOW
    spec = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    return spec @ _MEL_FB.T


def compute_log_mel(segment) -> np.ndarray:
    """Log-mel spectrogram of a 16000-sample segment, float32 (201, 80)."""
    return np.log(mel_power(segment) + LOG_EPS).astype(np.float32)


# ----------------------------------------------------------------------------
# On-disk layout: <root>/<clip_id>/frames/%05d.png + audio.wav, index.json
# ----------------------------------------------------------------------------

def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png_rgb(path, img: np.ndarray) -> None:
    cv2.imwrite(str(path), cv2.cvtColor(_to_uint8(img), cv2.COLOR_RGB2BGR))


def read_png_rgb(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise InvalidInputError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def write_clip(root, clip: VideoClip) -> Path:
    clip_dir = Path(root) / clip.clip_id
    (clip_dir / "frames").mkdir(parents=True, exist_ok=True)
    for t in range(clip.n_frames):
        write_png_rgb(clip_dir / "frames" / f"{t:05d}.png", clip.frames[t])
    pcm = np.round(np.clip(clip.waveform, -1.0, 1.0) * 32767.0).astype(np.int16)
    wavfile.write(clip_dir / "audio.wav", SAMPLE_RATE, pcm)
    return clip_dir


def read_wav(path) -> np.ndarray:
    sr, data = wavfile.read(path)
    if sr != SAMPLE_RATE:
        raise InvalidInputError(f"{path}: sample rate {sr}, expected {SAMPLE_RATE}")
    if data.ndim != 1:
        raise InvalidInputError(f"{path}: audio must be mono")
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32767.0
    return data.astype(np.float32)


def load_clip(root, clip_id: str) -> VideoClip:
    clip_dir = Path(root) / clip_id
    frame_paths = sorted((clip_dir / "frames").glob("*.png"))
    if not frame_paths:
        raise InvalidInputError(f"no frames under {clip_dir}")
    frames = np.stack([read_png_rgb(p) for p in frame_paths])
    waveform = read_wav(clip_dir / "audio.wav")
    return VideoClip(clip_id, frames, np.clip(waveform, -1.0, 1.0),
                     duration_s=frames.shape[0] / FPS)


def write_manifest(root, manifest: dict) -> None:
    path = Path(root) / "index.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, path)


def read_manifest(root) -> dict:
    path = Path(root) / "index.json"
    if not path.exists():
        raise InvalidInputError(f"missing manifest {path}")
    manifest = json.loads(path.read_text())
    for key in ("clips", "splits"):
        if key not in manifest:
            raise InvalidInputError(f"manifest {path} lacks {key!r}")
    return manifest
