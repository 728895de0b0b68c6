"""The "sounding shapes" benchmark.

Each clip shows one moving shape whose class fixes its shape, colour and
tone, plus a smaller silent distractor of another class, over a fixed
textured background.  Ground-truth footprints of the sounding shape come
with every frame.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from . import avio
from .errors import InvalidInputError
from .masks import save_mask_png

SHAPES = ("circle", "square", "triangle")
PALETTE = (
    (0.90, 0.15, 0.15),
    (0.15, 0.35, 0.95),
    (0.95, 0.85, 0.10),
    (0.15, 0.80, 0.25),
    (0.85, 0.20, 0.85),
    (0.10, 0.85, 0.85),
    (0.95, 0.55, 0.10),
    (0.55, 0.25, 0.05),
    (0.98, 0.98, 0.98),
    (0.05, 0.05, 0.05),
)
CANVAS = avio.FRAME_SIZE
# footprint ~9% of the canvas for every shape
OBJECT_AREA = 0.09 * CANVAS * CANVAS
DISTRACTOR_SCALE = 0.6
MAX_CLASSES = 10


def tone_for_class(k: int) -> float:
    return 300.0 + 200.0 * k


def shape_for_class(k: int) -> str:
    return SHAPES[k % len(SHAPES)]


def color_for_class(k: int) -> tuple:
    return PALETTE[k]


def shape_extent(shape: str, scale: float = 1.0) -> float:
    """Half-size (pixels) giving the shape OBJECT_AREA * scale**2."""
    area = OBJECT_AREA * scale ** 2
    if shape == "circle":
        return float(np.sqrt(area / np.pi))
    if shape == "square":
        return float(np.sqrt(area) / 2)
    # equilateral triangle: area = sqrt(3)/4 * side^2, half-size = side / 2
    return float(np.sqrt(4 * area / np.sqrt(3)) / 2)


def analytic_area(shape: str, half: float) -> float:
    if shape == "circle":
        return np.pi * half ** 2
    if shape == "square":
        return (2 * half) ** 2
    return np.sqrt(3) / 4 * (2 * half) ** 2


def analytic_perimeter(shape: str, half: float) -> float:
    if shape == "circle":
        return 2 * np.pi * half
    if shape == "square":
        return 8 * half
    return 6 * half


@dataclass
class SceneSpec:
    class_id: int
    shape: str
    color: tuple
    tone_hz: float
    start: tuple  # (x, y) pixel centre at t=0
    end: tuple  # (x, y) pixel centre at the last frame
    duration_s: float = 2.0
    seed: int = 0
    distractor_class: int = 1
    distractor_start: tuple = (168.0, 112.0)
    distractor_end: tuple = (168.0, 112.0)
    snr_db: float = 10.0
    clip_id: str = "clip"

    @classmethod
    def for_class(cls, class_id: int, **kwargs) -> "SceneSpec":
        return cls(class_id=class_id, shape=shape_for_class(class_id),
                   color=color_for_class(class_id), tone_hz=tone_for_class(class_id), **kwargs)


@dataclass
class GroundTruth:
    object_masks: np.ndarray  # (T, 224, 224) uint8
    class_id: int
    spec: dict = field(default_factory=dict)


_BACKGROUND = None


def background() -> np.ndarray:
    """Fixed low-contrast texture shared by every clip."""
    global _BACKGROUND
    if _BACKGROUND is None:
        rng = np.random.default_rng(12345)
        noise = rng.normal(0.0, 1.0, (CANVAS // 8, CANVAS // 8, 3)).astype(np.float32)
        smooth = cv2.resize(noise, (CANVAS, CANVAS), interpolation=cv2.INTER_CUBIC)
        yy, xx = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float32)
        stripes = 0.04 * np.sin(2 * np.pi * (xx + 0.5 * yy) / 28.0)
        bg = 0.45 + 0.05 * smooth + stripes[..., None]
        bg[..., 2] += 0.05
        _BACKGROUND = np.clip(bg, 0.0, 1.0).astype(np.float32)
    return _BACKGROUND


def _polygon(shape: str, cx: float, cy: float, half: float) -> np.ndarray:
    if shape == "square":
        pts = [(cx - half, cy - half), (cx + half, cy - half),
               (cx + half, cy + half), (cx - half, cy + half)]
    else:
        height = np.sqrt(3) * half
        pts = [(cx, cy - 2 * height / 3), (cx + half, cy + height / 3),
               (cx - half, cy + height / 3)]
    return np.round(np.array(pts)).astype(np.int32)


def rasterize(shape: str, cx: float, cy: float, half: float, size: int = CANVAS) -> np.ndarray:
    mask = np.zeros((size, size), dtype=np.uint8)
    if shape == "circle":
        cv2.circle(mask, (int(round(cx)), int(round(cy))), int(round(half)), 1, -1,
                   lineType=cv2.LINE_8)
    else:
        cv2.fillPoly(mask, [_polygon(shape, cx, cy, half)], 1, lineType=cv2.LINE_8)
    return mask


def _bbox_inside(shape: str, pos, half: float) -> bool:
    x, y = pos
    reach = half if shape != "triangle" else 2 * np.sqrt(3) * half / 3
    return half <= x <= CANVAS - 1 - half and reach <= y <= CANVAS - 1 - reach


def generate_scene(spec: SceneSpec) -> tuple[avio.VideoClip, GroundTruth]:
    """Render one clip deterministically from `spec`."""
    if spec.shape not in SHAPES:
        raise InvalidInputError(f"unknown shape {spec.shape!r}")
    if not 0 < spec.tone_hz < avio.SAMPLE_RATE / 2:
        raise InvalidInputError("tone must lie below Nyquist")
    if spec.distractor_class == spec.class_id:
        raise InvalidInputError("distractor must be of a different class")
    half = shape_extent(spec.shape)
    d_shape = shape_for_class(spec.distractor_class)
    d_half = shape_extent(d_shape, DISTRACTOR_SCALE)
    for pos in (spec.start, spec.end):
        if not _bbox_inside(spec.shape, pos, half):
            raise InvalidInputError(f"motion path leaves the canvas at {pos}")
    for pos in (spec.distractor_start, spec.distractor_end):
        if not _bbox_inside(d_shape, pos, d_half):
            raise InvalidInputError(f"distractor path leaves the canvas at {pos}")

    n_frames = int(round(spec.duration_s * avio.FPS))
    n_samples = int(round(spec.duration_s * avio.SAMPLE_RATE))
    bg = background()
    d_color = np.asarray(color_for_class(spec.distractor_class), dtype=np.float32)
    color = np.asarray(spec.color, dtype=np.float32)
    frames = np.empty((n_frames, CANVAS, CANVAS, 3), dtype=np.float32)
    gt = np.empty((n_frames, CANVAS, CANVAS), dtype=np.uint8)
    for t in range(n_frames):
        a = t / max(n_frames - 1, 1)
        cx, cy = (1 - a) * np.asarray(spec.start) + a * np.asarray(spec.end)
        dx, dy = (1 - a) * np.asarray(spec.distractor_start) + a * np.asarray(spec.distractor_end)
        frame = bg.copy()
        d_mask = rasterize(d_shape, dx, dy, d_half).astype(bool)
        frame[d_mask] = d_color
        mask = rasterize(spec.shape, cx, cy, half)
        frame[mask.astype(bool)] = color
        frames[t] = frame
        gt[t] = mask

    rng = np.random.default_rng(spec.seed)
    time = np.arange(n_samples) / avio.SAMPLE_RATE
    phase = rng.uniform(0, 2 * np.pi)
    tone = 0.5 * np.sin(2 * np.pi * spec.tone_hz * time + phase)
    noise_std = np.sqrt(0.5 ** 2 / 2 / 10 ** (spec.snr_db / 10))
    wave = np.clip(tone + rng.normal(0.0, noise_std, n_samples), -1.0, 1.0)

    clip = avio.VideoClip(spec.clip_id, frames, wave.astype(np.float32), spec.duration_s,
                          meta={"class_id": spec.class_id})
    return clip, GroundTruth(gt, spec.class_id, spec=_spec_echo(spec))


def _spec_echo(spec: SceneSpec) -> dict:
    d = asdict(spec)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = [float(x) for x in v]
    return d


def random_spec(class_id: int, n_classes: int, rng: np.random.Generator,
                clip_id: str, duration_s: float = 2.0, snr_db: float = 10.0) -> SceneSpec:
    """Draw motion paths: sounding shape in one half, distractor in the other."""
    shape = shape_for_class(class_id)
    others = [k for k in range(n_classes) if k != class_id]
    if not others:
        others = [(class_id + 1) % MAX_CLASSES]
    d_class = int(rng.choice(others))
    left_side = bool(rng.integers(2))
    mid = CANVAS / 2

    def path(shape_name, scale, on_left):
        half = shape_extent(shape_name, scale)
        reach = half * 1.16  # triangle apex sits 2/sqrt(3) * half above the centroid
        lo_x, hi_x = (half + 1, mid - half - 2) if on_left else (mid + half + 2, CANVAS - 2 - half)
        if lo_x > hi_x:
            lo_x = hi_x = (lo_x + hi_x) / 2
        start = (float(rng.uniform(lo_x, hi_x)), float(rng.uniform(reach, CANVAS - 1 - reach)))
        end = (float(rng.uniform(lo_x, hi_x)), float(rng.uniform(reach, CANVAS - 1 - reach)))
        return start, end

    start, end = path(shape, 1.0, left_side)
    d_start, d_end = path(shape_for_class(d_class), DISTRACTOR_SCALE, not left_side)
    return SceneSpec.for_class(
        class_id, start=start, end=end, duration_s=duration_s, seed=int(rng.integers(2**31)),
        distractor_class=d_class, distractor_start=d_start, distractor_end=d_end,
        snr_db=snr_db, clip_id=clip_id)


def split_counts(n: int, fractions=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    n_val = max(1, int(round(fractions[1] * n)))
    n_test = max(1, int(round(fractions[2] * n)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise InvalidInputError(f"{n} clips per class cannot fill a stratified 3-way split")
    return n_train, n_val, n_test


def plan_dataset(n_classes: int, clips_per_class: int, seed: int,
                 fractions=(0.7, 0.1, 0.2), duration_s: float = 2.0,
                 snr_db: float = 10.0) -> tuple[list[SceneSpec], dict]:
    """Scene specs plus a manifest with class-stratified train/val/test splits."""
    if not 1 <= n_classes <= MAX_CLASSES:
        raise InvalidInputError(f"n_classes must lie in [1, {MAX_CLASSES}]")
    if clips_per_class < 3:
        raise InvalidInputError("need at least 3 clips per class for a stratified split")
    n_train, n_val, n_test = split_counts(clips_per_class, fractions)
    rng = np.random.default_rng(seed)
    specs, clips = [], {}
    splits = {"train": [], "val": [], "test": []}
    for k in range(n_classes):
        ids = [f"c{k:02d}_{i:04d}" for i in range(clips_per_class)]
        for clip_id in ids:
            spec = random_spec(k, n_classes, rng, clip_id, duration_s, snr_db)
            specs.append(spec)
            clips[clip_id] = {"class_id": k}
        order = rng.permutation(clips_per_class)
        splits["train"] += [ids[i] for i in order[:n_train]]
        splits["val"] += [ids[i] for i in order[n_train:n_train + n_val]]
        splits["test"] += [ids[i] for i in order[n_train + n_val:]]
    for name in splits:
        splits[name].sort()
    manifest = {"n_classes": n_classes, "clips_per_class": clips_per_class, "seed": seed,
                "clips": clips, "splits": splits}
    return specs, manifest


def write_ground_truth(root, clip_id: str, gt: GroundTruth) -> None:
    gt_dir = Path(root) / clip_id / "gt_masks"
    gt_dir.mkdir(parents=True, exist_ok=True)
    for t, mask in enumerate(gt.object_masks):
        save_mask_png(gt_dir / f"{t:05d}.png", mask)
    (Path(root) / clip_id / "gt.json").write_text(
        json.dumps({"class_id": gt.class_id, "spec": gt.spec}, indent=2))


def load_ground_truth(root, clip_id: str) -> GroundTruth:
    from .masks import load_mask_png

    clip_dir = Path(root) / clip_id
    meta = json.loads((clip_dir / "gt.json").read_text())
    paths = sorted((clip_dir / "gt_masks").glob("*.png"))
    masks = np.stack([load_mask_png(p) for p in paths])
    return GroundTruth(masks, int(meta["class_id"]), spec=meta.get("spec", {}))


def generate_dataset(n_classes: int, clips_per_class: int, seed: int, root=None,
                     fractions=(0.7, 0.1, 0.2), duration_s: float = 2.0,
                     snr_db: float = 10.0) -> dict:
    """Render the benchmark and, when `root` is given, write the on-disk layout."""
    specs, manifest = plan_dataset(n_classes, clips_per_class, seed, fractions,
                                   duration_s, snr_db)
    if root is not None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for spec in specs:
            clip, gt = generate_scene(spec)
            avio.write_clip(root, clip)
            write_ground_truth(root, spec.clip_id, gt)
        avio.write_manifest(root, manifest)
    return manifest
