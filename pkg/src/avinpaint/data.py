"""In-memory clip cache shared by the training and evaluation loops."""

from __future__ import annotations

import logging

import numpy as np

from . import avio
from .errors import InvalidInputError

log = logging.getLogger(__name__)


class ClipStore:
    """Frames, log-mels and ground-truth footprints for a set of clips.

    Frames are kept at the pre-crop resolution (256/224 of ``frame_size``)
    as uint8 so train-mode crops and test-mode resizes both go through
    `avio.prepare_frame`.  One log-mel per frame, centred on the frame time.
    """

    def __init__(self, clips, ground_truth=None, frame_size: int = avio.FRAME_SIZE):
        if not clips:
            raise InvalidInputError("no clips given")
        self.frame_size = frame_size
        self.resize = int(round(frame_size * avio.RESIZE_SIZE / avio.FRAME_SIZE))
        self.clip_ids = [c.clip_id for c in clips]
        self._index = {cid: i for i, cid in enumerate(self.clip_ids)}
        n_frames = {c.n_frames for c in clips}
        if len(n_frames) != 1:
            raise InvalidInputError("all clips must have the same number of frames")
        self.n_frames = n_frames.pop()
        n, t, r = len(clips), self.n_frames, self.resize
        self.raw = np.empty((n, t, r, r, 3), dtype=np.uint8)
        self.frames = np.empty((n, t, 3, frame_size, frame_size), dtype=np.float32)
        self.mels = np.empty((n, t, 201, avio.N_MELS), dtype=np.float32)
        for i, clip in enumerate(clips):
            for j in range(t):
                big = avio._resize(clip.frames[j], r)
                self.raw[i, j] = np.round(np.clip(big, 0, 1) * 255).astype(np.uint8)
                self.frames[i, j] = avio.prepare_frame(big, "test", size=frame_size)
                seg = avio.sample_audio_segment(clip, clip.frame_time(j))
                self.mels[i, j] = avio.compute_log_mel(seg)
        self.class_ids = np.array([c.meta.get("class_id", -1) for c in clips], dtype=np.int64)
        self.gt = None
        if ground_truth is not None:
            self.gt = np.stack([
                np.stack([avio.prepare_mask(m, frame_size) for m in g.object_masks])
                for g in ground_truth])
            self.class_ids = np.array([g.class_id for g in ground_truth], dtype=np.int64)

    @classmethod
    def from_disk(cls, root, clip_ids, frame_size: int = avio.FRAME_SIZE, with_gt: bool = True):
        from .synthbench import load_ground_truth

        clips, gts = [], []
        for cid in clip_ids:
            clips.append(avio.load_clip(root, cid))
            if with_gt:
                gts.append(load_ground_truth(root, cid))
        log.info("loaded %d clips from %s", len(clips), root)
        return cls(clips, gts if with_gt else None, frame_size)

    def __len__(self):
        return len(self.clip_ids)

    def index(self, clip_id: str) -> int:
        return self._index[clip_id]

    def subset(self, clip_ids) -> "ClipStore":
        """View onto a subset of clips (arrays are sliced, not re-rendered)."""
        idx = [self._index[c] for c in clip_ids]
        new = object.__new__(ClipStore)
        new.frame_size, new.resize, new.n_frames = self.frame_size, self.resize, self.n_frames
        new.clip_ids = list(clip_ids)
        new._index = {cid: i for i, cid in enumerate(new.clip_ids)}
        new.raw, new.frames, new.mels = self.raw[idx], self.frames[idx], self.mels[idx]
        new.class_ids = self.class_ids[idx]
        new.gt = None if self.gt is None else self.gt[idx]
        return new

    def frame_batch(self, clip_ids, times, mode: str = "test", rng=None) -> np.ndarray:
        out = np.empty((len(clip_ids), 3, self.frame_size, self.frame_size), dtype=np.float32)
        for k, (cid, t) in enumerate(zip(clip_ids, times)):
            i = self._index[cid]
            if mode == "test":
                out[k] = self.frames[i, t]
            else:
                out[k] = avio.prepare_frame(self.raw[i, t].astype(np.float32) / 255.0,
                                            mode, rng, self.frame_size)
        return out

    def mel_batch(self, clip_ids, times) -> np.ndarray:
        return np.stack([self.mels[self._index[c], t] for c, t in zip(clip_ids, times)])

    def middle_batch(self, clip_ids):
        t = self.n_frames // 2
        times = [t] * len(clip_ids)
        return self.frame_batch(clip_ids, times), self.mel_batch(clip_ids, times)
