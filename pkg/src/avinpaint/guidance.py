"""Audio-visual transfer losses and the weighted inpainting objective.

Both losses read a frozen `AVNet`.  Targets computed from the ground-truth
frame and from the audio are detached; gradients reach only the inpainted
frame.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import DivergenceError, InvalidInputError


@dataclass
class LossWeights:
    l1: float = 1.0
    adv: float = 0.01
    att_av: float = 2.0
    cls_av: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise InvalidInputError(f"loss weight {name}={value} must be finite and >= 0")

    @property
    def uses_guider(self) -> bool:
        return self.att_av > 0 or self.cls_av > 0


@dataclass
class LossBundle:
    l1: torch.Tensor
    adv: torch.Tensor
    att_av: torch.Tensor
    cls_av: torch.Tensor
    total: torch.Tensor
    weights: LossWeights

    def row(self) -> dict:
        return {k: getattr(self, k).item() for k in ("l1", "adv", "att_av", "cls_av", "total")}


def av_attention_loss(m_gt, m_inp):
    """Mean squared difference between two attention maps (B, h, w) or (h, w)."""
    if m_gt.shape != m_inp.shape:
        raise InvalidInputError(f"attention maps differ in shape: {tuple(m_gt.shape)} vs "
                                f"{tuple(m_inp.shape)}")
    return ((m_gt.detach() - m_inp) ** 2).mean()


def av_class_consistency_loss(audio_logits, inpainted_logits):
    """Cross-entropy of softmax(inpainted) against the soft target softmax(audio).

    Batched inputs (B, K) are averaged over the batch.
    """
    if audio_logits.shape != inpainted_logits.shape:
        raise InvalidInputError(f"logit shapes differ: {tuple(audio_logits.shape)} vs "
                                f"{tuple(inpainted_logits.shape)}")
    target = F.softmax(audio_logits.detach(), dim=-1)
    per_item = -(target * F.log_softmax(inpainted_logits, dim=-1)).sum(dim=-1)
    return per_item.mean()


def total_loss(l1, adv, att_av, cls_av, weights: LossWeights | None = None) -> LossBundle:
    w = weights or LossWeights()
    parts = {"l1": l1, "adv": adv, "att_av": att_av, "cls_av": cls_av}
    parts = {k: v if isinstance(v, torch.Tensor) else torch.tensor(float(v), dtype=torch.float64)
             for k, v in parts.items()}
    for name, value in parts.items():
        if not math.isfinite(value.item()):
            raise DivergenceError(f"loss term {name} is {value.item()}")
    total = (w.l1 * parts["l1"] + w.adv * parts["adv"]
             + w.att_av * parts["att_av"] + w.cls_av * parts["cls_av"])
    return LossBundle(total=total, weights=w, **parts)


@dataclass
class GuideTargets:
    """Per-frame guider outputs that never change during VI-Net training."""

    audio_emb: torch.Tensor  # (N, c)
    audio_logits: torch.Tensor  # (N, K)
    att_gt: torch.Tensor  # (N, h, w)


@torch.no_grad()
def guide_targets(avnet, frames_gt, mels) -> GuideTargets:
    a = avnet.embed_audio(mels)
    v = avnet.visual_map(frames_gt)
    return GuideTargets(a, avnet.audio_logits(a), avnet.attention(a, v))


def guidance_losses(avnet, inpainted, targets: GuideTargets):
    """(attention loss, class-consistency loss) for a batch of inpainted frames."""
    v = avnet.visual_map(inpainted)
    att = avnet.attention(targets.audio_emb, v)
    return (av_attention_loss(targets.att_gt, att),
            av_class_consistency_loss(targets.audio_logits, avnet.visual_logits(v)))


class LossLog:
    """CSV training log: step, l1, adv, att_av, cls_av, total."""

    FIELDS = ("step", "l1", "adv", "att_av", "cls_av", "total")

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None

    def append(self, step: int, bundle: LossBundle):
        self.rows.append({"step": step, **bundle.row()})

    def write(self, path=None):
        path = Path(path) if path else self.path
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.FIELDS)
            writer.writeheader()
            writer.writerows(self.rows)

    @staticmethod
    def read(path) -> list[dict]:
        with open(path, newline="") as fh:
            return [{k: float(v) if k != "step" else int(v) for k, v in row.items()}
                    for row in csv.DictReader(fh)]
