"""Audio-visual correspondence network (the guider).

Two small CNNs embed a log-mel segment into R^c and a frame into an
h x w x c grid.  Cosine similarity at every grid cell, passed through a
learnable affine and a sigmoid, gives the attention map.  Training
alternates the max-pooled correspondence objective with pseudo-class
classification, where pseudo-classes come from K-means over
attention-gated object descriptors.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .errors import DivergenceError, FrozenError, InvalidInputError

log = logging.getLogger(__name__)

MEL_SHIFT, MEL_SCALE = 4.5, 2.5
PIX_SHIFT, PIX_SCALE = 0.5, 0.25


def _conv_stack(widths, in_ch):
    layers = []
    ch = in_ch
    for i, w in enumerate(widths):
        last = i == len(widths) - 1
        layers.append(nn.Conv2d(ch, w, 3, stride=2, padding=1, bias=last))
        if not last:
            layers += [nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
        ch = w
    return nn.Sequential(*layers)


class VisualEncoder(nn.Module):
    """Four stride-2 conv blocks: 224x224 frames become a 14x14xc grid."""

    def __init__(self, c=64, widths=(32, 64, 64)):
        super().__init__()
        self.net = _conv_stack(tuple(widths) + (c,), 3)

    def forward(self, frames):
        return self.net((frames - PIX_SHIFT) / PIX_SCALE)


class AudioEncoder(nn.Module):
    """Four stride-2 conv blocks over the 201x80 log-mel, then global average pooling.

    A fixed mel-bin coordinate ramp rides along as a second input channel;
    without it the pooled output is nearly blind to where a tone sits on the
    frequency axis.
    """

    def __init__(self, c=64, widths=(32, 64, 64)):
        super().__init__()
        self.net = _conv_stack(tuple(widths) + (c,), 2)

    def forward(self, mel):
        if mel.dim() == 3:
            mel = mel.unsqueeze(1)
        ramp = torch.linspace(-1.0, 1.0, mel.shape[-1], dtype=mel.dtype)
        ramp = ramp.expand(mel.shape[0], 1, mel.shape[2], mel.shape[3])
        x = torch.cat([(mel + MEL_SHIFT) / MEL_SCALE, ramp], dim=1)
        return self.net(x).mean(dim=(2, 3))


@dataclass
class AVNetConfig:
    c: int = 64
    n_clusters: int = 10
    visual_widths: tuple = (32, 64, 64)
    audio_widths: tuple = (32, 64, 64)
    scale_init: float = 10.0
    bias_init: float = -5.0


class AVNet(nn.Module):
    def __init__(self, config: AVNetConfig | None = None):
        super().__init__()
        self.config = config or AVNetConfig()
        cfg = self.config
        self.visual = VisualEncoder(cfg.c, cfg.visual_widths)
        self.audio = AudioEncoder(cfg.c, cfg.audio_widths)
        self.cls_audio = nn.Linear(cfg.c, cfg.n_clusters)
        self.cls_visual = nn.Linear(cfg.c, cfg.n_clusters)
        self.scale = nn.Parameter(torch.tensor(float(cfg.scale_init)))
        self.bias = nn.Parameter(torch.tensor(float(cfg.bias_init)))
        self.frozen = False

    def freeze(self):
        """Guider mode: no parameter accepts gradients or optimiser steps."""
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def embed_audio(self, mel):
        return self.audio(mel)

    def visual_map(self, frames):
        return self.visual(frames)

    def attention(self, a_emb, v_map):
        return attention_map(a_emb, v_map, self.scale, self.bias)

    def attention_logits(self, a_emb, v_map):
        return attention_logits(a_emb, v_map, self.scale, self.bias)

    def audio_logits(self, a_emb):
        return self.cls_audio(a_emb)

    def visual_logits(self, v_map):
        return self.cls_visual(v_map.mean(dim=(2, 3)))

    def feature_shape(self, frame_size: int) -> tuple[int, int]:
        h = frame_size
        for _ in range(4):
            h = (h - 1) // 2 + 1
        return h, h


def audio_encode(mel, model: AVNet):
    return model.embed_audio(torch.as_tensor(mel))


def visual_encode(frame, model: AVNet):
    return model.visual_map(torch.as_tensor(frame))


def params_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------------
# Attention and the two AV-Net objectives
# ----------------------------------------------------------------------------

def cosine_map(a_emb, v_map):
    """Cosine between the audio vector and every grid cell: (B, c), (B, c, h, w) -> (B, h, w).

    Zero vectors normalise to zero, so their cosine is 0.
    """
    if a_emb.shape[-1] != v_map.shape[1]:
        raise InvalidInputError(
            f"channel mismatch: audio {a_emb.shape[-1]} vs visual {v_map.shape[1]}")
    if torch.isnan(a_emb).any() or torch.isnan(v_map).any():
        raise InvalidInputError("NaN in audio or visual features")
    a_hat = F.normalize(a_emb, dim=-1, eps=1e-12)
    v_hat = F.normalize(v_map, dim=1, eps=1e-12)
    return torch.einsum("bc,bchw->bhw", a_hat, v_hat)


def attention_logits(a_emb, v_map, scale, bias):
    return scale * cosine_map(a_emb, v_map) + bias


def attention_map(a_emb, v_map, scale=1.0, bias=0.0, return_flags=False):
    """M = sigmoid(scale * cos + bias) per grid cell.

    With ``return_flags`` also returns a (B, h, w) bool tensor marking cells
    where either vector had zero norm.
    """
    att = torch.sigmoid(attention_logits(a_emb, v_map, scale, bias))
    if not return_flags:
        return att
    zero_a = (a_emb.norm(dim=-1) == 0)[:, None, None]
    zero_v = v_map.norm(dim=1) == 0
    return att, zero_a | zero_v


def correspondence_loss(att, y_corr):
    """Binary cross-entropy between the label and the map's global maximum."""
    peak = att.flatten(1).amax(dim=1)
    y = torch.as_tensor(y_corr, dtype=peak.dtype).reshape(peak.shape)
    return F.binary_cross_entropy(peak, y)


def correspondence_loss_from_logits(att_logits, y_corr):
    """Same value as `correspondence_loss` on sigmoid(logits), without saturation."""
    peak = att_logits.flatten(1).amax(dim=1)
    y = torch.as_tensor(y_corr, dtype=peak.dtype).reshape(peak.shape)
    return F.binary_cross_entropy_with_logits(peak, y)


def extract_object_repr(att, v_map, tau: float = 0.07):
    """Object descriptor GAP(m * f_V) with m = [att > tau].

    The average runs over all h*w cells.  Rows whose mask is empty fall back
    to the plain spatial mean and are flagged.

    Returns (descriptors (B, c), masks (B, h, w) uint8, fallback (B,) bool).
    """
    mask = (att > tau).to(v_map.dtype)
    empty = mask.flatten(1).sum(dim=1) == 0
    gated = (mask[:, None] * v_map).mean(dim=(2, 3))
    plain = v_map.mean(dim=(2, 3))
    desc = torch.where(empty[:, None], plain, gated)
    return desc, mask.to(torch.uint8), empty


def classification_loss(audio_logits, visual_logits, labels):
    """Sum of the audio and visual cross-entropies against the pseudo-labels."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    k = audio_logits.shape[-1]
    if (labels < 0).any() or (labels >= k).any():
        raise InvalidInputError(f"pseudo-label outside [0, {k})")
    return F.cross_entropy(audio_logits, labels) + F.cross_entropy(visual_logits, labels)


# ----------------------------------------------------------------------------
# K-means pseudo-labels
# ----------------------------------------------------------------------------

@dataclass
class PseudoLabelTable:
    labels: dict  # clip_id -> int
    centroids: np.ndarray
    objective: list = field(default_factory=list)

    def lookup(self, clip_ids):
        return np.array([self.labels[c] for c in clip_ids], dtype=np.int64)


def _sq_dists(x, centers):
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.stack(centers)


def kmeans(x, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd's algorithm from a k-means++ start.

    Returns (labels, centroids, objective_history) where the history holds
    the sum of squared distances after every assignment step.  Clusters that
    empty out are re-seeded with the point farthest from its centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < k or k < 1:
        raise InvalidInputError(f"need at least k={k} descriptors, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus(x, k, rng)
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(1)
        history.append(float(d2[np.arange(len(x)), labels].sum()))
        new = centers.copy()
        own = d2[np.arange(len(x)), labels]
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(0)
            else:
                far = int(own.argmax())
                new[j] = x[far]
                own[far] = -1.0
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        if shift < tol:
            break
    d2 = _sq_dists(x, centers)
    labels = d2.argmin(1)
    history.append(float(d2[np.arange(len(x)), labels].sum()))
    return labels, centers, history


def cluster_pseudo_labels(descriptors, clip_ids, k: int = 10, seed: int = 0) -> PseudoLabelTable:
    x = np.asarray(descriptors, dtype=np.float64)
    if len(clip_ids) != x.shape[0]:
        raise InvalidInputError("one clip id per descriptor required")
    labels, centers, history = kmeans(x, k, seed)
    return PseudoLabelTable({c: int(l) for c, l in zip(clip_ids, labels)}, centers, history)


def align_labels(new: PseudoLabelTable, old: PseudoLabelTable | None) -> PseudoLabelTable:
    """Renumber `new` clusters to agree as much as possible with `old`.

    K-means numbering is arbitrary; without this the classifiers would see
    their targets permuted at every re-clustering.
    """
    if old is None:
        return new
    k = new.centroids.shape[0]
    ids = [c for c in new.labels if c in old.labels]
    overlap = np.zeros((k, k))
    for c in ids:
        overlap[new.labels[c], old.labels[c]] += 1
    rows, cols = linear_sum_assignment(-overlap)
    remap = dict(zip(rows, cols))
    labels = {c: int(remap[l]) for c, l in new.labels.items()}
    centroids = np.empty_like(new.centroids)
    for r, c in remap.items():
        centroids[c] = new.centroids[r]
    return PseudoLabelTable(labels, centroids, new.objective)


def cluster_purity(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    total = 0
    for c in np.unique(pred):
        total += np.bincount(truth[pred == c]).max()
    return total / len(truth)


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------

@dataclass
class AVNetTrainConfig:
    epochs: int = 4
    warmup_epochs: int = 1
    decay_epochs: int = 2
    batch_size: int = 32
    lr: float = 5e-5
    frames_per_clip: int = 1
    tau: float = 0.07
    seed: int = 0


def _check_trainable(model: AVNet):
    if model.frozen:
        raise FrozenError("AV-Net is frozen (guider mode); refusing to update it")


def _finite(value: torch.Tensor, what: str, step: int):
    if not torch.isfinite(value):
        raise DivergenceError(f"{what} became {value.item()} at step {step}")


def correspondence_step(model, optimizer, frames, mels, y_corr) -> float:
    _check_trainable(model)
    a = model.embed_audio(mels)
    v = model.visual_map(frames)
    loss = correspondence_loss_from_logits(model.attention_logits(a, v), y_corr)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss


def classification_step(model, optimizer, frames, mels, labels) -> float:
    _check_trainable(model)
    a = model.embed_audio(mels)
    v = model.visual_map(frames)
    loss = classification_loss(model.audio_logits(a), model.visual_logits(v), labels)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss


@torch.no_grad()
def object_descriptors(model: AVNet, store, clip_ids, tau: float = 0.07, batch: int = 32):
    """Descriptor, feature mask and fallback flag from each clip's middle frame."""
    descs, masks, flags = [], [], []
    for i in range(0, len(clip_ids), batch):
        ids = clip_ids[i:i + batch]
        frames, mels = store.middle_batch(ids)
        a = model.embed_audio(torch.from_numpy(mels))
        v = model.visual_map(torch.from_numpy(frames))
        d, m, f = extract_object_repr(model.attention(a, v), v, tau)
        descs.append(d.numpy())
        masks.append(m.numpy())
        flags.append(f.numpy())
    return np.concatenate(descs), np.concatenate(masks), np.concatenate(flags)


def mismatch_audio(clip_ids) -> tuple[np.ndarray, np.ndarray]:
    """Audio permutation for a batch: the second half gets audio rolled within itself.

    Returns (audio_index, y_corr); y_corr is 1 where frame and audio share a clip.
    """
    n = len(clip_ids)
    idx = np.arange(n)
    neg = idx[n // 2:]
    if len(neg) >= 2:
        idx[n // 2:] = np.roll(neg, 1)
    y = np.array([clip_ids[a] == clip_ids[i] for i, a in enumerate(idx)], dtype=np.float32)
    return idx, y


def train_avnet(store, config: AVNetTrainConfig, model: AVNet | None = None,
                model_config: AVNetConfig | None = None, callback=None):
    """Alternating training on the clips of `store` (a `ClipStore`).

    Epochs before ``warmup_epochs`` use only the correspondence objective.
    Afterwards pseudo-labels are recomputed at the start of every epoch and
    each correspondence batch is followed by a classification batch on the
    same (matched) items.

    Returns (model, pseudo_label_table, history).
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = model or AVNet(model_config)
    _check_trainable(model)
    model.train()
    optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=config.lr)
    clip_ids = list(store.clip_ids)
    if not clip_ids:
        raise InvalidInputError("empty training split")
    history = {"corr_loss": [], "cls_loss": [], "epoch_start": [], "lr": []}
    table = None
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr * (0.1 if epoch >= config.decay_epochs else 1.0)
        for group in optimizer.param_groups:
            group["lr"] = lr
        if epoch >= config.warmup_epochs:
            model.eval()
            desc, _, _ = object_descriptors(model, store, clip_ids, config.tau)
            model.train()
            table = align_labels(
                cluster_pseudo_labels(desc, clip_ids, model.config.n_clusters,
                                      seed=config.seed + epoch), table)
        history["epoch_start"].append(step)
        items = [(ci, t) for ci in range(len(clip_ids))
                 for t in rng.choice(store.n_frames, config.frames_per_clip, replace=False)]
        order = rng.permutation(len(items))
        for start in range(0, len(order), config.batch_size):
            chosen = [items[i] for i in order[start:start + config.batch_size]]
            if len(chosen) < 2:
                continue
            ids = [clip_ids[ci] for ci, _ in chosen]
            ts = [int(t) for _, t in chosen]
            frames = torch.from_numpy(store.frame_batch(ids, ts, mode="train", rng=rng))
            mels = torch.from_numpy(store.mel_batch(ids, ts))
            a_idx, y = mismatch_audio(ids)
            loss = correspondence_step(model, optimizer, frames, mels[a_idx], torch.from_numpy(y))
            _finite(loss, "correspondence loss", step)
            history["corr_loss"].append(loss.item())
            if table is not None:
                labels = torch.from_numpy(table.lookup(ids))
                loss = classification_step(model, optimizer, frames, mels, labels)
                _finite(loss, "classification loss", step)
                history["cls_loss"].append(loss.item())
            history["lr"].append(lr)
            step += 1
            if callback is not None:
                callback(step, history)
        log.info("avnet epoch %d: corr %.4f cls %s", epoch, np.mean(history["corr_loss"][-10:]),
                 f"{np.mean(history['cls_loss'][-10:]):.4f}" if history["cls_loss"] else "-")
    model.eval()
    if table is None:
        desc, _, _ = object_descriptors(model, store, clip_ids, config.tau)
        table = cluster_pseudo_labels(desc, clip_ids, model.config.n_clusters, seed=config.seed)
    return model, table, history
