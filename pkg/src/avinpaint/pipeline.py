"""Glue between the stages: configs to trainers, mask sources, evaluation, ablation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import avio, avnet as avnet_mod, guidance, masks as mk, metrics, synthbench, vinet
from .config import RunConfig
from .data import ClipStore
from .errors import ConfigError

log = logging.getLogger(__name__)

# (att_av, cls_av) switched on at the default weights; l1/adv stay as configured
VARIANTS = {
    "baseline": (False, False),
    "cls": (False, True),
    "att": (True, False),
    "full": (True, True),
}
VARIANT_LABELS = {
    "baseline": "L1 + adv (no audio guidance)",
    "cls": "+ class consistency",
    "att": "+ attention",
    "full": "+ attention + class consistency",
}


# ----------------------------------------------------------------------------
# Data
# ----------------------------------------------------------------------------

def load_split(cfg: RunConfig, split: str, manifest: dict | None = None) -> ClipStore:
    manifest = manifest or avio.read_manifest(cfg.data.root)
    if split not in manifest["splits"]:
        raise ConfigError(f"unknown split {split!r}")
    return ClipStore.from_disk(cfg.data.root, manifest["splits"][split], cfg.data.frame_size)


def synth_stores(n_classes: int, clips_per_class: int, seed: int, frame_size: int,
                 fractions=(0.7, 0.1, 0.2)) -> tuple[dict, dict]:
    """Generate a benchmark in memory: ({split: ClipStore}, manifest)."""
    specs, manifest = synthbench.plan_dataset(n_classes, clips_per_class, seed, fractions)
    clips, gts = zip(*[synthbench.generate_scene(s) for s in specs])
    full = ClipStore(list(clips), list(gts), frame_size)
    return {k: full.subset(v) for k, v in manifest["splits"].items()}, manifest


# ----------------------------------------------------------------------------
# Configs
# ----------------------------------------------------------------------------

def avnet_configs(cfg: RunConfig):
    a = cfg.avnet
    model_cfg = avnet_mod.AVNetConfig(a.c, a.n_clusters, tuple(a.visual_widths),
                                      tuple(a.audio_widths), a.scale_init, a.bias_init)
    train_cfg = avnet_mod.AVNetTrainConfig(a.epochs, a.warmup_epochs, a.decay_epochs,
                                           a.batch_size, a.lr, a.frames_per_clip, a.tau, cfg.seed)
    return model_cfg, train_cfg


def variant_weights(cfg: RunConfig, variant: str) -> guidance.LossWeights:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    w = cfg.vinet.weights
    use_att, use_cls = VARIANTS[variant]
    return guidance.LossWeights(w.l1, w.adv, w.att_av if use_att else 0.0,
                                w.cls_av if use_cls else 0.0)


def vinet_config(cfg: RunConfig, weights: guidance.LossWeights | None = None,
                 mask: str | None = None, seed: int | None = None) -> vinet.VINetTrainConfig:
    v = cfg.vinet
    if weights is None:
        w = v.weights
        weights = guidance.LossWeights(w.l1, w.adv, w.att_av, w.cls_av)
    return vinet.VINetTrainConfig(
        steps=v.steps, batch_size=v.batch_size, window=v.window, lr=v.lr, decay_at=v.decay_at,
        d_lr=v.d_lr, weights=weights, mask=mask or v.mask, widths=tuple(v.widths),
        d_widths=tuple(v.d_widths), seed=cfg.seed if seed is None else seed)


# ----------------------------------------------------------------------------
# Masks
# ----------------------------------------------------------------------------

def object_mask_fn(store: ClipStore, guider=None, tau: float = 0.07, source: str = "avnet"):
    """fn(clip_id, t) -> frame-resolution object mask.

    ``avnet``: the guider's thresholded attention m_i, nearest-upsampled.
    ``gt``: the rendered footprint (synthetic benchmark only).
    """
    if source == "gt":
        if store.gt is None:
            raise ConfigError("ground-truth footprints are not available for this split")
        return lambda cid, t: store.gt[store.index(cid), t].astype(np.uint8)
    if source != "avnet":
        raise ConfigError(f"unknown S-mask source {source!r}")
    if guider is None:
        raise ConfigError("S-masks from attention need an AV-Net checkpoint")

    @torch.no_grad()
    def fn(cid, t):
        i = store.index(cid)
        frame = torch.from_numpy(store.frames[i, t:t + 1])
        mel = torch.from_numpy(store.mels[i, t:t + 1])
        att = guider.attention(guider.embed_audio(mel), guider.visual_map(frame))
        _, m, _ = avnet_mod.extract_object_repr(att, guider.visual_map(frame), tau)
        return mk.upsample_mask(m[0].numpy(), store.frame_size)

    return fn


def smask_fn(store: ClipStore, guider=None, tau: float = 0.07, source: str = "avnet"):
    obj = object_mask_fn(store, guider, tau, source)

    def fn(cid, t):
        res = mk.generate_smask(obj(cid, t))
        if res.fallback:
            log.warning("empty object mask for %s frame %d; using the centred square", cid, t)
        return res.mask

    return fn


def training_masks(cfg: RunConfig, store: ClipStore, guider, regime: str | None = None,
                   seed: int | None = None) -> vinet.MaskBank:
    regime = regime or cfg.vinet.mask
    fn = smask_fn(store, guider, cfg.avnet.tau, cfg.vinet.smask_source) if regime == "smask" else None
    return vinet.MaskBank(regime, store.frame_size, cfg.seed if seed is None else seed, fn)


def evaluation_masks(cfg: RunConfig, store: ClipStore, guider, regime: str) -> dict:
    """One static mask per clip: S-masks from frame 0, I-masks from a per-clip seed."""
    fn = smask_fn(store, guider, cfg.avnet.tau, cfg.vinet.smask_source) if regime == "smask" else None
    bank = vinet.MaskBank(regime, store.frame_size, cfg.metrics.mask_seed, fn)
    return {cid: bank.get(cid, 0) for cid in store.clip_ids}


# ----------------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------------

def make_extractor(cfg: RunConfig, guider=None):
    if cfg.metrics.extractor == "avnet":
        if guider is None:
            raise ConfigError("the avnet feature extractor needs an AV-Net checkpoint")
        return metrics.AVNetExtractor(guider)
    return metrics.RandomProjectionExtractor(cfg.metrics.projection_dim, seed=cfg.seed)


def audio_embeddings(guider, store: ClipStore) -> torch.Tensor:
    """(N, T, c) audio embeddings from the frozen guider."""
    with torch.no_grad():
        return torch.stack([guider.embed_audio(torch.from_numpy(store.mels[i]))
                            for i in range(len(store))])


def inpaint_split(gen, guider, store: ClipStore, clip_masks: dict) -> dict:
    """clip_id -> (raw, composited) float32 arrays of shape (T, 3, H, W)."""
    emb = audio_embeddings(guider, store)
    out = {}
    for i, cid in enumerate(store.clip_ids):
        raw, comp = vinet.inpaint_clip(gen, torch.from_numpy(store.frames[i]),
                                       clip_masks[cid], emb[i])
        out[cid] = (raw.numpy(), comp.numpy())
    return out


def evaluate(store: ClipStore, predictions: dict, clip_masks: dict, extractor, *,
             method: str, mask_type: str, dataset: str = "synthbench") -> metrics.MetricReport:
    """Score composited predictions (clip_id -> (T, 3, H, W)) against the store."""
    report = metrics.MetricReport(dataset, mask_type, method, extractor.name)
    real, fake = [], []
    for i, cid in enumerate(store.clip_ids):
        gt, pred = store.frames[i], predictions[cid]
        report.clips.append(metrics.score_clip(cid, pred, gt, clip_masks[cid]))
        real.append(metrics.video_features(gt, extractor))
        fake.append(metrics.video_features(pred, extractor))
    report.vfid = metrics.vfid(np.stack(real), np.stack(fake))
    return report


def identity_predictions(store: ClipStore) -> dict:
    """Degenerate 'method' that returns the ground truth: a sanity check for the metrics."""
    return {cid: store.frames[i] for i, cid in enumerate(store.clip_ids)}


# ----------------------------------------------------------------------------
# Ablation
# ----------------------------------------------------------------------------

@dataclass
class VariantRun:
    variant: str
    mask_type: str
    seed: int
    report: metrics.MetricReport
    loss_rows: list = field(default_factory=list)
    seconds: float = 0.0


def train_and_evaluate(cfg: RunConfig, train: ClipStore, test: ClipStore, guider, *,
                       variant: str, regime: str, seed: int, extractor=None,
                       eval_masks: dict | None = None) -> tuple:
    """Train one VI-Net variant and score it on `test`.  Returns (VariantRun, generator)."""
    start = time.time()
    weights = variant_weights(cfg, variant)
    config = vinet_config(cfg, weights, regime, seed)
    bank = training_masks(cfg, train, guider, regime, seed)
    gen, _, loss_log = vinet.train_vinet(train, guider, config, bank)
    eval_masks = eval_masks or evaluation_masks(cfg, test, guider, regime)
    extractor = extractor or make_extractor(cfg, guider)
    outputs = inpaint_split(gen, guider, test, eval_masks)
    report = evaluate(test, {k: v[1] for k, v in outputs.items()}, eval_masks, extractor,
                      method=variant, mask_type=regime)
    seconds = time.time() - start
    log.info("%s/%s seed %d: psnr %.3f ssim %.4f vfid %.4f (%.0fs)", variant, regime, seed,
             report.psnr, report.ssim, report.vfid, seconds)
    return VariantRun(variant, regime, seed, report, loss_log.rows, seconds), gen


def run_ablation(cfg: RunConfig, train: ClipStore, test: ClipStore, guider, *,
                 variants=tuple(VARIANTS), regimes=("imask", "smask"), seeds=None,
                 callback=None) -> list[VariantRun]:
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    extractor = make_extractor(cfg, guider)
    runs = []
    for regime in regimes:
        eval_masks = evaluation_masks(cfg, test, guider, regime)
        for seed in seeds:
            for variant in variants:
                run, _ = train_and_evaluate(cfg, train, test, guider, variant=variant,
                                            regime=regime, seed=seed, extractor=extractor,
                                            eval_masks=eval_masks)
                runs.append(run)
                if callback is not None:
                    callback(run)
    return runs


def mean_by(runs, variant: str, regime: str, attr: str) -> float:
    vals = [getattr(r.report, attr) for r in runs if r.variant == variant and r.mask_type == regime]
    return float(np.mean(vals)) if vals else float("nan")
