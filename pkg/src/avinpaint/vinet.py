"""Audio-conditioned inpainting network and its adversarial training loop.

The generator is a per-frame encoder-decoder.  The audio embedding from the
frozen guider is broadcast over the bottleneck grid and concatenated along
channels.  A small 3-D conv discriminator scores stacks of T frames patch
by patch with hinge losses.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from . import guidance
from .errors import ConfigError, DivergenceError, InvalidInputError
from .masks import generate_imask

log = logging.getLogger(__name__)

IMASK_RATIOS = (0.200, 0.277, 0.284)


def _conv(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation),
        nn.LeakyReLU(0.2, inplace=True))


class VINet(nn.Module):
    """4-channel corrupted frame + audio embedding -> RGB frame in [0, 1]."""

    def __init__(self, audio_dim: int = 64, widths=(64, 128, 256)):
        super().__init__()
        w0, w1, w2 = widths
        self.audio_dim = audio_dim
        self.widths = tuple(widths)
        self.enc0 = _conv(4, w0)
        self.enc1 = _conv(w0, w1, stride=2)
        self.enc2 = _conv(w1, w2, stride=2)
        self.fuse = nn.Sequential(nn.Conv2d(w2 + audio_dim, w2, 1), nn.LeakyReLU(0.2, inplace=True))
        self.mid = nn.Sequential(_conv(w2, w2, dilation=2), _conv(w2, w2, dilation=4))
        self.dec1 = _conv(w2 + w1, w1)
        self.dec0 = _conv(w1 + w0, w0)
        self.out = nn.Conv2d(w0, 3, 3, padding=1)

    def forward(self, corrupted, a_emb):
        if corrupted.dim() != 4 or corrupted.shape[1] != 4:
            raise InvalidInputError(f"expected (B, 4, H, W) input, got {tuple(corrupted.shape)}")
        if a_emb.shape != (corrupted.shape[0], self.audio_dim):
            raise InvalidInputError(
                f"audio embedding {tuple(a_emb.shape)} does not match batch/width "
                f"({corrupted.shape[0]}, {self.audio_dim})")
        rgb, hole = corrupted[:, :3], corrupted[:, 3:]
        x = torch.cat([(rgb - 0.5) / 0.5 * (1 - hole), hole], dim=1)
        e0 = self.enc0(x)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        audio = a_emb[:, :, None, None].expand(-1, -1, e2.shape[2], e2.shape[3])
        b = self.fuse(torch.cat([e2, audio], dim=1))
        b = b + self.mid(b)
        d1 = F.interpolate(b, size=e1.shape[2:], mode="nearest")
        d1 = self.dec1(torch.cat([d1, e1], dim=1))
        d0 = F.interpolate(d1, size=e0.shape[2:], mode="nearest")
        d0 = self.dec0(torch.cat([d0, e0], dim=1))
        return torch.sigmoid(self.out(d0))


def inpaint(corrupted, a_emb, model: VINet):
    return model(torch.as_tensor(corrupted), torch.as_tensor(a_emb))


class PatchDiscriminator3D(nn.Module):
    """Spectrally normalised 3-D convs over (B, T, 3, H, W) -> patch scores (B, T, h, w)."""

    def __init__(self, widths=(32, 64, 64)):
        super().__init__()
        layers, cin = [], 3
        for w in widths:
            layers += [spectral_norm(nn.Conv3d(cin, w, (3, 5, 5), (1, 2, 2), (1, 2, 2))),
                       nn.LeakyReLU(0.2, inplace=True)]
            cin = w
        layers.append(spectral_norm(nn.Conv3d(cin, 1, (3, 5, 5), 1, (1, 2, 2))))
        self.net = nn.Sequential(*layers)

    def forward(self, clips):
        x = (clips.permute(0, 2, 1, 3, 4) - 0.5) / 0.5
        return self.net(x)[:, 0]


def composite(v_hat, v_gt, mask):
    """Network output inside the hole, ground truth elsewhere.  Mask broadcasts over channels."""
    if v_hat.shape != v_gt.shape:
        raise InvalidInputError(f"shape mismatch {tuple(v_hat.shape)} vs {tuple(v_gt.shape)}")
    if mask.shape[-2:] != v_gt.shape[-2:]:
        raise InvalidInputError("mask and frame disagree spatially")
    return mask * v_hat + (1 - mask) * v_gt


def reconstruction_l1(v_hat, v_gt):
    if v_hat.shape != v_gt.shape:
        raise InvalidInputError(f"shape mismatch {tuple(v_hat.shape)} vs {tuple(v_gt.shape)}")
    return (v_hat - v_gt).abs().mean()


def hinge_losses(real_scores, fake_scores_detached, fake_scores):
    disc = F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores_detached).mean()
    gen = -fake_scores.mean()
    return gen, disc


def adversarial_losses(real_frames, fake_frames, disc):
    """Hinge objectives on (B, T, 3, H, W) stacks: returns (generator loss, discriminator loss).

    The discriminator term sees the fake stack detached.
    """
    if real_frames.shape != fake_frames.shape:
        raise InvalidInputError("real and fake stacks differ in shape")
    if real_frames.dim() != 5 or real_frames.shape[1] < 2:
        raise InvalidInputError("need (B, T, 3, H, W) stacks with T >= 2")
    return hinge_losses(disc(real_frames), disc(fake_frames.detach()), disc(fake_frames))


# ----------------------------------------------------------------------------
# Masks for training / evaluation
# ----------------------------------------------------------------------------

class MaskBank:
    """Static per-clip masks, keyed by (clip_id, first frame of the window)."""

    def __init__(self, regime: str, frame_size: int, seed: int = 0, smask_fn=None):
        if regime not in ("imask", "smask"):
            raise ConfigError(f"unknown mask regime {regime!r}")
        if regime == "smask" and smask_fn is None:
            raise ConfigError("S-masks need an object-mask source")
        self.regime = regime
        self.frame_size = frame_size
        self.seed = seed
        self.smask_fn = smask_fn
        self._cache: dict = {}

    def get(self, clip_id: str, t0: int, rng: np.random.Generator | None = None) -> np.ndarray:
        if self.regime == "imask":
            if rng is not None:
                ratio = IMASK_RATIOS[int(rng.integers(len(IMASK_RATIOS)))]
                return generate_imask(self.frame_size, self.frame_size, ratio, rng)
            key = ("imask", clip_id)
            if key not in self._cache:
                sub = np.random.default_rng([self.seed, _stable_hash(clip_id)])
                ratio = IMASK_RATIOS[_stable_hash(clip_id) % len(IMASK_RATIOS)]
                self._cache[key] = generate_imask(self.frame_size, self.frame_size, ratio, sub)
            return self._cache[key]
        key = ("smask", clip_id, t0)
        if key not in self._cache:
            self._cache[key] = self.smask_fn(clip_id, t0)
        return self._cache[key]


def _stable_hash(text: str) -> int:
    h = 0
    for ch in text.encode():
        h = (h * 131 + ch) % 2_147_483_647
    return h


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------

@dataclass
class VINetTrainConfig:
    steps: int = 2000
    batch_size: int = 4
    window: int = 8
    lr: float = 1e-4
    decay_at: float = 0.6
    d_lr: float = 1e-4
    weights: guidance.LossWeights = field(default_factory=guidance.LossWeights)
    mask: str = "imask"
    widths: tuple = (64, 128, 256)
    d_widths: tuple = (32, 64, 64)
    seed: int = 0
    log_every: int = 1


@torch.no_grad()
def precompute_targets(avnet, store) -> guidance.GuideTargets:
    """Guider outputs for every frame in `store`, shaped (N, T, ...)."""
    n = len(store)
    embs, logits, atts = [], [], []
    for i in range(n):
        tg = guidance.guide_targets(avnet, torch.from_numpy(store.frames[i]),
                                    torch.from_numpy(store.mels[i]))
        embs.append(tg.audio_emb)
        logits.append(tg.audio_logits)
        atts.append(tg.att_gt)
    return guidance.GuideTargets(torch.stack(embs), torch.stack(logits), torch.stack(atts))


def _subset_targets(targets, idx, t0, window):
    sl = slice(t0, t0 + window)
    return guidance.GuideTargets(targets.audio_emb[idx, sl].flatten(0, 1),
                                 targets.audio_logits[idx, sl].flatten(0, 1),
                                 targets.att_gt[idx, sl].flatten(0, 1))


def train_vinet(store, avnet, config: VINetTrainConfig, masks: MaskBank,
                warm_start: dict | None = None, loss_log: guidance.LossLog | None = None,
                checkpoint_fn=None):
    """Train the generator and discriminator against the frozen guider.

    Each step draws `batch_size` clips, a window of `window` consecutive
    frames per clip and one static mask per clip, then runs one
    discriminator update followed by one generator update on the weighted
    objective.  Guidance terms are always logged; when both guidance
    weights are zero they are computed without a graph.

    Returns (generator, discriminator, loss_log).
    """
    if avnet is None:
        raise ConfigError("VI-Net training needs a frozen AV-Net")
    if not avnet.frozen:
        raise ConfigError("the AV-Net must be frozen before guiding the VI-Net")
    if config.window < 2 or config.window > store.n_frames:
        raise ConfigError(f"window {config.window} incompatible with {store.n_frames}-frame clips")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = VINet(avnet.config.c, config.widths)
    disc = PatchDiscriminator3D(config.d_widths)
    if warm_start is not None:
        gen.load_state_dict(warm_start["generator"])
        if "discriminator" in warm_start:
            disc.load_state_dict(warm_start["discriminator"])
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr, betas=(0.0, 0.99))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.d_lr, betas=(0.0, 0.99))
    decay_step = int(config.decay_at * config.steps)
    targets = precompute_targets(avnet, store)
    loss_log = loss_log or guidance.LossLog()
    weights = config.weights
    last_good = None
    n, T = len(store), config.window
    for step in range(config.steps):
        if step == decay_step:
            for opt in (opt_g, opt_d):
                for group in opt.param_groups:
                    group["lr"] *= 0.1
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        t0 = int(rng.integers(0, store.n_frames - T + 1))
        gt = torch.from_numpy(store.frames[idx, t0:t0 + T])  # (B, T, 3, H, W)
        hole = torch.from_numpy(np.stack([
            masks.get(store.clip_ids[i], t0, rng) for i in idx]).astype(np.float32))
        hole = hole[:, None, None].expand(-1, T, 1, -1, -1)
        corrupted = torch.cat([gt * (1 - hole), hole], dim=2)
        tg = _subset_targets(targets, idx, t0, T)

        out = gen(corrupted.flatten(0, 1), tg.audio_emb)
        comp = composite(out, gt.flatten(0, 1), hole.flatten(0, 1))
        comp_clip = comp.view_as(gt)

        d_real, d_fake = disc(gt), disc(comp_clip.detach())
        disc_loss = F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()
        opt_d.zero_grad(set_to_none=True)
        disc_loss.backward()
        opt_d.step()

        l1 = reconstruction_l1(out, gt.flatten(0, 1))
        for p in disc.parameters():
            p.requires_grad_(False)
        adv = -disc(comp_clip).mean()
        for p in disc.parameters():
            p.requires_grad_(True)
        try:
            if weights.uses_guider:
                att, cls = guidance.guidance_losses(avnet, comp, tg)
            else:
                with torch.no_grad():
                    att, cls = guidance.guidance_losses(avnet, comp, tg)
            bundle = guidance.total_loss(l1, adv, att, cls, weights)
            if not torch.isfinite(disc_loss):
                raise DivergenceError(f"discriminator loss is {float(disc_loss)}")
        except DivergenceError as err:
            _abort(step, last_good, checkpoint_fn, err)
        opt_g.zero_grad(set_to_none=True)
        bundle.total.backward()
        opt_g.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            loss_log.append(step, bundle)
        if step % 50 == 0:
            last_good = (copy.deepcopy(gen.state_dict()), copy.deepcopy(disc.state_dict()))
            log.info("vinet step %d: l1 %.4f adv %.4f att %.5f cls %.4f d %.4f", step,
                     l1.item(), adv.item(), att.item(), cls.item(), disc_loss.item())
    gen.eval()
    return gen, disc, loss_log


def _abort(step, last_good, checkpoint_fn, err):
    msg = f"step {step}: {err}"
    if last_good is not None and checkpoint_fn is not None:
        path = checkpoint_fn(*last_good)
        msg += f"; last good checkpoint written to {path}"
    raise DivergenceError(msg) from err


@torch.no_grad()
def inpaint_clip(gen: VINet, frames, mask, a_emb, batch: int = 16):
    """Inpaint every frame of one clip with a static mask.

    frames (T, 3, H, W), mask (H, W), a_emb (T, c).  Returns (raw, composited).
    """
    frames = torch.as_tensor(frames)
    hole = torch.as_tensor(mask, dtype=frames.dtype)[None, None].expand(frames.shape[0], 1, -1, -1)
    corrupted = torch.cat([frames * (1 - hole), hole], dim=1)
    outs = [gen(corrupted[i:i + batch], a_emb[i:i + batch]) for i in range(0, len(frames), batch)]
    raw = torch.cat(outs)
    return raw, composite(raw, frames, hole)
