import numpy as np
import pytest
import torch

import gradcheck
from avinpaint import avnet, guidance, synthbench as sb, vinet
from avinpaint.data import ClipStore
from avinpaint.errors import ConfigError, DivergenceError, InvalidInputError


def small_gen(dtype=torch.float32, seed=0, widths=(4, 6, 8), audio_dim=4):
    torch.manual_seed(seed)
    return vinet.VINet(audio_dim, widths).to(dtype)


class TestInpaint:
    def test_shape_and_range(self):
        gen = vinet.VINet(64, (8, 16, 32))
        x = torch.rand(2, 4, 224, 224)
        out = vinet.inpaint(x, torch.randn(2, 64), gen)
        assert out.shape == (2, 3, 224, 224)
        assert out.min() >= 0 and out.max() <= 1

    @pytest.mark.parametrize("seed", range(5))
    def test_audio_path_live(self, seed):
        gen = small_gen(seed=seed)
        x = torch.rand(1, 4, 16, 16)
        a = gen(x, torch.randn(1, 4))
        b = gen(x, torch.randn(1, 4))
        assert (a - b).abs().max() > 0

    def test_bad_channels(self):
        gen = small_gen()
        with pytest.raises(InvalidInputError):
            gen(torch.rand(1, 3, 16, 16), torch.randn(1, 4))
        with pytest.raises(InvalidInputError):
            gen(torch.rand(1, 4, 16, 16), torch.randn(1, 5))

    def test_l1_gradient_wrt_encoder_double(self):
        gen = small_gen(torch.float64)
        assert sum(p.numel() for p in gen.enc0.parameters()) + sum(
            p.numel() for p in gen.enc1.parameters()) <= 1000
        g = torch.Generator().manual_seed(0)
        x = torch.rand(1, 4, 8, 8, generator=g, dtype=torch.float64)
        a = torch.randn(1, 4, generator=g, dtype=torch.float64)
        gt = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
        params = list(gen.enc0.parameters()) + list(gen.enc1.parameters())
        gradcheck.check(lambda: vinet.reconstruction_l1(gen(x, a), gt), params)

    def test_l1_gradient_wrt_encoder_single(self):
        def build(dtype):
            gen = small_gen(dtype)
            g = torch.Generator().manual_seed(0)
            x = torch.rand(1, 4, 8, 8, generator=g, dtype=torch.float64).to(dtype)
            a = torch.randn(1, 4, generator=g, dtype=torch.float64).to(dtype)
            gt = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64).to(dtype)
            return (lambda: vinet.reconstruction_l1(gen(x, a), gt),
                    list(gen.enc0.parameters()) + list(gen.enc1.parameters()))

        gradcheck.check_single(build)


class TestComposite:
    def test_zero_and_full(self):
        v_hat, gt = torch.rand(2, 3, 4, 4), torch.rand(2, 3, 4, 4)
        assert torch.equal(vinet.composite(v_hat, gt, torch.zeros(4, 4)), gt)
        assert torch.equal(vinet.composite(v_hat, gt, torch.ones(4, 4)), v_hat)

    def test_half_mask_elementwise(self):
        v_hat = torch.full((3, 2, 2), 0.9)
        gt = torch.full((3, 2, 2), 0.1)
        mask = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        out = vinet.composite(v_hat, gt, mask)
        expected = torch.tensor([[0.9, 0.1], [0.1, 0.9]]).expand(3, 2, 2)
        assert torch.equal(out, expected)

    def test_outside_mask_bitwise(self):
        g = torch.Generator().manual_seed(3)
        v_hat, gt = torch.rand(3, 8, 8, generator=g), torch.rand(3, 8, 8, generator=g)
        mask = (torch.rand(8, 8, generator=g) > 0.5).float()
        out = vinet.composite(v_hat, gt, mask)
        keep = mask == 0
        assert torch.equal(out[:, keep], gt[:, keep])

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            vinet.composite(torch.rand(3, 4, 4), torch.rand(3, 5, 5), torch.zeros(4, 4))


class TestL1:
    def test_fixtures(self):
        x = torch.rand(2, 3, 5, 5, dtype=torch.float64)
        assert vinet.reconstruction_l1(x, x).item() == 0.0
        assert abs(vinet.reconstruction_l1(x + 0.1, x).item() - 0.1) < 1e-12

    def test_independent_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(size=(2, 3, 4, 4)), rng.uniform(size=(2, 3, 4, 4))
        got = vinet.reconstruction_l1(torch.from_numpy(a), torch.from_numpy(b)).item()
        assert abs(got - np.abs(a - b).mean()) < 1e-12


class _ConstD(torch.nn.Module):
    def __init__(self, real, fake):
        super().__init__()
        self.real, self.fake = real, fake

    def forward(self, clips):
        value = self.real if clips[0, 0, 0, 0, 0] > 0.5 else self.fake
        return torch.full((clips.shape[0], clips.shape[1], 2, 2), value, dtype=clips.dtype) + 0 * clips.sum()


class TestAdversarial:
    def test_zero_discriminator(self):
        real, fake = torch.rand(1, 3, 3, 8, 8), torch.rand(1, 3, 3, 8, 8)
        gen_loss, disc_loss = vinet.adversarial_losses(real, fake, _ConstD(0.0, 0.0))
        assert disc_loss.item() == 2.0 and gen_loss.item() == 0.0

    def test_saturation(self):
        real = torch.ones(1, 3, 3, 8, 8)
        fake = torch.zeros(1, 3, 3, 8, 8)
        _, disc_loss = vinet.adversarial_losses(real, fake, _ConstD(1.5, -1.2))
        assert disc_loss.item() == 0.0

    def test_generator_monotone_sweep(self):
        values = [vinet.hinge_losses(torch.zeros(4), torch.full((4,), s), torch.full((4,), s))[0].item()
                  for s in np.linspace(-3, 3, 13)]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_short_window_rejected(self):
        with pytest.raises(InvalidInputError):
            vinet.adversarial_losses(torch.rand(1, 1, 3, 8, 8), torch.rand(1, 1, 3, 8, 8),
                                     vinet.PatchDiscriminator3D((4, 4, 4)))

    def test_patch_grid(self):
        d = vinet.PatchDiscriminator3D((4, 4, 4))
        assert d(torch.rand(2, 8, 3, 32, 32)).shape == (2, 8, 4, 4)

    def test_hinge_gradient_double(self):
        torch.manual_seed(0)
        d = vinet.PatchDiscriminator3D((2, 2, 2)).double()
        d.eval()
        real = torch.rand(1, 2, 3, 8, 8, dtype=torch.float64)
        fake = torch.rand(1, 2, 3, 8, 8, dtype=torch.float64, requires_grad=True)
        gradcheck.check(lambda: vinet.adversarial_losses(real, fake, d)[0], [fake])


# ----------------------------------------------------------------------------
# Training loop contracts on a tiny synthetic store
# ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_store():
    rng = np.random.default_rng(0)
    pairs = [sb.generate_scene(sb.random_spec(k % 2, 2, rng, f"c{k}")) for k in range(4)]
    clips, gts = zip(*pairs)
    return ClipStore(list(clips), list(gts), frame_size=32)


@pytest.fixture(scope="module")
def guider():
    torch.manual_seed(0)
    cfg = avnet.AVNetConfig(c=8, n_clusters=3, visual_widths=(4, 4, 4), audio_widths=(4, 4, 4))
    return avnet.AVNet(cfg).freeze()


def _config(**kw):
    base = dict(steps=4, batch_size=2, window=4, widths=(4, 6, 8), d_widths=(4, 4, 4), seed=3)
    base.update(kw)
    return vinet.VINetTrainConfig(**base)


def _bank(regime="imask"):
    square = np.zeros((32, 32), np.uint8)
    square[8:22, 8:22] = 1
    return vinet.MaskBank(regime, 32, seed=0, smask_fn=lambda cid, t0: square)


class TestTrainVINet:
    def test_guider_untouched(self, tiny_store, guider):
        before = avnet.params_hash(guider)
        vinet.train_vinet(tiny_store, guider, _config(), _bank())
        assert avnet.params_hash(guider) == before

    def test_deterministic(self, tiny_store, guider):
        a = vinet.train_vinet(tiny_store, guider, _config(mask="smask"), _bank("smask"))[2].rows
        b = vinet.train_vinet(tiny_store, guider, _config(mask="smask"), _bank("smask"))[2].rows
        for ra, rb in zip(a, b):
            for k in ra:
                assert abs(ra[k] - rb[k]) <= 1e-6

    def test_bundle_identity_each_step(self, tiny_store, guider):
        w = guidance.LossWeights()
        rows = vinet.train_vinet(tiny_store, guider, _config(weights=w), _bank())[2].rows
        assert len(rows) == 4
        for r in rows:
            expected = w.l1 * r["l1"] + w.adv * r["adv"] + w.att_av * r["att_av"] + w.cls_av * r["cls_av"]
            assert abs(r["total"] - expected) <= 1e-5 * max(1.0, abs(expected))

    def test_baseline_is_l1_plus_adv(self, tiny_store, guider):
        w = guidance.LossWeights(att_av=0.0, cls_av=0.0)
        rows = vinet.train_vinet(tiny_store, guider, _config(weights=w), _bank())[2].rows
        for r in rows:
            assert r["att_av"] >= 0 and r["cls_av"] > 0
            assert abs(r["total"] - (r["l1"] + 0.01 * r["adv"])) <= 1e-6

    def test_baseline_needs_no_guider_graph(self, tiny_store, guider, monkeypatch):
        seen = []
        original = guidance.guidance_losses

        def spy(avnet_, inpainted, targets):
            seen.append(torch.is_grad_enabled())
            return original(avnet_, inpainted, targets)

        monkeypatch.setattr(guidance, "guidance_losses", spy)
        w = guidance.LossWeights(att_av=0.0, cls_av=0.0)
        vinet.train_vinet(tiny_store, guider, _config(weights=w, steps=2), _bank())
        assert seen and not any(seen)

    def test_missing_or_unfrozen_guider(self, tiny_store):
        with pytest.raises(ConfigError):
            vinet.train_vinet(tiny_store, None, _config(), _bank())
        with pytest.raises(ConfigError):
            vinet.train_vinet(tiny_store, avnet.AVNet(), _config(), _bank())

    def test_warm_start_loads_weights(self, tiny_store, guider):
        gen, disc, _ = vinet.train_vinet(tiny_store, guider, _config(steps=1), _bank())
        warm = {"generator": gen.state_dict(), "discriminator": disc.state_dict()}
        gen2, _, _ = vinet.train_vinet(tiny_store, guider, _config(steps=0), _bank(), warm_start=warm)
        for k, v in gen.state_dict().items():
            assert torch.equal(v, gen2.state_dict()[k])

    def test_nan_aborts_with_last_good_checkpoint(self, tiny_store, guider, monkeypatch):
        calls = {"n": 0}
        original = vinet.reconstruction_l1

        def poisoned(a, b):
            calls["n"] += 1
            value = original(a, b)
            return value * float("nan") if calls["n"] >= 3 else value

        monkeypatch.setattr(vinet, "reconstruction_l1", poisoned)
        written = []
        with pytest.raises(DivergenceError, match="l1"):
            vinet.train_vinet(tiny_store, guider, _config(), _bank(),
                              checkpoint_fn=lambda g, d: written.append((g, d)) or "ckpt")
        assert len(written) == 1


class TestMaskBank:
    def test_eval_imask_stable(self):
        bank = vinet.MaskBank("imask", 64, seed=1)
        assert np.array_equal(bank.get("a", 0), bank.get("a", 5))
        other = vinet.MaskBank("imask", 64, seed=1)
        assert np.array_equal(bank.get("a", 0), other.get("a", 0))

    def test_smask_requires_source(self):
        with pytest.raises(ConfigError):
            vinet.MaskBank("smask", 64)
        with pytest.raises(ConfigError):
            vinet.MaskBank("other", 64)


def test_inpaint_clip_composites(tiny_store):
    gen = vinet.VINet(4, (4, 6, 8))
    frames = torch.from_numpy(tiny_store.frames[0])
    mask = np.zeros((32, 32), np.float32)
    mask[4:10, 4:10] = 1
    raw, comp = vinet.inpaint_clip(gen, frames, mask, torch.randn(16, 4))
    assert raw.shape == frames.shape
    keep = torch.from_numpy(mask) == 0
    assert torch.equal(comp[:, :, keep], frames[:, :, keep])
