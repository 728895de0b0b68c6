import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import gradcheck
from avinpaint import avnet
from avinpaint.errors import FrozenError, InvalidInputError

SIG1 = 1.0 / (1.0 + math.exp(-1.0))


def toy_model(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    cfg = avnet.AVNetConfig(c=4, n_clusters=3, visual_widths=(2, 2, 2), audio_widths=(2, 2, 2))
    model = avnet.AVNet(cfg)
    # a fresh BatchNorm (beta=0, identity stats) puts ReLU inputs on the kink
    for mod in model.modules():
        if isinstance(mod, torch.nn.BatchNorm2d):
            mod.weight.data.uniform_(0.5, 1.5)
            mod.bias.data.normal_(0.0, 0.3)
            mod.running_mean.normal_(0.0, 0.3)
            mod.running_var.uniform_(0.5, 2.0)
    model = model.to(dtype)
    model.eval()
    return model


def inputs(dtype, n=2, size=16, seed=0, mel_shape=(33, 16)):
    # toy-sized mel: float32 sums over the full 201x80 grid drift past 1e-3
    g = torch.Generator().manual_seed(seed)
    frames = torch.rand(n, 3, size, size, generator=g, dtype=torch.float64).to(dtype)
    mels = torch.randn(n, *mel_shape, generator=g, dtype=torch.float64).to(dtype)
    return frames, mels


def n_params(model):
    return sum(p.numel() for p in model.parameters())


class TestEncoders:
    def test_shapes(self):
        model = avnet.AVNet()
        model.eval()
        a = avnet.audio_encode(torch.randn(2, 201, 80), model)
        v = avnet.visual_encode(torch.rand(2, 3, 224, 224), model)
        assert a.shape == (2, 64)
        assert v.shape == (2, 64, 14, 14)
        assert model.feature_shape(224) == (14, 14)
        assert model.feature_shape(112) == (7, 7)

    def test_stateless_inference(self):
        model = toy_model(dtype=torch.float32)
        mel = torch.randn(1, 201, 80)
        assert torch.equal(avnet.audio_encode(mel, model), avnet.audio_encode(mel, model))
        frame = torch.rand(1, 3, 32, 32)
        assert torch.equal(avnet.visual_encode(frame, model), avnet.visual_encode(frame, model))

    def test_audio_gradient_double(self):
        model = toy_model()
        assert n_params(model) <= 1000
        mel = torch.randn(1, 201, 80, dtype=torch.float64)
        params = list(model.audio.parameters())
        gradcheck.check(lambda: model.embed_audio(mel)[0, 1], params, eps=1e-6, tol=1e-5)

    def test_visual_gradient_single(self):
        def build(dtype):
            model = toy_model(dtype=dtype)
            frames, _ = inputs(dtype, n=1)
            return lambda: model.visual_map(frames)[0, 2].sum(), list(model.visual.parameters())

        gradcheck.check_single(build)


class TestAttention:
    def _pair(self, v_cells):
        a = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        v = torch.tensor(v_cells, dtype=torch.float64).T.reshape(1, 3, 1, -1)
        return a, v

    def test_fixtures(self):
        a, v = self._pair([[0, 1, 0], [1, 0, 0], [-1, 0, 0]])
        m = avnet.attention_map(a, v)[0, 0]
        np.testing.assert_allclose(m.numpy(), [0.5, SIG1, 1 - SIG1], atol=1e-12)
        assert abs(SIG1 - 0.7311) < 1e-4

    def test_zero_vector_neutral_and_flagged(self):
        a, v = self._pair([[0, 0, 0], [1, 0, 0]])
        m, flags = avnet.attention_map(a, v, return_flags=True)
        assert m[0, 0, 0] == 0.5 and flags[0, 0, 0] and not flags[0, 0, 1]

    def test_nan_rejected(self):
        a, v = self._pair([[float("nan"), 0, 0]])
        with pytest.raises(InvalidInputError):
            avnet.attention_map(a, v)

    def test_channel_mismatch(self):
        with pytest.raises(InvalidInputError):
            avnet.attention_map(torch.zeros(1, 3), torch.zeros(1, 4, 2, 2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_range_and_scale_invariance(self, seed):
        g = torch.Generator().manual_seed(seed)
        a = torch.randn(2, 5, generator=g, dtype=torch.float64)
        v = torch.randn(2, 5, 3, 4, generator=g, dtype=torch.float64)
        m = avnet.attention_map(a, v, 10.0, -5.0)
        assert ((m > 0) & (m < 1)).all()
        ka = torch.rand(2, 1, generator=g, dtype=torch.float64) * 10 + 0.1
        kv = torch.rand(2, 1, 3, 4, generator=g, dtype=torch.float64) * 10 + 0.1
        torch.testing.assert_close(avnet.attention_map(a * ka, v * kv, 10.0, -5.0), m)


class TestCorrespondenceLoss:
    def test_fixtures(self):
        att = torch.full((1, 2, 2), 0.2, dtype=torch.float64)
        att[0, 1, 0] = SIG1
        assert abs(avnet.correspondence_loss(att, [1.0]).item() - 0.31326) < 1e-5
        assert abs(avnet.correspondence_loss(att, [1.0]).item() + math.log(SIG1)) < 1e-12
        half = torch.full((1, 3, 3), 0.5, dtype=torch.float64)
        assert abs(avnet.correspondence_loss(half, [0.0]).item() - math.log(2)) < 1e-12

    def test_map_size_invariant(self):
        for n in (1, 4, 14):
            att = torch.full((1, n, n), 0.5, dtype=torch.float64)
            assert abs(avnet.correspondence_loss(att, [1.0]).item() - math.log(2)) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_invariant(self, seed):
        g = torch.Generator().manual_seed(seed)
        att = torch.rand(3, 4, 4, generator=g, dtype=torch.float64) * 0.98 + 0.01
        y = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
        perm = torch.randperm(16, generator=g)
        shuffled = att.flatten(1)[:, perm].reshape(3, 4, 4)
        assert abs(avnet.correspondence_loss(att, y) - avnet.correspondence_loss(shuffled, y)) < 1e-12

    def test_logit_form_matches(self):
        logits = torch.randn(4, 3, 3, dtype=torch.float64)
        y = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
        torch.testing.assert_close(avnet.correspondence_loss_from_logits(logits, y),
                                   avnet.correspondence_loss(torch.sigmoid(logits), y))

    def test_gradient_double(self):
        torch.manual_seed(1)
        a = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
        v = torch.randn(2, 4, 3, 3, dtype=torch.float64, requires_grad=True)
        s = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
        b = torch.tensor(-1.0, dtype=torch.float64, requires_grad=True)
        y = torch.tensor([1.0, 0.0], dtype=torch.float64)
        gradcheck.check(lambda: avnet.correspondence_loss(avnet.attention_map(a, v, s, b), y),
                        [a, v, s, b], eps=1e-6, tol=1e-5)

    def test_gradient_through_toy_net_single(self):
        def build(dtype):
            model = toy_model(dtype=dtype)
            frames, mels = inputs(dtype)
            y = torch.tensor([1.0, 0.0], dtype=dtype)

            def loss():
                return avnet.correspondence_loss(
                    model.attention(model.embed_audio(mels), model.visual_map(frames)), y)

            return loss, list(model.parameters())

        gradcheck.check_single(build)


class TestObjectRepr:
    def test_hand_fixture(self):
        v = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        att = torch.tensor([[[0.9, 0.0], [0.0, 0.9]]])
        desc, mask, empty = avnet.extract_object_repr(att, v)
        assert desc.item() == pytest.approx(1.25)
        assert mask.tolist() == [[[1, 0], [0, 1]]]
        assert not empty.item()

    def test_all_ones_is_plain_mean(self):
        v = torch.randn(2, 5, 3, 3)
        desc, _, _ = avnet.extract_object_repr(torch.ones(2, 3, 3), v)
        torch.testing.assert_close(desc, v.mean(dim=(2, 3)))

    def test_fallback(self):
        v = torch.randn(1, 5, 3, 3)
        desc, mask, empty = avnet.extract_object_repr(torch.full((1, 3, 3), 0.01), v)
        assert empty.item() and mask.sum() == 0
        torch.testing.assert_close(desc, v.mean(dim=(2, 3)))


class TestClassificationLoss:
    def test_uniform(self):
        z = torch.zeros(1, 10, dtype=torch.float64)
        assert abs(avnet.classification_loss(z, z, [3]).item() - 2 * math.log(10)) < 1e-12

    def test_peaked_limit(self):
        z = torch.zeros(1, 10, dtype=torch.float64)
        z[0, 4] = 200.0
        assert avnet.classification_loss(z, z, [4]).item() < 1e-12

    def test_independent_oracle(self):
        rng = np.random.default_rng(0)
        za, zv = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
        labels = rng.integers(0, 7, 5)

        def ce(z):
            z = z - z.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            return -logp[np.arange(5), labels].mean()

        got = avnet.classification_loss(torch.from_numpy(za), torch.from_numpy(zv), labels).item()
        assert abs(got - (ce(za) + ce(zv))) < 1e-12

    def test_out_of_range(self):
        with pytest.raises(InvalidInputError):
            avnet.classification_loss(torch.zeros(1, 3), torch.zeros(1, 3), [3])

    def test_relabeling_invariant(self):
        rng = np.random.default_rng(1)
        za, zv = torch.from_numpy(rng.normal(size=(6, 4))), torch.from_numpy(rng.normal(size=(6, 4)))
        labels = rng.integers(0, 4, 6)
        perm = rng.permutation(4)
        # relabel cluster j -> perm[j]: move logit column j to column perm[j]
        inv = np.argsort(perm)
        before = avnet.classification_loss(za, zv, labels)
        after = avnet.classification_loss(za[:, inv], zv[:, inv], perm[labels])
        assert abs(before.item() - after.item()) < 1e-12

    def test_gradient_double(self):
        torch.manual_seed(2)
        za = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
        zv = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
        gradcheck.check(lambda: avnet.classification_loss(za, zv, [0, 4, 2]), [za, zv])

    def test_gradient_through_toy_net_single(self):
        def build(dtype):
            model = toy_model(dtype=dtype)
            frames, mels = inputs(dtype)

            def loss():
                a = model.embed_audio(mels)
                return avnet.classification_loss(
                    model.audio_logits(a), model.visual_logits(model.visual_map(frames)), [0, 2])

            return loss, list(model.parameters())

        gradcheck.check_single(build)


class TestKMeans:
    def test_k1(self):
        x = np.random.default_rng(0).normal(size=(20, 3))
        table = avnet.cluster_pseudo_labels(x, [f"c{i}" for i in range(20)], k=1)
        assert set(table.labels.values()) == {0}

    def test_two_blobs_match_nearest_center_oracle(self):
        rng = np.random.default_rng(3)
        centers = np.array([[0.0, 0.0], [50.0, 50.0]])
        x = np.concatenate([rng.normal(c, 1.0, (30, 2)) for c in centers])
        labels, fitted, _ = avnet.kmeans(x, 2, seed=0)
        oracle = np.argmin(((x[:, None] - centers[None]) ** 2).sum(-1), axis=1)
        # same partition up to label names
        assert (labels == oracle).all() or (labels == 1 - oracle).all()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 6))
    def test_objective_non_increasing(self, seed, k):
        x = np.random.default_rng(seed).normal(size=(40, 3))
        _, _, history = avnet.kmeans(x, k, seed=seed)
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))

    def test_too_few_descriptors(self):
        with pytest.raises(InvalidInputError):
            avnet.cluster_pseudo_labels(np.zeros((3, 2)), ["a", "b", "c"], k=4)

    def test_align_labels_hungarian(self):
        ids = [f"c{i}" for i in range(6)]
        old = avnet.PseudoLabelTable(dict(zip(ids, [0, 0, 1, 1, 2, 2])), np.zeros((3, 1)))
        new = avnet.PseudoLabelTable(dict(zip(ids, [2, 2, 0, 0, 1, 1])), np.arange(3.0)[:, None])
        aligned = avnet.align_labels(new, old)
        assert aligned.labels == old.labels
        np.testing.assert_array_equal(aligned.centroids[:, 0], [2.0, 0.0, 1.0])

    def test_purity(self):
        assert avnet.cluster_purity([0, 0, 1, 1], [5, 5, 6, 6]) == 1.0
        assert avnet.cluster_purity([0, 0, 0, 0], [5, 5, 6, 6]) == 0.5


class TestTrainingContracts:
    def test_frozen_refuses_updates(self):
        model = toy_model(dtype=torch.float32).freeze()
        before = avnet.params_hash(model)
        opt = torch.optim.SGD([torch.zeros(1, requires_grad=True)], lr=1.0)
        with pytest.raises(FrozenError):
            avnet.correspondence_step(model, opt, torch.rand(2, 3, 16, 16),
                                      torch.randn(2, 201, 80), torch.tensor([1.0, 0.0]))
        with pytest.raises(FrozenError):
            avnet.classification_step(model, opt, torch.rand(2, 3, 16, 16),
                                      torch.randn(2, 201, 80), torch.tensor([0, 1]))
        assert avnet.params_hash(model) == before
        assert all(not p.requires_grad for p in model.parameters())

    def test_mismatch_labels_follow_clip_ids(self):
        idx, y = avnet.mismatch_audio(["a", "b", "c", "d"])
        assert list(idx) == [0, 1, 3, 2]
        assert list(y) == [1, 1, 0, 0]
        idx, y = avnet.mismatch_audio(["a", "b", "c", "c"])
        assert list(y) == [1, 1, 1, 1]
