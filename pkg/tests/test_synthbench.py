import json

import numpy as np
import pytest
from scipy import ndimage

from avinpaint import avio, synthbench as sb
from avinpaint.errors import InvalidInputError


def _spec(k=0, **kw):
    rng = np.random.default_rng(k + 100)
    return sb.random_spec(k, 4, rng, f"t{k}", **kw)


def test_same_spec_bitwise_identical():
    a, ga = sb.generate_scene(_spec())
    b, gb = sb.generate_scene(_spec())
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.waveform, b.waveform)
    assert np.array_equal(ga.object_masks, gb.object_masks)


def test_clip_contract():
    clip, gt = sb.generate_scene(_spec())
    assert clip.frames.shape == (16, 224, 224, 3)
    assert clip.waveform.shape == (32000,)
    assert clip.frames.min() >= 0 and clip.frames.max() <= 1
    assert np.abs(clip.waveform).max() <= 1


def test_500hz_tone_peaks_at_its_mel_bin():
    spec = sb.SceneSpec.for_class(1, start=(60.0, 100.0), end=(60.0, 120.0),
                                  distractor_class=0, seed=3, snr_db=20.0)
    assert spec.tone_hz == 500.0
    clip, _ = sb.generate_scene(spec)
    mel = avio.compute_log_mel(avio.sample_audio_segment(clip, 1.0))
    mels = np.linspace(0, 2595 * np.log10(1 + 8000 / 700), 82)[1:-1]
    centers = 700 * (10 ** (mels / 2595) - 1)
    expected = int(np.argmin(np.abs(centers - 500.0)))
    assert np.bincount(mel[1:-1].argmax(axis=1)).argmax() == expected


@pytest.mark.parametrize("k", [0, 1, 2])
def test_mask_area_matches_analytic_area(k):
    spec = _spec(k)
    _, gt = sb.generate_scene(spec)
    half = sb.shape_extent(spec.shape)
    area = sb.analytic_area(spec.shape, half)
    perimeter = sb.analytic_perimeter(spec.shape, half)
    for mask in gt.object_masks[[0, 7, 15]]:
        assert abs(mask.sum() - area) <= perimeter


def test_masks_nonempty_connected_and_colored():
    spec = _spec(2)
    clip, gt = sb.generate_scene(spec)
    for frame, mask in zip(clip.frames, gt.object_masks):
        assert mask.sum() > 0
        assert ndimage.label(mask)[1] == 1
        np.testing.assert_allclose(frame[mask.astype(bool)], np.broadcast_to(np.float32(spec.color), (int(mask.sum()), 3)))


def test_tone_bijection_spacing():
    tones = [sb.tone_for_class(k) for k in range(10)]
    assert all(t < 8000 for t in tones)
    gaps = np.abs(np.subtract.outer(tones, tones))[~np.eye(10, dtype=bool)]
    assert gaps.min() >= 150
    keys = {(sb.shape_for_class(k), sb.color_for_class(k), sb.tone_for_class(k)) for k in range(10)}
    assert len(keys) == 10


def test_path_leaving_canvas_rejected():
    spec = sb.SceneSpec.for_class(0, start=(5.0, 5.0), end=(100.0, 100.0), distractor_class=1)
    with pytest.raises(InvalidInputError):
        sb.generate_scene(spec)


def test_object_area_fraction():
    for k in range(3):
        _, gt = sb.generate_scene(_spec(k))
        assert 0.08 <= gt.object_masks.mean() <= 0.15


class TestDataset:
    def test_split_arithmetic(self):
        _, manifest = sb.plan_dataset(10, 10, seed=0)
        splits = manifest["splits"]
        assert [len(splits[s]) for s in ("train", "val", "test")] == [70, 10, 20]
        for name, per_class in (("train", 7), ("val", 1), ("test", 2)):
            counts = np.bincount([manifest["clips"][c]["class_id"] for c in splits[name]])
            assert (counts == per_class).all()
        assert not set(splits["train"]) & set(splits["test"])
        assert not set(splits["train"]) & set(splits["val"])

    def test_deterministic_manifest(self):
        assert sb.plan_dataset(3, 4, seed=9)[1] == sb.plan_dataset(3, 4, seed=9)[1]

    def test_too_few_clips(self):
        with pytest.raises(InvalidInputError):
            sb.plan_dataset(2, 2, seed=0)

    def test_too_many_classes(self):
        with pytest.raises(InvalidInputError):
            sb.plan_dataset(11, 3, seed=0)

    def test_writes_layout(self, tmp_path):
        manifest = sb.generate_dataset(2, 3, seed=1, root=tmp_path)
        assert json.loads((tmp_path / "index.json").read_text()) == manifest
        cid = manifest["splits"]["train"][0]
        assert (tmp_path / cid / "audio.wav").exists()
        assert len(list((tmp_path / cid / "frames").glob("*.png"))) == 16
        assert len(list((tmp_path / cid / "gt_masks").glob("*.png"))) == 16
        gt = sb.load_ground_truth(tmp_path, cid)
        assert gt.class_id == manifest["clips"][cid]["class_id"]
        assert json.loads((tmp_path / cid / "gt.json").read_text())["spec"]["clip_id"] == cid
