import numpy as np
import pytest
import torch

from avinpaint import avnet, checkpoint, vinet
from avinpaint.errors import CheckpointError


def test_avnet_roundtrip(tmp_path):
    torch.manual_seed(0)
    cfg = avnet.AVNetConfig(c=8, n_clusters=3, visual_widths=(4, 4, 4), audio_widths=(4, 4, 4))
    model = avnet.AVNet(cfg)
    path = checkpoint.save_avnet(tmp_path / "a.npz", model, frame_size=64)
    loaded, header = checkpoint.load_avnet(path)
    assert loaded.frozen
    assert avnet.params_hash(loaded) == avnet.params_hash(model)
    assert header["format_version"] == 1 and header["module"] == "avnet"
    assert (header["c"], header["h"], header["w"], header["K"]) == (8, 4, 4, 3)
    assert header["s"] == 10.0 and header["b"] == -5.0


def test_vinet_roundtrip(tmp_path):
    gen, disc = vinet.VINet(8, (4, 6, 8)), vinet.PatchDiscriminator3D((4, 4, 4))
    path = checkpoint.save_vinet(tmp_path / "v.npz", gen, disc)
    loaded, warm, header = checkpoint.load_vinet(path)
    assert header["module"] == "vinet"
    for k, v in gen.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])
    disc2 = vinet.PatchDiscriminator3D((4, 4, 4))
    disc2.load_state_dict(warm["discriminator"])


def test_wrong_module(tmp_path):
    path = checkpoint.save_checkpoint(tmp_path / "x.npz", "vinet", {}, {"w": np.zeros(2)})
    with pytest.raises(CheckpointError):
        checkpoint.load_checkpoint(path, "avnet")


def test_missing_and_corrupt(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load_checkpoint(tmp_path / "none.npz")
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        checkpoint.load_checkpoint(bad)
