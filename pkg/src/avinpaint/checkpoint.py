"""Versioned checkpoint container: a .npz with a JSON header and named arrays."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1
_HEADER_KEY = "__header__"


def save_checkpoint(path, module: str, header: dict, arrays: dict) -> Path:
    """Write `arrays` (name -> tensor/ndarray) atomically under a header.

    Array names may contain dots; groups are separated with '/'.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": FORMAT_VERSION, "module": module, **header}
    payload = {_HEADER_KEY: np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for name, value in arrays.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        payload[name] = np.asarray(value)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, module: str | None = None) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(bytes(data[_HEADER_KEY]).decode())
            arrays = {k: data[k] for k in data.files if k != _HEADER_KEY}
    except (ValueError, KeyError, OSError) as err:
        raise CheckpointError(f"{path}: not a valid checkpoint ({err})") from err
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    if module is not None and header.get("module") != module:
        raise CheckpointError(f"{path}: holds {header.get('module')!r}, expected {module!r}")
    return header, arrays


def state_dict_arrays(prefix: str, state: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in state.items()}


def arrays_state_dict(prefix: str, arrays: dict) -> dict:
    start = prefix + "/"
    return {k[len(start):]: torch.from_numpy(np.array(v)) for k, v in arrays.items()
            if k.startswith(start)}


# ----------------------------------------------------------------------------
# Model-specific helpers
# ----------------------------------------------------------------------------

def save_avnet(path, model, frame_size: int, extra: dict | None = None) -> Path:
    from dataclasses import asdict

    cfg = model.config
    h, w = model.feature_shape(frame_size)
    header = {"c": cfg.c, "h": h, "w": w, "K": cfg.n_clusters,
              "s": model.scale.item(), "b": model.bias.item(), "frame_size": frame_size,
              "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
              **(extra or {})}
    return save_checkpoint(path, "avnet", header, state_dict_arrays("model", model.state_dict()))


def load_avnet(path, frozen: bool = True):
    from .avnet import AVNet, AVNetConfig

    header, arrays = load_checkpoint(path, "avnet")
    cfg = dict(header["config"])
    for key in ("visual_widths", "audio_widths"):
        cfg[key] = tuple(cfg[key])
    model = AVNet(AVNetConfig(**cfg))
    model.load_state_dict(arrays_state_dict("model", arrays))
    model.eval()
    if frozen:
        model.freeze()
    return model, header


def save_vinet(path, gen, disc, extra: dict | None = None) -> Path:
    header = {"c": gen.audio_dim, "widths": list(gen.widths), **(extra or {})}
    arrays = state_dict_arrays("generator", gen.state_dict())
    if disc is not None:
        arrays.update(state_dict_arrays("discriminator", disc.state_dict()))
    return save_checkpoint(path, "vinet", header, arrays)


def load_vinet(path):
    """Returns (generator, warm-start dict with both state dicts, header)."""
    from .vinet import VINet

    header, arrays = load_checkpoint(path, "vinet")
    gen = VINet(header["c"], tuple(header["widths"]))
    g_state = arrays_state_dict("generator", arrays)
    gen.load_state_dict(g_state)
    gen.eval()
    warm = {"generator": g_state}
    d_state = arrays_state_dict("discriminator", arrays)
    if d_state:
        warm["discriminator"] = d_state
    return gen, warm, header
