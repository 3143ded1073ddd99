"""Checkpoint container: a zip of ``.npy`` arrays plus a JSON manifest.

Layout::

    manifest.json          format, version, array index, config echo, counters
    arrays/<name>.npy      one entry per state-dict tensor (parameters and buffers)

Entries are stored uncompressed with a fixed timestamp so identical contents
give byte-identical files. ``numpy.load`` can open the archive directly.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, config_from_dict
from .model import SiamTOL

FORMAT = "siamtol-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    pass


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    manifest = {"format": FORMAT, "version": VERSION,
                "arrays": [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype)}
                           for k, v in arrays.items()], **meta}
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry("manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.array(arr, order="C"), allow_pickle=False)
            zf.writestr(_entry(f"arrays/{name}.npy"), buf.getvalue())


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from None
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path} is not a {FORMAT} file")
        if manifest.get("version") != VERSION:
            raise CheckpointError(f"checkpoint version {manifest.get('version')} != supported {VERSION}")
        arrays = {}
        for spec in manifest["arrays"]:
            arr = np.lib.format.read_array(io.BytesIO(zf.read(f"arrays/{spec['name']}.npy")),
                                           allow_pickle=False)
            if list(arr.shape) != spec["shape"] or str(arr.dtype) != spec["dtype"]:
                raise CheckpointError(f"array {spec['name']} does not match its manifest entry")
            arrays[spec["name"]] = arr
    return arrays, manifest


def save_checkpoint(path: str | Path, model: SiamTOL, config: RunConfig, epoch: int = 0, step: int = 0) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_arrays(path, arrays, {"config": config.to_dict(), "epoch": epoch, "step": step,
                               "tool_version": __version__})


def build_model(config: RunConfig, seed: int | None = None) -> SiamTOL:
    """Fresh model; parameter initialisation is seeded."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed if seed is None else seed)
        return SiamTOL(config.backbone, config.anchors)


def load_checkpoint(path: str | Path) -> tuple[SiamTOL, RunConfig, dict]:
    arrays, manifest = load_arrays(path)
    config = config_from_dict(manifest["config"])
    model = SiamTOL(config.backbone, config.anchors)
    state = model.state_dict()
    if set(state) != set(arrays):
        missing = sorted(set(state) ^ set(arrays))
        raise CheckpointError(f"checkpoint/model parameter mismatch: {missing[:5]}")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    model.eval()
    return model, config, manifest
