"""Cascade assembly, multi-stage inference, and checkpoint persistence.

A cascade chains N 2x generators; stage 1 consumes the lowest resolution and
the total magnification is 2**N. Intermediate stage outputs stay in
continuous [0, 1] space; quantization to 8 bits happens only at image export.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from typing import Optional, Sequence

import torch
from torch import Tensor

from .model import DPNet, DPNetConfig, ImageTensor

CHECKPOINT_FORMAT = "docsr-cascade"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for unreadable, corrupted, or version-incompatible checkpoints."""


class Cascade:
    """An ordered pipeline of DPNet stages sharing one channel count."""

    def __init__(self, stages: Sequence[DPNet], metadata: Optional[dict] = None):
        stages = list(stages)
        if not stages:
            raise ValueError("a cascade needs at least one stage")
        channels = stages[0].config.image_channels
        for i, net in enumerate(stages, start=1):
            if net.config.image_channels != channels:
                raise ValueError(
                    f"stage {i} has {net.config.image_channels} image channels, "
                    f"stage 1 has {channels}"
                )
        self.stages = stages
        self.metadata = dict(metadata or {})

    @property
    def magnification(self) -> int:
        return 2 ** len(self.stages)

    @property
    def image_channels(self) -> int:
        return self.stages[0].config.image_channels

    def __len__(self) -> int:
        return len(self.stages)


def assemble_cascade(nets: Sequence[DPNet], metadata: Optional[dict] = None) -> Cascade:
    """Chain nets in order; stage 1 consumes the lowest resolution."""
    return Cascade(nets, metadata)


def super_resolve(cascade: Cascade, img: ImageTensor, stages: Optional[int] = None) -> ImageTensor:
    """Apply the first ``stages`` nets (default all) in inference mode.

    Output spatial size is the input size times 2**stages; ``stages=0``
    returns the input unchanged.
    """
    n = len(cascade.stages)
    if stages is None:
        stages = n
    if not 0 <= stages <= n:
        raise ValueError(f"stages must be in [0, {n}], got {stages}")
    if img.shape[-3] != cascade.image_channels:
        raise ValueError(
            f"cascade expects {cascade.image_channels} channels, got {img.shape[-3]}"
        )
    out = img.clone()
    with torch.no_grad():
        for net in cascade.stages[:stages]:
            was_training = net.training
            net.eval()
            try:
                out = net(out)
            finally:
                net.train(was_training)
    return out


def _state_blob(net: DPNet) -> bytes:
    buf = io.BytesIO()
    torch.save(net.state_dict(), buf)
    return buf.getvalue()


def save_checkpoint(cascade: Cascade, path) -> None:
    """Write a single-archive checkpoint: per-stage parameter blobs plus a
    human-readable manifest with configs, provenance, and blob checksums."""
    blob_names = [f"stage_{i:03d}.pt" for i in range(len(cascade.stages))]
    blobs = [_state_blob(net) for net in cascade.stages]
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "magnification": cascade.magnification,
        "image_channels": cascade.image_channels,
        "stages": [
            {"config": net.config.to_dict(), "blob": name}
            for net, name in zip(cascade.stages, blob_names)
        ],
        "metadata": cascade.metadata,
        "sha256": {name: hashlib.sha256(blob).hexdigest() for name, blob in zip(blob_names, blobs)},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, blob in zip(blob_names, blobs):
            zf.writestr(name, blob)


def load_checkpoint(path) -> Cascade:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Rejects unknown format/version tags, missing stage blobs, and checksum
    mismatches without returning a partial cascade.
    """
    try:
        zf = zipfile.ZipFile(path, "r")
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise CheckpointError(f"checkpoint {path} has no manifest.json")
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"checkpoint {path} manifest is not valid JSON: {exc}")
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(
                f"checkpoint {path} has format tag {manifest.get('format')!r}, "
                f"expected {CHECKPOINT_FORMAT!r}"
            )
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint {path} has version {manifest.get('version')!r}; "
                f"this build reads version {CHECKPOINT_VERSION}"
            )
        stages = []
        for i, entry in enumerate(manifest.get("stages", []), start=1):
            name = entry["blob"]
            try:
                blob = zf.read(name)
            except KeyError:
                raise CheckpointError(f"checkpoint {path} is missing stage blob {name}")
            digest = hashlib.sha256(blob).hexdigest()
            expected = manifest["sha256"].get(name)
            if digest != expected:
                raise CheckpointError(
                    f"checkpoint {path} blob {name} is corrupted "
                    f"(sha256 {digest[:12]}... != recorded {str(expected)[:12]}...)"
                )
            config = DPNetConfig.from_dict(entry["config"])
            net = DPNet(config)
            state = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
            net.load_state_dict(state, strict=True)
            stages.append(net)
        if not stages:
            raise CheckpointError(f"checkpoint {path} contains no stages")
    return Cascade(stages, metadata=manifest.get("metadata", {}))
