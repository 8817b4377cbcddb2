"""Checkpoint archives: a zip of raw float32 tensors plus a JSON manifest.

Layout of an archive::

    manifest.json            format version, model config, phase/epoch/seed,
                             head kind, and the shape of every tensor
    tensors/<path>.f32       raw little-endian float32 data, C order

Tensor paths are the canonical training paths: ``model.<name>`` for every
``VisionEncoder.named_parameters()`` entry, ``head.<name>`` for the attached
head, and ``optim.m.<path>`` / ``optim.v.<path>`` for optimizer moments when
saved. Loading verifies the zip CRC, the format version, and that every
archived path is expected, so corruption, truncation, and schema drift all
fail loudly. A classification checkpoint can be reloaded backbone-only and
a fresh segmentation head attached (head swap).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .backbone import ModelConfig, VisionEncoder
from .errors import CheckpointIntegrityError, CheckpointVersionError, UnknownParameterError
from .objectives import ClsHead, ReconHead, SegHead
from .optim import OptimState

FORMAT_VERSION = 1
HEAD_KINDS = {"recon": ReconHead, "cls": ClsHead, "seg": SegHead}


def head_kind(head) -> str | None:
    if head is None:
        return None
    for kind, cls in HEAD_KINDS.items():
        if isinstance(head, cls):
            return kind
    raise ValueError(f"unrecognized head type {type(head).__name__}")


def make_head(kind: str, config: ModelConfig, generator=None, **kwargs):
    if kind not in HEAD_KINDS:
        raise ValueError(f"unknown head kind {kind!r}")
    return HEAD_KINDS[kind](config, generator=generator, **kwargs)


def _named_tensors(model, head, optim_state):
    out = {f"model.{n}": p for n, p in model.named_parameters()}
    if head is not None:
        out.update({f"head.{n}": p for n, p in head.named_parameters()})
    if optim_state is not None:
        out.update({f"optim.m.{n}": t for n, t in optim_state.m.items()})
        out.update({f"optim.v.{n}": t for n, t in optim_state.v.items()})
    return out


def save_checkpoint(path, model: VisionEncoder, head=None, optim_state=None, *,
                    phase: str = "", epoch: int = 0, seed: int = 0, extra: dict | None = None):
    """Write model (and optionally head / optimizer state) to ``path``."""
    tensors = _named_tensors(model, head, optim_state)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "phase": phase,
        "epoch": epoch,
        "seed": seed,
        "head_kind": head_kind(head),
        "optim_t": optim_state.t if optim_state is not None else None,
        "tensors": {name: list(t.shape) for name, t in tensors.items()},
    }
    if head is not None and hasattr(head, "proj"):
        manifest["head_out"] = head.proj.out_features
    if extra:
        manifest["extra"] = extra
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for name, t in tensors.items():
            data = t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
            zf.writestr(f"tensors/{name}.f32", data)
    return path


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict

    @property
    def config(self) -> ModelConfig:
        return ModelConfig(**self.manifest["config"])

    def restore_model(self) -> VisionEncoder:
        model = VisionEncoder(self.config)
        load_tensors(model, self.tensors, prefix="model.")
        return model

    def restore_head(self):
        kind = self.manifest.get("head_kind")
        if kind is None:
            return None
        kwargs = {}
        if kind == "cls":
            kwargs["num_classes"] = self.manifest.get("head_out", 6)
        head = make_head(kind, self.config, **kwargs)
        load_tensors(head, self.tensors, prefix="head.")
        return head

    def restore_optim_state(self) -> OptimState | None:
        if self.manifest.get("optim_t") is None:
            return None
        state = OptimState(t=self.manifest["optim_t"])
        for name, t in self.tensors.items():
            if name.startswith("optim.m."):
                state.m[name[len("optim.m."):]] = t.clone()
            elif name.startswith("optim.v."):
                state.v[name[len("optim.v."):]] = t.clone()
        return state


def load_checkpoint(path) -> Checkpoint:
    """Read an archive back; every tensor is bit-identical to what was saved."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            version = manifest.get("format_version")
            if version != FORMAT_VERSION:
                raise CheckpointVersionError(
                    f"archive format version {version!r}, this build reads {FORMAT_VERSION}"
                )
            declared = manifest.get("tensors", {})
            tensors = {}
            for info in zf.infolist():
                if not info.filename.startswith("tensors/"):
                    continue
                name = info.filename[len("tensors/"):-len(".f32")]
                if name not in declared:
                    raise UnknownParameterError(f"archive holds undeclared tensor {name!r}")
                raw = zf.read(info)  # CRC checked here
                shape = declared[name]
                arr = np.frombuffer(raw, dtype="<f4")
                if arr.size != int(np.prod(shape, dtype=np.int64)):
                    raise CheckpointIntegrityError(f"tensor {name!r} has {arr.size} values, expected shape {shape}")
                tensors[name] = torch.from_numpy(arr.reshape(shape).copy())
            missing = set(declared) - set(tensors)
            if missing:
                raise CheckpointIntegrityError(f"archive missing tensors: {sorted(missing)[:3]}")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise CheckpointIntegrityError(f"unreadable checkpoint {path}: {e}") from e
    return Checkpoint(manifest=manifest, tensors=tensors)


def load_tensors(module, tensors: dict, prefix: str):
    """Copy archived tensors with the given prefix into ``module``, strictly.

    Raises UnknownParameterError if the archive holds a prefixed path the
    module does not, and CheckpointIntegrityError if the module expects a
    path the archive lacks or a shape disagrees.
    """
    params = dict(module.named_parameters())
    stored = {n[len(prefix):]: t for n, t in tensors.items() if n.startswith(prefix)}
    unknown = set(stored) - set(params)
    if unknown:
        raise UnknownParameterError(f"archive tensor {prefix}{sorted(unknown)[0]} has no matching parameter")
    missing = set(params) - set(stored)
    if missing:
        raise CheckpointIntegrityError(f"archive lacks tensor {prefix}{sorted(missing)[0]}")
    with torch.no_grad():
        for name, p in params.items():
            t = stored[name]
            if tuple(t.shape) != tuple(p.shape):
                raise CheckpointIntegrityError(
                    f"tensor {prefix}{name} has shape {tuple(t.shape)}, parameter wants {tuple(p.shape)}"
                )
            p.copy_(t)
