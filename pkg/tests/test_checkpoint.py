import json
import zipfile

import numpy as np
import pytest
import torch

from stagedvit import (
    ClsHead,
    ReconHead,
    SegHead,
    VisionEncoder,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
    synth_generate,
    train_phase,
)
from stagedvit.checkpoint import head_kind, load_tensors, make_head
from stagedvit.errors import (
    CheckpointIntegrityError,
    CheckpointVersionError,
    UnknownParameterError,
)
from stagedvit.optim import OptimState, default_phase_config, PhaseConfig


def fresh(tiny_config, head_cls=ReconHead, seed=0, **kw):
    gen = torch.Generator().manual_seed(seed)
    return VisionEncoder(tiny_config, generator=gen), head_cls(tiny_config, generator=gen, **kw)


def test_round_trip_bit_exact(tiny_config, tmp_path):
    model, head = fresh(tiny_config, seed=5)
    path = save_checkpoint(tmp_path / "ck.zip", model, head, phase="pretrain", epoch=7, seed=123)
    ck = load_checkpoint(path)
    assert ck.manifest["phase"] == "pretrain"
    assert ck.manifest["epoch"] == 7
    assert ck.manifest["seed"] == 123
    assert ck.manifest["head_kind"] == "recon"
    assert ck.config == tiny_config

    restored = ck.restore_model()
    for (name, p), q in zip(model.named_parameters(), restored.parameters()):
        assert torch.equal(p, q), name
    rhead = ck.restore_head()
    assert isinstance(rhead, ReconHead)
    for p, q in zip(head.parameters(), rhead.parameters()):
        assert torch.equal(p, q)


def test_round_trip_with_optimizer_state(tiny_config, tmp_path):
    """Train a couple of steps so moments are non-trivial, then round-trip."""
    model, head = fresh(tiny_config, seed=1)
    data = synth_generate("unlabeled", 4, seed=3, size=tiny_config.image_size)
    base = default_phase_config("pretrain")
    phase = PhaseConfig("pretrain", 2, base.optim, base.schedule, batch_size=4)
    train_phase(model, head, data, phase, seed=0)

    # rebuild the optimizer state by one more manual step so we own it
    from stagedvit.optim import adamw_step, named_training_params
    from stagedvit.backbone import gradients, patchify
    from stagedvit.objectives import mim_loss, sample_mask, stack_masks

    params = named_training_params(model, head)
    state = OptimState()
    images = torch.from_numpy(np.stack([s.image for s in data]))
    masks = stack_masks([sample_mask(np.random.default_rng(0), model.config.num_patches, 0.5)
                         for _ in range(4)])
    loss = mim_loss(head(model.encode_masked(images, masks, head.mask_token)),
                    patchify(images, model.config.patch_size), masks)
    adamw_step(params, gradients(loss, params.items()), state, base.optim, lr=1e-4)

    path = save_checkpoint(tmp_path / "ck.zip", model, head, state, phase="pretrain", epoch=2, seed=0)
    ck = load_checkpoint(path)
    assert ck.manifest["optim_t"] == 1
    back = ck.restore_optim_state()
    assert back.t == state.t
    assert set(back.m) == set(state.m) and set(back.v) == set(state.v)
    for name in state.m:
        assert torch.equal(back.m[name], state.m[name]), name
        assert torch.equal(back.v[name], state.v[name]), name


def test_restore_without_optim_state_is_none(tiny_config, tmp_path):
    model, head = fresh(tiny_config)
    ck = load_checkpoint(save_checkpoint(tmp_path / "ck.zip", model, head))
    assert ck.restore_optim_state() is None


def test_head_swap_after_restore(tiny_config, tmp_path):
    """Pretrained backbone weights carry over; a new head starts fresh."""
    model, recon = fresh(tiny_config, seed=2)
    path = save_checkpoint(tmp_path / "pre.zip", model, recon, phase="pretrain")
    backbone = load_checkpoint(path).restore_model()
    seg = SegHead(tiny_config)
    assert count_parameters(backbone) + count_parameters(seg) != count_parameters(backbone) + count_parameters(recon)
    for p, q in zip(model.parameters(), backbone.parameters()):
        assert torch.equal(p, q)


def test_headless_checkpoint(tiny_config, tmp_path):
    model, _ = fresh(tiny_config)
    ck = load_checkpoint(save_checkpoint(tmp_path / "ck.zip", model))
    assert ck.manifest["head_kind"] is None
    assert ck.restore_head() is None


def test_cls_head_restores_output_width(tiny_config, tmp_path):
    model, head = fresh(tiny_config, ClsHead, num_classes=2)
    ck = load_checkpoint(save_checkpoint(tmp_path / "ck.zip", model, head))
    restored = ck.restore_head()
    assert isinstance(restored, ClsHead)
    assert restored.proj.out_features == 2


def test_extra_metadata_round_trips(tiny_config, tmp_path):
    model, _ = fresh(tiny_config)
    path = save_checkpoint(tmp_path / "ck.zip", model, extra={"cell": "p0-noint-f100-r0"})
    assert load_checkpoint(path).manifest["extra"] == {"cell": "p0-noint-f100-r0"}


def test_corrupt_tensor_rejected(tiny_config, tmp_path):
    model, head = fresh(tiny_config)
    path = save_checkpoint(tmp_path / "ck.zip", model, head)
    with zipfile.ZipFile(path) as zf:
        manifest = zf.read("manifest.json")
        blobs = {i.filename: zf.read(i) for i in zf.infolist() if i.filename != "manifest.json"}
    victim = sorted(blobs)[0]
    blobs[victim] = blobs[victim][:-4]  # truncate one tensor
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", manifest)
        for name, data in blobs.items():
            zf.writestr(name, data)
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)


def test_wrong_format_version_rejected(tiny_config, tmp_path):
    model, _ = fresh(tiny_config)
    path = save_checkpoint(tmp_path / "ck.zip", model)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        blobs = {i.filename: zf.read(i) for i in zf.infolist() if i.filename != "manifest.json"}
    manifest["format_version"] = 99
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest))
        for name, data in blobs.items():
            zf.writestr(name, data)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_undeclared_tensor_rejected(tiny_config, tmp_path):
    model, _ = fresh(tiny_config)
    path = save_checkpoint(tmp_path / "ck.zip", model)
    with zipfile.ZipFile(path, "a") as zf:
        zf.writestr("tensors/model.smuggled.f32", b"\x00" * 16)
    with pytest.raises(UnknownParameterError):
        load_checkpoint(path)


def test_not_a_zip_rejected(tmp_path):
    path = tmp_path / "junk.zip"
    path.write_bytes(b"this is not an archive")
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)


def test_load_tensors_strictness(tiny_config, tmp_path):
    model, head = fresh(tiny_config)
    ck = load_checkpoint(save_checkpoint(tmp_path / "ck.zip", model, head))

    # archive path with no matching parameter
    with pytest.raises(UnknownParameterError):
        load_tensors(head, {"head.bogus": torch.zeros(3)}, prefix="head.")
    # module parameter the archive lacks
    partial = {k: v for k, v in ck.tensors.items() if k != "model.pos_embed"}
    with pytest.raises(CheckpointIntegrityError):
        load_tensors(VisionEncoder(tiny_config), partial, prefix="model.")
    # matching name, wrong shape
    bad = dict(ck.tensors)
    bad["model.pos_embed"] = torch.zeros(1, 1)
    with pytest.raises(CheckpointIntegrityError):
        load_tensors(VisionEncoder(tiny_config), bad, prefix="model.")


def test_make_head_and_head_kind(tiny_config):
    assert head_kind(ReconHead(tiny_config)) == "recon"
    assert head_kind(ClsHead(tiny_config)) == "cls"
    assert head_kind(SegHead(tiny_config)) == "seg"
    assert head_kind(None) is None
    assert isinstance(make_head("seg", tiny_config), SegHead)
    with pytest.raises(ValueError):
        make_head("pool", tiny_config)
