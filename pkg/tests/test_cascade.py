import json
import zipfile

import pytest
import torch

from docsr.cascade import (CHECKPOINT_VERSION, Cascade, CheckpointError,
                           assemble_cascade, load_checkpoint, save_checkpoint,
                           super_resolve)
from docsr.model import DPNetConfig, init_dpnet

from conftest import rand_image


def make_cascade(n_stages, seed0=0, **cfg_kwargs):
    cfg = DPNetConfig(residual_blocks=1, feature_channels=4, **cfg_kwargs)
    return assemble_cascade([init_dpnet(cfg, seed0 + i) for i in range(n_stages)])


class TestAssemble:
    @pytest.mark.parametrize("n,mag", [(1, 2), (2, 4), (3, 8)])
    def test_magnification(self, n, mag):
        assert make_cascade(n).magnification == mag

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            assemble_cascade([])

    def test_channel_mismatch_rejected(self):
        gray = init_dpnet(DPNetConfig(residual_blocks=1, feature_channels=4), 0)
        rgb = init_dpnet(
            DPNetConfig(residual_blocks=1, feature_channels=4, image_channels=3), 0
        )
        with pytest.raises(ValueError, match="channels"):
            assemble_cascade([gray, rgb])


class TestSuperResolve:
    def test_two_stage_shapes(self):
        c = make_cascade(2)
        out = super_resolve(c, rand_image(1, 32, 32, seed=1))
        assert out.shape == (1, 128, 128)

    def test_zero_stages_returns_input(self):
        c = make_cascade(2)
        x = rand_image(1, 8, 8, seed=2)
        assert torch.equal(super_resolve(c, x, 0), x)

    def test_compositionality_exact(self):
        c = make_cascade(3)
        x = rand_image(1, 8, 8, seed=3)
        for k in range(len(c.stages)):
            partial = super_resolve(c, x, k)
            manual = super_resolve(Cascade([c.stages[k]]), partial)
            assert torch.equal(manual, super_resolve(c, x, k + 1))

    @pytest.mark.parametrize("h,w", [(8, 8), (9, 13), (64, 64)])
    @pytest.mark.parametrize("stages", [0, 1, 2])
    def test_output_size_scaling(self, h, w, stages):
        c = make_cascade(2)
        out = super_resolve(c, rand_image(1, h, w, seed=h + w), stages)
        assert out.shape == (1, h * 2**stages, w * 2**stages)

    def test_stages_out_of_range(self):
        c = make_cascade(2)
        with pytest.raises(ValueError, match="stages"):
            super_resolve(c, rand_image(1, 8, 8, seed=0), 3)

    def test_channel_mismatch(self):
        c = make_cascade(1)
        with pytest.raises(ValueError, match="channels"):
            super_resolve(c, torch.rand(3, 8, 8))


class TestCheckpoint:
    def test_round_trip_outputs_identical(self, tmp_path):
        c = make_cascade(2, seed0=10)
        path = tmp_path / "c.ckpt"
        save_checkpoint(c, path)
        loaded = load_checkpoint(path)
        x = rand_image(1, 16, 16, seed=5)
        assert torch.equal(super_resolve(c, x), super_resolve(loaded, x))

    def test_round_trip_parameters_bit_exact(self, tmp_path):
        c = make_cascade(2, seed0=3)
        path = tmp_path / "c.ckpt"
        save_checkpoint(c, path)
        loaded = load_checkpoint(path)
        for orig, back in zip(c.stages, loaded.stages):
            for (ka, va), (kb, vb) in zip(
                orig.state_dict().items(), back.state_dict().items()
            ):
                assert ka == kb
                assert torch.equal(va, vb)

    def test_manifest_reports_magnification(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(make_cascade(2), path)
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
        assert manifest["magnification"] == 4
        assert manifest["version"] == CHECKPOINT_VERSION

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(make_cascade(1), path)
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blobs = {n: zf.read(n) for n in zf.namelist() if n != "manifest.json"}
        manifest["version"] = 999
        bad = tmp_path / "bad.ckpt"
        with zipfile.ZipFile(bad, "w") as zf:
            zf.writestr("manifest.json", json.dumps(manifest))
            for n, b in blobs.items():
                zf.writestr(n, b)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(bad)

    def test_corrupted_blob_rejected(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(make_cascade(1), path)
        with zipfile.ZipFile(path) as zf:
            manifest_raw = zf.read("manifest.json")
            blob_name = [n for n in zf.namelist() if n != "manifest.json"][0]
            blob = bytearray(zf.read(blob_name))
        blob[len(blob) // 2] ^= 0xFF
        bad = tmp_path / "bad.ckpt"
        with zipfile.ZipFile(bad, "w") as zf:
            zf.writestr("manifest.json", manifest_raw)
            zf.writestr(blob_name, bytes(blob))
        with pytest.raises(CheckpointError, match="corrupted"):
            load_checkpoint(bad)

    def test_missing_stage_blob_rejected(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(make_cascade(2), path)
        with zipfile.ZipFile(path) as zf:
            manifest_raw = zf.read("manifest.json")
            first_blob = zf.read("stage_000.pt")
        bad = tmp_path / "bad.ckpt"
        with zipfile.ZipFile(bad, "w") as zf:
            zf.writestr("manifest.json", manifest_raw)
            zf.writestr("stage_000.pt", first_blob)
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(bad)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"not a zip at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_metadata_round_trip(self, tmp_path):
        c = Cascade(make_cascade(1).stages, metadata={"note": "hello", "seed": 3})
        path = tmp_path / "c.ckpt"
        save_checkpoint(c, path)
        assert load_checkpoint(path).metadata == {"note": "hello", "seed": 3}
