import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from docsr.data import (DatasetManifest, bicubic_downsample, bicubic_upsample,
                        build_manifest, downsample_by, extract_patches,
                        generate_synthetic_corpus, load_image, make_pyramid,
                        manifest_from_directory, quantize_to_uint8,
                        render_synthetic_patch, save_image, split_roles,
                        upsample_by)

from conftest import rand_image


# --- independent reference resampler (direct per-pixel summation) ----------

def _ref_keys(x, a=-0.5):
    x = abs(x)
    if x <= 1.0:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2.0:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def _ref_reflect(i, n):
    if n == 1:
        return 0
    period = 2 * n - 2
    i %= period
    return i if i < n else period - i


def ref_downsample(img: np.ndarray) -> np.ndarray:
    c_n, h, w = img.shape
    out = np.zeros((c_n, h // 2, w // 2))
    for c in range(c_n):
        for oy in range(h // 2):
            for ox in range(w // 2):
                cy, cx = 2 * oy + 1, 2 * ox + 1
                acc = wsum = 0.0
                for iy in range(2 * oy - 5, 2 * oy + 7):
                    wy = _ref_keys((iy + 0.5 - cy) / 2) / 2
                    if wy == 0.0:
                        continue
                    for ix in range(2 * ox - 5, 2 * ox + 7):
                        wx = _ref_keys((ix + 0.5 - cx) / 2) / 2
                        if wx == 0.0:
                            continue
                        acc += wy * wx * img[c, _ref_reflect(iy, h), _ref_reflect(ix, w)]
                        wsum += wy * wx
                out[c, oy, ox] = acc / wsum
    return np.clip(out, 0.0, 1.0)


def ref_upsample(img: np.ndarray) -> np.ndarray:
    c_n, h, w = img.shape
    out = np.zeros((c_n, 2 * h, 2 * w))
    for c in range(c_n):
        for oy in range(2 * h):
            for ox in range(2 * w):
                cy, cx = (oy + 0.5) / 2, (ox + 0.5) / 2
                acc = wsum = 0.0
                for iy in range(math.floor(cy) - 3, math.floor(cy) + 4):
                    wy = _ref_keys(iy + 0.5 - cy)
                    if wy == 0.0:
                        continue
                    for ix in range(math.floor(cx) - 3, math.floor(cx) + 4):
                        wx = _ref_keys(ix + 0.5 - cx)
                        if wx == 0.0:
                            continue
                        acc += wy * wx * img[c, _ref_reflect(iy, h), _ref_reflect(ix, w)]
                        wsum += wy * wx
                out[c, oy, ox] = acc / wsum
    return np.clip(out, 0.0, 1.0)


class TestBicubicDownsample:
    def test_constant_images_preserved(self):
        gen = torch.Generator().manual_seed(0)
        for v in torch.rand(50, generator=gen).tolist():
            out = bicubic_downsample(torch.full((1, 16, 16), v))
            assert torch.allclose(out, torch.full((1, 8, 8), v), atol=1e-6)

    def test_shape_320_to_160(self):
        assert bicubic_downsample(torch.rand(1, 320, 320)).shape == (1, 160, 160)

    def test_odd_dimensions_rejected(self):
        with pytest.raises(ValueError, match="even"):
            bicubic_downsample(torch.rand(1, 15, 16))

    def test_matches_reference_resampler(self):
        img = rand_image(2, 14, 18, seed=1)
        mine = bicubic_downsample(img).numpy()
        ref = ref_downsample(img.numpy().astype(np.float64))
        assert np.abs(mine - ref).max() < 1e-4

    def test_matches_pil_on_interior(self):
        # PIL handles borders differently, so compare away from them; input
        # stays off the clamp range since PIL floats are unclamped.
        img = rand_image(1, 32, 48, seed=2) * 0.5 + 0.25
        mine = bicubic_downsample(img)[0].numpy()
        pil = Image.fromarray(img[0].numpy(), mode="F").resize((24, 16), Image.BICUBIC)
        ref = np.asarray(pil, dtype=np.float32)
        assert np.abs(mine[3:-3, 3:-3] - ref[3:-3, 3:-3]).max() < 1e-4

    def test_only_factor_two(self):
        with pytest.raises(ValueError, match="factor 2"):
            bicubic_downsample(torch.rand(1, 8, 8), factor=4)


class TestBicubicUpsample:
    def test_constant_preserved(self):
        out = bicubic_upsample(torch.full((1, 8, 8), 0.37))
        assert torch.allclose(out, torch.full((1, 16, 16), 0.37), atol=1e-6)

    def test_matches_reference_resampler(self):
        img = rand_image(1, 9, 7, seed=3)
        mine = bicubic_upsample(img).numpy()
        ref = ref_upsample(img.numpy().astype(np.float64))
        assert np.abs(mine - ref).max() < 1e-4

    def test_matches_pil_on_interior(self):
        img = rand_image(1, 16, 16, seed=4) * 0.5 + 0.25
        mine = bicubic_upsample(img)[0].numpy()
        pil = Image.fromarray(img[0].numpy(), mode="F").resize((32, 32), Image.BICUBIC)
        ref = np.asarray(pil, dtype=np.float32)
        assert np.abs(mine[4:-4, 4:-4] - ref[4:-4, 4:-4]).max() < 1e-4

    def test_power_helpers(self):
        img = rand_image(1, 16, 16, seed=5)
        assert downsample_by(img, 4).shape == (1, 4, 4)
        assert upsample_by(img, 4).shape == (1, 64, 64)
        assert torch.equal(downsample_by(img, 1), img)
        with pytest.raises(ValueError, match="power of 2"):
            downsample_by(img, 3)


class TestMakePyramid:
    def test_level_sizes(self):
        pair = make_pyramid(rand_image(1, 128, 128, seed=6), levels=2)
        assert pair.pyramid[0].shape == (1, 64, 64)
        assert pair.pyramid[1].shape == (1, 32, 32)
        assert pair.level(0).shape == (1, 128, 128)

    def test_zero_levels(self):
        hr = rand_image(1, 16, 16, seed=7)
        pair = make_pyramid(hr, levels=0)
        assert pair.pyramid == []
        assert torch.equal(pair.hr, hr)

    def test_levels_rebuild_exactly_from_parent(self):
        pair = make_pyramid(rand_image(1, 64, 64, seed=8), levels=3)
        assert torch.equal(pair.pyramid[1], bicubic_downsample(pair.pyramid[0]))
        assert torch.equal(pair.pyramid[2], bicubic_downsample(pair.pyramid[1]))
        assert torch.equal(pair.pyramid[0], bicubic_downsample(pair.hr))

    def test_divisibility_enforced(self):
        with pytest.raises(ValueError, match="divisible"):
            make_pyramid(rand_image(1, 36, 36, seed=9), levels=3)

    def test_level_out_of_range(self):
        pair = make_pyramid(rand_image(1, 16, 16, seed=10), levels=1)
        with pytest.raises(ValueError):
            pair.level(2)

    def test_degrade_hook_applies_after_downsampling(self):
        hr = rand_image(1, 16, 16, seed=11)
        plain = make_pyramid(hr, levels=1)
        darker = make_pyramid(hr, levels=1, degrade=lambda img: img * 0.5)
        assert torch.allclose(darker.pyramid[0], plain.pyramid[0] * 0.5)
        assert torch.equal(darker.hr, plain.hr)


class TestExtractPatches:
    def test_patch_count_and_size(self):
        page = rand_image(1, 400, 400, seed=11)
        patches = extract_patches(page, size=320, count=3, seed=0)
        assert len(patches) == 3
        assert all(p.shape == (1, 320, 320) for p in patches)

    def test_exact_fit_page(self):
        page = rand_image(1, 320, 320, seed=12)
        for p in extract_patches(page, size=320, count=4, seed=1):
            assert torch.equal(p, page)

    def test_same_seed_same_offsets(self):
        page = rand_image(1, 100, 100, seed=13)
        a = extract_patches(page, 32, 5, seed=9)
        b = extract_patches(page, 32, 5, seed=9)
        for pa, pb in zip(a, b):
            assert torch.equal(pa, pb)

    def test_too_small_page(self):
        with pytest.raises(ValueError, match="smaller"):
            extract_patches(rand_image(1, 100, 100, seed=14), size=128, count=1, seed=0)

    @settings(max_examples=15, deadline=None)
    @given(
        ph=st.integers(20, 60), pw=st.integers(20, 60),
        size=st.integers(8, 20), seed=st.integers(0, 1000),
    )
    def test_patches_always_inside_bounds(self, ph, pw, size, seed):
        page = torch.arange(ph * pw, dtype=torch.float32).reshape(1, ph, pw) / (ph * pw)
        for p in extract_patches(page, size, 4, seed):
            assert p.shape == (1, size, size)
            # every patch value exists in the page: crops never pad
            assert float(p.max()) <= float(page.max())


class TestRenderSyntheticPatch:
    def test_empty_text_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            render_synthetic_patch("   ", 12, 128, seed=0)

    def test_ink_and_background_present(self):
        img, text = render_synthetic_patch("The quick brown fox", 12, 128, seed=0)
        assert img.shape == (1, 128, 128)
        assert float(img.min()) < 0.5      # ink
        assert float(img.max()) > 0.9      # background
        assert text == "The quick brown fox"

    def test_deterministic_per_seed(self):
        a, _ = render_synthetic_patch("alpha\nbeta", 12, 64, seed=5)
        b, _ = render_synthetic_patch("alpha\nbeta", 12, 64, seed=5)
        assert torch.equal(a, b)
        c, _ = render_synthetic_patch("alpha\nbeta", 12, 64, seed=6)
        assert not torch.equal(a, c)

    def test_oversized_text_rejected(self):
        with pytest.raises(ValueError, match="does not fit"):
            render_synthetic_patch("a very long line that cannot fit", 40, 64, seed=0)

    def test_canvas_divisibility(self):
        with pytest.raises(ValueError, match="divisible by 4"):
            render_synthetic_patch("hi", 10, 66, seed=0)


class TestSplitsAndManifests:
    def test_default_split_counts(self):
        roles = split_roles(100, (0.8, 0.1, 0.1), seed=0)
        assert roles.count("train") == 80
        assert roles.count("val") == 10
        assert roles.count("test") == 10

    def test_all_train_fractions(self):
        assert set(split_roles(20, (1.0, 0.0, 0.0), seed=1)) == {"train"}

    def test_same_seed_same_membership(self):
        assert split_roles(50, (0.8, 0.1, 0.1), 7) == split_roles(50, (0.8, 0.1, 0.1), 7)

    def test_bad_fractions(self):
        with pytest.raises(ValueError, match="sum to 1"):
            split_roles(20, (0.5, 0.1, 0.1), seed=0)

    def test_too_few_items(self):
        with pytest.raises(ValueError, match="at least 10"):
            split_roles(5, (0.8, 0.1, 0.1), seed=0)

    @settings(max_examples=20, deadline=None)
    @given(n=st.integers(10, 300), seed=st.integers(0, 1000))
    def test_splits_partition_items(self, n, seed):
        roles = split_roles(n, (0.8, 0.1, 0.1), seed)
        assert len(roles) == n
        assert all(r in ("train", "val", "test") for r in roles)

    def test_manifest_round_trip(self, tmp_path):
        manifest = generate_synthetic_corpus(tmp_path, count=12, canvas=64, seed=3,
                                             pyramid_depth=2)
        loaded = DatasetManifest.load(tmp_path / "manifest.jsonl")
        assert loaded.pyramid_depth == 2
        assert loaded.patch_size == 64
        assert [e.path for e in loaded.entries] == [e.path for e in manifest.entries]
        assert [e.role for e in loaded.entries] == [e.role for e in manifest.entries]
        assert all(e.label for e in loaded.entries)
        assert all(e.sha256 for e in loaded.entries)

    def test_manifest_missing_file_rejected(self, tmp_path):
        generate_synthetic_corpus(tmp_path, count=12, canvas=64, seed=3)
        (tmp_path / "patch_00000.png").unlink()
        with pytest.raises(FileNotFoundError, match="missing"):
            DatasetManifest.load(tmp_path / "manifest.jsonl")

    def test_manifest_from_directory_with_labels(self, tmp_path):
        for i in range(10):
            save_image(rand_image(1, 16, 16, seed=i), tmp_path / f"img_{i}.png")
            (tmp_path / f"img_{i}.txt").write_text(f"label {i}", encoding="utf-8")
        manifest = manifest_from_directory(tmp_path, seed=0)
        assert len(manifest.entries) == 10
        assert manifest.patch_size == 16
        assert sorted(e.label for e in manifest.entries) == sorted(
            f"label {i}" for i in range(10)
        )

    def test_build_manifest_roles_partition(self):
        items = [(f"p{i}.png", None, None) for i in range(40)]
        manifest = build_manifest(items, seed=2)
        by_role = {r: len(manifest.role_entries(r)) for r in ("train", "val", "test")}
        assert sum(by_role.values()) == 40
        assert by_role["train"] == 32


class TestImageIo:
    def test_quantization_rounds_half_up(self):
        img = torch.tensor([[[0.0, 0.5 / 255.0, 127.5 / 255.0, 1.0]]])
        assert quantize_to_uint8(img).flatten().tolist() == [0, 1, 128, 255]

    def test_png_round_trip_is_quantization(self, tmp_path):
        img = rand_image(1, 12, 12, seed=20)
        save_image(img, tmp_path / "x.png")
        back = load_image(tmp_path / "x.png")
        expected = torch.from_numpy(quantize_to_uint8(img).astype(np.float32) / 255.0)
        assert torch.equal(back, expected)

    def test_rgb_round_trip(self, tmp_path):
        img = rand_image(3, 8, 8, seed=21)
        save_image(img, tmp_path / "x.png")
        assert load_image(tmp_path / "x.png").shape == (3, 8, 8)

    def test_save_rejects_out_of_range(self, tmp_path):
        with pytest.raises(ValueError):
            save_image(torch.full((1, 4, 4), 1.2), tmp_path / "bad.png")
