import hashlib
import warnings

import numpy as np
import pytest
import torch
from PIL import Image

from helpers import quick_bundle, tiny_schedule
from lesionsynth.captions import build_generation_prompt
from lesionsynth.data import class_histogram, load_manifest
from lesionsynth.generate import (
    GenerationConfig,
    GenerationConfigError,
    GenerationIOError,
    ResolutionMismatchWarning,
    batch_generate,
    binarize_mask,
    denormalize_rgb,
    generate_pair,
    split_channels,
)

SEVEN = ("melanoma", "nevus", "bcc", "akiec", "bkl", "df", "vasc")


@pytest.fixture(scope="module")
def bundle():
    return quick_bundle(seed=0)


def _cfg(**kw):
    kw.setdefault("steps", 4)
    kw.setdefault("resolution", 32)
    return GenerationConfig(**kw)


class TestSplit:
    def test_partition_roundtrip(self):
        x = np.random.default_rng(0).standard_normal((4, 5, 6))
        rgb, m = split_channels(x)
        np.testing.assert_array_equal(np.concatenate([rgb, m]), x)
        assert np.shares_memory(rgb, x) and np.shares_memory(m, x)

    def test_single_pixel(self):
        rgb, m = split_channels(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
        assert rgb.ravel().tolist() == [1.0, 2.0, 3.0] and m.ravel().tolist() == [4.0]

    def test_wrong_channels(self):
        with pytest.raises(ValueError):
            split_channels(np.zeros((3, 2, 2)))
        with pytest.raises(ValueError):
            split_channels(torch.zeros(1, 4, 2, 2))


class TestBinarize:
    def test_extremes_and_tie(self):
        assert binarize_mask(np.array([-10.0, 10.0, 0.0])).tolist() == [0, 1, 1]

    def test_matches_sigmoid(self):
        x = np.array([[-2.5, -1e-6, 1e-6], [0.3, -0.3, 7.0]])
        sig = 1.0 / (1.0 + np.exp(-x))
        np.testing.assert_array_equal(binarize_mask(x), (sig >= 0.5).astype(np.uint8))

    def test_denormalize_clamps(self):
        x = np.array([-3.0, -1.0, 0.0, 1.0, 5.0]).reshape(1, 1, 5).repeat(3, 0)
        out = denormalize_rgb(x)
        assert out.dtype == np.uint8 and out.shape == (1, 5, 3)
        assert out[0, :, 0].tolist() == [0, 0, 128, 255, 255]


class TestConfig:
    def test_steps(self):
        with pytest.raises(GenerationConfigError, match="steps must be >= 1"):
            GenerationConfig(steps=0)

    def test_defaults(self):
        c = GenerationConfig()
        assert (c.steps, c.guidance, c.resolution, c.eta) == (45, 1.22, 512, 0.0)

    def test_resolution_divisibility(self, bundle):
        b, ad = bundle
        with pytest.raises(GenerationConfigError):
            generate_pair("x", 0, _cfg(resolution=30), b, tiny_schedule(), ad)

    def test_mismatch_warning(self, bundle):
        b, ad = bundle
        with pytest.warns(ResolutionMismatchWarning):
            _cfg(resolution=64, train_resolution=32).check(b)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            _cfg(train_resolution=32).check(b)


class TestPair:
    def test_deterministic(self, bundle):
        b, ad = bundle
        p = build_generation_prompt("melanoma")
        r1, m1 = generate_pair(p, 5, _cfg(), b, tiny_schedule(), ad)
        r2, m2 = generate_pair(p, 5, _cfg(), b, tiny_schedule(), ad)
        assert np.array_equal(r1, r2) and np.array_equal(m1, m2)
        assert r1.shape == (32, 32, 3) and m1.shape == (32, 32)
        assert set(np.unique(m1)) <= {0, 1}

    def test_seeds_differ(self, bundle):
        b, ad = bundle
        p = build_generation_prompt("melanoma")
        r1, _ = generate_pair(p, 1, _cfg(), b, tiny_schedule(), ad)
        r2, _ = generate_pair(p, 2, _cfg(), b, tiny_schedule(), ad)
        assert (r1 != r2).any()

    def test_empty_prompt(self, bundle):
        b, ad = bundle
        with pytest.raises(ValueError):
            generate_pair(" ", 0, _cfg(), b, tiny_schedule(), ad)

    def test_uninflated_rejected(self):
        from lesionsynth.backbone import build_tiny_backbone

        with pytest.raises(GenerationConfigError):
            generate_pair("x", 0, _cfg(), build_tiny_backbone(surgery=False), tiny_schedule())


def _digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*.png"))}


class TestBatch:
    def test_empty(self, bundle, tmp_path):
        b, ad = bundle
        m = batch_generate({"melanoma": 0, "nevus": 0}, _cfg(out=tmp_path), b, tiny_schedule(), ad)
        assert len(m) == 0

    def test_count_contract_and_roundtrip(self, bundle, tmp_path):
        b, ad = bundle
        m = batch_generate({"melanoma": 3}, _cfg(out=tmp_path, seed=10), b, tiny_schedule(), ad)
        assert len(m) == 3
        assert len(list((tmp_path / "images").glob("*.png"))) == 3
        assert len(list((tmp_path / "masks").glob("*_mask.png"))) == 3
        assert (tmp_path / "images" / "melanoma_10_0.png").is_file()
        assert (tmp_path / "masks" / "melanoma_12_2_mask.png").is_file()
        again = load_manifest(tmp_path / "manifest.json")
        assert [r.category for r in again.records] == ["melanoma"] * 3
        assert all(r.source == "synthetic" and r.caption == build_generation_prompt("melanoma") for r in again.records)
        for r in again.records:
            mask = np.asarray(Image.open(again.root / r.mask))
            assert set(np.unique(mask)) <= {0, 255}

    def test_byte_identical(self, bundle, tmp_path):
        b, ad = bundle
        batch_generate({"nevus": 2}, _cfg(out=tmp_path / "a"), b, tiny_schedule(), ad)
        batch_generate({"nevus": 2}, _cfg(out=tmp_path / "b"), b, tiny_schedule(), ad)
        da, db = _digest(tmp_path / "a"), _digest(tmp_path / "b")
        assert da == db and len(da) == 4

    def test_balanced_histogram(self, bundle, tmp_path):
        b, ad = bundle
        m = batch_generate({c: 1 for c in SEVEN}, _cfg(out=tmp_path, steps=1), b, tiny_schedule(), ad, label_set=SEVEN)
        assert len(set(class_histogram(m).values())) == 1

    def test_negative_count(self, bundle, tmp_path):
        b, ad = bundle
        with pytest.raises(ValueError):
            batch_generate({"melanoma": -1}, _cfg(out=tmp_path), b, tiny_schedule(), ad)

    def test_io_failure_writes_recovery(self, bundle, tmp_path, monkeypatch):
        b, ad = bundle
        import lesionsynth.generate as gen

        real = gen.save_mask_png
        calls = []

        def flaky(mask, path):
            calls.append(path)
            if len(calls) == 2:
                raise OSError("disk full")
            real(mask, path)

        monkeypatch.setattr(gen, "save_mask_png", flaky)
        with pytest.raises(GenerationIOError) as exc:
            batch_generate({"melanoma": 3}, _cfg(out=tmp_path, steps=1), b, tiny_schedule(), ad)
        rec = exc.value.recovery_path
        assert rec is not None and rec.is_file()
        partial = load_manifest(rec)
        assert len(partial) == 1
