import hashlib
import time

import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from cresunet.dataio import Sample, synthetic_samples
from cresunet.preprocess import (
    NLMParams,
    PreprocessConfig,
    add_speckle,
    augment,
    make_phantom,
    nlm_denoise,
    nlm_weights_at,
    resize_bilinear,
    resize_nearest,
    rotate180,
    to_unit,
)


def mse(a, b):
    return float(np.mean((np.asarray(a, np.float64) - b) ** 2))


class TestResize:
    def test_constant(self):
        out = resize_bilinear(np.full((7, 5), 0.25), 12, 9)
        assert out.shape == (12, 9)
        np.testing.assert_allclose(out, 0.25)

    def test_monotone_columns(self):
        out = resize_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), 4, 4)
        assert np.all(np.diff(out, axis=1) >= 0)
        assert out[0, 0] == 0.0 and out[0, -1] == 1.0

    def test_downscale_mean(self, rng):
        img = rng.random((500, 500))
        out = resize_bilinear(img, 256, 256)
        assert abs(out.mean() - img.mean()) / img.mean() < 0.02

    def test_identity_size(self, rng):
        img = rng.random((6, 8)).astype(np.float32)
        np.testing.assert_allclose(resize_bilinear(img, 6, 8), img, atol=1e-7)

    def test_nearest_keeps_binary(self, rng):
        m = (rng.random((37, 53)) > 0.5).astype(np.uint8)
        out = resize_nearest(m, 64, 64)
        assert set(np.unique(out)) <= {0, 1}

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            resize_bilinear(np.zeros((4, 4)), 0, 4)

    def test_to_unit(self):
        np.testing.assert_allclose(to_unit(np.array([0, 255], np.uint8)), [0.0, 1.0])


class TestNLM:
    def test_constant_unchanged(self):
        img = np.full((32, 32), 0.4, np.float32)
        np.testing.assert_allclose(nlm_denoise(img, patch=5, window=11), img, atol=1e-6)

    def test_phantom_speckle_reduction(self):
        clean = make_phantom(128)
        noisy = add_speckle(clean, 0.2, seed=0)
        t0 = time.perf_counter()
        den = nlm_denoise(noisy)
        assert time.perf_counter() - t0 < 30
        assert mse(den, clean) <= 0.7 * mse(noisy, clean)

    def test_infinite_h_is_box_mean(self, rng):
        img = rng.random((20, 24))
        out = nlm_denoise(img, h=np.inf, patch=3, window=7)
        box = sliding_window_view(np.pad(img, 3, mode="symmetric"), (7, 7)).mean(axis=(-1, -2))
        np.testing.assert_allclose(out, box, atol=1e-3)

    def test_large_h_approaches_box_mean(self, rng):
        img = rng.random((20, 24))
        out = nlm_denoise(img, h=1e3, patch=3, window=7)
        box = sliding_window_view(np.pad(img, 3, mode="symmetric"), (7, 7)).mean(axis=(-1, -2))
        np.testing.assert_allclose(out, box, atol=1e-3)

    def test_weights_normalized_and_peaked_at_center(self, rng):
        img = rng.random((30, 30))
        w = nlm_weights_at(img, 15, 15, h=0.1, patch=5, window=11)
        assert w.shape == (11, 11)
        assert abs(w.sum() - 1.0) < 1e-12
        assert w[5, 5] == w.max()

    def test_weights_reproduce_output(self, rng):
        img = rng.random((25, 25))
        out = nlm_denoise(img, h=0.2, patch=3, window=9)
        w = nlm_weights_at(img, 12, 12, h=0.2, patch=3, window=9)
        value = float((w * img[8:17, 8:17]).sum())
        assert out[12, 12] == pytest.approx(value, abs=1e-6)

    @pytest.mark.parametrize("patch,window", [(4, 9), (5, 8), (9, 7), (3, 41)])
    def test_invalid_geometry(self, patch, window):
        with pytest.raises(ValueError):
            nlm_denoise(np.zeros((32, 32)), patch=patch, window=window)


class TestRotation:
    def test_involution(self, rng):
        x = rng.random((5, 7))
        np.testing.assert_array_equal(rotate180(rotate180(x)), x)

    def test_corner_mapping(self):
        x = np.zeros((4, 6))
        x[0, 0] = 1
        assert rotate180(x)[3, 5] == 1

    def test_augment_doubles_with_lockstep_masks(self):
        samples = synthetic_samples(10, 32, seed=1)
        out = augment(samples, seed=0, config=PreprocessConfig(rotate=True, denoise_variants=False))
        assert len(out) == 20
        rotated = {s.sample_id: s for s in out if s.sample_id.endswith("@rot180")}
        assert len(rotated) == 10
        for s in samples:
            r = rotated[f"{s.sample_id}@rot180"]
            lesion = r.mask > 0
            # the bright lesion in the rotated image sits under the rotated mask
            assert r.image[lesion].mean() > r.image[~lesion].mean() + 0.2
            np.testing.assert_array_equal(r.mask, rotate180(s.mask))

    def test_augment_with_denoised_variants(self):
        samples = synthetic_samples(3, 32, seed=1)
        cfg = PreprocessConfig(rotate=True, denoise_variants=True, nlm=NLMParams(patch=3, window=7))
        out = augment(samples, config=cfg)
        assert len(out) == 12
        assert sum(s.sample_id.endswith("@nlm@rot180") for s in out) == 3

    def test_augment_disabled(self):
        samples = synthetic_samples(4, 32)
        assert augment(samples, config=PreprocessConfig(rotate=False)) == samples

    def test_augment_keeps_dataclass_type(self):
        s = Sample("x", "benign", np.zeros((4, 4), np.float32), np.zeros((4, 4), np.uint8))
        assert all(isinstance(t, Sample) for t in augment([s]))


class TestSpeckle:
    def test_zero_sigma(self, rng):
        img = rng.random((8, 8)).astype(np.float32)
        np.testing.assert_array_equal(add_speckle(img, 0.0, seed=1), img)

    def test_reproducible(self, rng):
        img = rng.random((16, 16))
        digest = lambda a: hashlib.sha256(a.tobytes()).hexdigest()
        assert digest(add_speckle(img, 0.2, 7)) == digest(add_speckle(img, 0.2, 7))
        assert digest(add_speckle(img, 0.2, 7)) != digest(add_speckle(img, 0.2, 8))

    def test_noise_std_on_mid_gray(self):
        out = add_speckle(np.full((200, 200), 0.5), 0.2, seed=3)
        assert abs(out.std() - 0.1) <= 0.01

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            add_speckle(np.zeros((2, 2)), -0.1, 0)
