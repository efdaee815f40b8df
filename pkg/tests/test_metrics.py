import numpy as np
import pytest
from skimage.metrics import structural_similarity

from gsavatar.errors import ContractError
from gsavatar.metrics import psnr, ssim


def test_psnr_known_value():
    a = np.zeros((8, 8, 3))
    b = np.full((8, 8, 3), 0.1)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_identical_is_infinite():
    a = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert np.isinf(psnr(a, a))


def test_psnr_shape_mismatch():
    with pytest.raises(ContractError):
        psnr(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))


def test_ssim_identical_is_one(rng):
    a = rng.uniform(size=(32, 32, 3))
    assert ssim(a, a) == pytest.approx(1.0)


def test_ssim_against_skimage(rng):
    a = rng.uniform(size=(48, 48, 3))
    b = np.clip(a + rng.normal(0, 0.08, size=a.shape), 0, 1)
    got = ssim(a, b)
    want = 0.0
    for ch in range(3):
        full = structural_similarity(
            a[:, :, ch], b[:, :, ch], data_range=1.0,
            gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
        )
        want += full / 3.0
    # implementations crop borders differently; agreement is approximate
    assert got == pytest.approx(want, abs=0.02)


def test_ssim_orders_degradations(rng):
    a = rng.uniform(size=(48, 48, 3))
    slight = np.clip(a + rng.normal(0, 0.02, a.shape), 0, 1)
    heavy = np.clip(a + rng.normal(0, 0.3, a.shape), 0, 1)
    assert ssim(a, slight) > ssim(a, heavy)


def test_ssim_rejects_tiny_images():
    with pytest.raises(ContractError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
