import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from anisodiff.metrics import (
    CSV_COLUMNS,
    MetricReport,
    RandomConvFeatures,
    evaluate,
    lpips_efproj,
    lpips_planes,
    mse,
    perceptual_distance,
    psnr,
    report_rows,
    ssim,
    write_csv,
)
from anisodiff.volume import Volume


@pytest.fixture(scope="module")
def fx():
    return RandomConvFeatures()


def test_mse_basics(rng):
    a = rng.standard_normal((3, 4, 5))
    assert mse(a, a) == 0.0
    assert mse(np.zeros((2, 2)), np.ones((2, 2))) == 1.0
    b = rng.standard_normal((3, 4, 5))
    assert mse(a, b) == pytest.approx(sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size, abs=1e-7)


def test_psnr(rng):
    assert psnr(-np.ones(4), np.ones(4)) == pytest.approx(0.0, abs=1e-12)
    assert psnr(np.ones(4), np.ones(4)) == math.inf
    a, b = rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50)
    assert psnr(a, b) == pytest.approx(10 * math.log10(4 / np.mean((a - b) ** 2)), abs=1e-6)


def _ssim_oracle(a, b, data_range=2.0):
    """Direct double loop over 11x11 windows with an explicit Gaussian kernel."""
    x = np.arange(11) - 5
    g1 = np.exp(-(x**2) / (2 * 1.5**2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i : i + 11, j : j + 11], b[i : i + 11, j : j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_matches_window_oracle():
    rng = np.random.default_rng(21)
    for _ in range(16):
        a = rng.uniform(-1, 1, (32, 32))
        b = np.clip(a + rng.normal(0, 0.3, (32, 32)), -1, 1)
        assert ssim(a, b) == pytest.approx(_ssim_oracle(a, b), abs=1e-5)


def test_ssim_matches_skimage(rng):
    a = rng.uniform(-1, 1, (40, 36))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), -1, 1)
    ref = structural_similarity(a, b, data_range=2.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, full=True)[1]
    assert ssim(a, b) == pytest.approx(ref[5:-5, 5:-5].mean(), abs=1e-6)


def test_ssim_identity_and_anticorrelation(rng):
    a = rng.standard_normal((2, 16, 16)) * 0.3
    a -= a.mean()
    assert ssim(a, a) == 1.0
    assert ssim(a, -a) < 1.0


def test_ssim_volume_is_slice_mean(rng):
    a, b = rng.uniform(-1, 1, (3, 12, 12)), rng.uniform(-1, 1, (3, 12, 12))
    assert ssim(a, b) == pytest.approx(np.mean([ssim(a[i], b[i]) for i in range(3)]), abs=1e-12)


def test_ssim_small_slice_rejected():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


# -- perceptual proxy ----------------------------------------------------------------


def test_perceptual_identity_and_symmetry(rng, fx):
    a, b = rng.uniform(-1, 1, (8, 16, 12)), rng.uniform(-1, 1, (8, 16, 12))
    assert lpips_planes(a, a, fx) == (0.0, 0.0, 0.0, 0.0)
    assert lpips_efproj(a, a, fx) == 0.0
    for x, y in zip(lpips_planes(a, b, fx), lpips_planes(b, a, fx)):
        assert x == pytest.approx(y, abs=1e-7)
    assert lpips_efproj(a, b, fx) == pytest.approx(lpips_efproj(b, a, fx), abs=1e-7)


def test_lpips_25d_is_plane_mean(rng, fx):
    a, b = rng.uniform(-1, 1, (8, 16, 12)), rng.uniform(-1, 1, (8, 16, 12))
    axi, cor, sag, avg = lpips_planes(a, b, fx)
    assert abs(avg - (axi + cor + sag) / 3) <= 1e-9


def test_plane_families_respect_orientation(fx):
    # a volume that changes only along y: axial and sagittal planes see the change, coronal ones do not
    y = np.linspace(-1, 1, 16)
    a = np.broadcast_to(y[None, :, None], (16, 16, 16)).copy()
    b = a.copy()
    b[:, 8] = 0.9
    axi, cor, sag, _ = lpips_planes(a, b, fx)
    assert axi > 0 and sag > 0
    per_cor = perceptual_distance(np.transpose(a, (1, 0, 2)), np.transpose(b, (1, 0, 2)), fx)
    assert np.count_nonzero(per_cor) == 1


def test_efproj_ignores_y_permutation(rng, fx):
    a = rng.uniform(-1, 1, (8, 6, 12))
    b = a[:, ::-1, :].copy()
    assert lpips_efproj(Volume(a), Volume(b), fx) == pytest.approx(0.0, abs=1e-12)


def test_features_are_unit_normalised(rng, fx):
    for f in fx.features(rng.uniform(-1, 1, (2, 16, 16))):
        n = np.sqrt((f**2).sum(axis=1))
        assert np.all((np.abs(n - 1) < 1e-5) | (n < 1e-5))


def test_feature_extractor_fixed_seed(rng):
    a, b = rng.uniform(-1, 1, (4, 16, 16)), rng.uniform(-1, 1, (4, 16, 16))
    d1 = perceptual_distance(a, b, RandomConvFeatures(0))
    d2 = perceptual_distance(a, b, RandomConvFeatures(0))
    assert np.array_equal(d1, d2)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_perceptual_non_negative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (3, 12, 12)), rng.uniform(-1, 1, (3, 12, 12))
    assert np.all(perceptual_distance(a, b, RandomConvFeatures()) >= 0)


# -- reports ---------------------------------------------------------------------------


def test_identity_report(rng, fx):
    ref = Volume(rng.uniform(-1, 1, (8, 16, 16)))
    m = evaluate(ref, {"same": ref.copy()}, fx)["same"].mean()
    assert m["mse"] == 0 and m["ssim"] == 1 and m["psnr_db"] == math.inf
    assert all(m[k] == 0 for k in ("lpips_axi", "lpips_cor", "lpips_sag", "lpips_25d", "lpips_efproj"))


def test_population_std():
    rep = MetricReport("m", [dict.fromkeys(CSV_COLUMNS[1:], 0.1), dict.fromkeys(CSV_COLUMNS[1:], 0.3)])
    assert rep.mean()["mse"] == pytest.approx(0.2)
    assert rep.std()["mse"] == pytest.approx(0.1)


def test_csv_layout(tmp_path, rng, fx):
    refs = [Volume(rng.uniform(-1, 1, (8, 16, 16))) for _ in range(2)]
    cands = [Volume(np.clip(r.data + 0.1, -1, 1)) for r in refs]
    reps = evaluate(refs, {"lin": cands}, fx)
    p = tmp_path / "m.csv"
    write_csv(p, reps, per_volume=True)
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert [l.split(",")[0] for l in lines[1:]] == ["lin", "lin:std", "lin:vol0", "lin:vol1"]
    rows = report_rows(reps, per_volume=True)
    assert rows[1][1] == pytest.approx((rows[3][1] + rows[4][1]) / 2)


def test_faint_noise_scores_below_slice_blur(fx):
    # a near-black band must not turn faint noise into a large distance
    from anisodiff.phantom import PhantomSpec, phantom_pair
    from anisodiff.volume import upsample_slices_linear

    hr, lr, _, _ = phantom_pair(PhantomSpec(dims=(48, 48, 32), seed=3))
    noisy = Volume(hr.data + 0.02 * np.random.default_rng(0).standard_normal(hr.data.shape))
    assert lpips_planes(hr, noisy, fx)[3] < lpips_planes(hr, upsample_slices_linear(lr), fx)[3]
