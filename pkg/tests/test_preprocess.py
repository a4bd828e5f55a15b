import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dvnet.preprocess import (
    FreqImage,
    ParameterError,
    PGMError,
    PipelineError,
    PipelineParams,
    binarize_otsu,
    butterworth_gain,
    butterworth_lowpass,
    decode_pgm,
    dft2_reference,
    dilate,
    disk,
    encode_pgm,
    equalization_lut,
    erode,
    fft2_forward,
    fft2_inverse,
    fft2_inverse_real,
    histogram_equalize,
    median_filter,
    morph_open_close,
    otsu_threshold,
    read_pgm,
    roi_pipeline,
    write_pgm,
)
from dvnet.synthdata import generate_dataset


def random_image(shape, seed):
    return np.random.default_rng(seed).integers(0, 256, size=shape, dtype=np.uint8)


def exhaustive_otsu(img):
    """Float between-class variance at every threshold, lowest argmax."""
    v = img.astype(np.float64).ravel()
    best, best_t = -1.0, 255
    for t in range(256):
        lo, hi = v[v <= t], v[v > t]
        if lo.size == 0 or hi.size == 0:
            continue
        score = lo.size * hi.size * (lo.mean() - hi.mean()) ** 2
        if score > best * (1 + 1e-12):
            best, best_t = score, t
    return best_t


def median_oracle(img, r):
    h, w = img.shape
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            vals = sorted(int(img[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)])
                          for dy in range(-r, r + 1) for dx in range(-r, r + 1))
            out[y, x] = vals[len(vals) // 2]
    return out


class TestMedianFilter:
    def test_constant_unchanged(self):
        img = np.full((6, 7), 93, np.uint8)
        np.testing.assert_array_equal(median_filter(img, 1), img)

    def test_single_bright_pixel_removed(self):
        img = np.zeros((5, 5), np.uint8)
        img[2, 2] = 255
        assert median_filter(img, 1)[2, 2] == 0
        assert not median_filter(img, 1).any()

    def test_matches_sort_oracle(self):
        img = random_image((9, 11), 3)
        for r in (1, 2):
            np.testing.assert_array_equal(median_filter(img, r), median_oracle(img, r))

    def test_salt_noise_twice_equals_once(self):
        rng = np.random.default_rng(7)
        img = np.full((24, 24), 80, np.uint8)
        img[rng.random(img.shape) < 0.05] = 255
        once = median_filter(img, 1)
        np.testing.assert_array_equal(median_filter(once, 1), once)
        np.testing.assert_array_equal(once, median_oracle(img, 1))

    def test_radius_below_one(self):
        with pytest.raises(ParameterError):
            median_filter(np.zeros((3, 3), np.uint8), 0)


class TestHistogramEqualization:
    def test_constant_maps_to_255(self):
        np.testing.assert_array_equal(histogram_equalize(np.full((4, 4), 17, np.uint8)), 255)

    def test_two_level_image(self):
        img = np.zeros((4, 4), np.uint8)
        img[:, 2:] = 255
        out = histogram_equalize(img)
        assert set(np.unique(out[:, :2])) <= {127, 128}
        assert np.all(out[:, 2:] == 255)

    def test_ramp_histogram_uniform(self):
        ramp = np.tile((np.arange(64) * 4).astype(np.uint8), (64, 1))
        counts = np.bincount(histogram_equalize(ramp).ravel(), minlength=256)
        occupied = counts[counts > 0]
        assert occupied.size == 64
        assert occupied.max() - occupied.min() <= 1

    def test_full_ramp_within_one_count(self):
        ramp = np.arange(256, dtype=np.uint8).reshape(16, 16)
        counts = np.bincount(histogram_equalize(ramp).ravel(), minlength=256)[1:]
        assert np.abs(counts - 256 / 255).max() <= 1

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 40))
    def test_lut_monotone(self, seed, h, w):
        rng = np.random.default_rng(seed)
        img = rng.integers(rng.integers(0, 200), 256, size=(h, w), dtype=np.uint8)
        lut = equalization_lut(img)
        assert lut.shape == (256,)
        assert np.all(np.diff(lut.astype(int)) >= 0)


class TestFFT:
    def test_constant_image_spectrum(self):
        f = fft2_forward(np.full((6, 10), 3, np.uint8))
        assert abs(f.dc - 3 * 60) <= 1e-9
        rest = f.coeffs.copy()
        rest[3, 5] = 0
        assert np.abs(rest).max() <= 1e-9

    def test_dc_is_pixel_sum(self):
        img = random_image((12, 20), 1)
        assert abs(fft2_forward(img).dc - img.sum()) <= 1e-8

    @pytest.mark.parametrize("shape", [(8, 8), (5, 7), (64, 64), (30, 48)])
    def test_round_trip(self, shape):
        img = random_image(shape, shape[0] * 100 + shape[1])
        assert np.abs(fft2_inverse_real(fft2_forward(img)) - img).max() < 1e-9
        np.testing.assert_array_equal(fft2_inverse(fft2_forward(img)), img)

    @pytest.mark.parametrize("shape", [(8, 8), (6, 5)])
    def test_matches_direct_dft(self, shape):
        img = random_image(shape, 11).astype(np.float64)
        centered = fft2_forward(img).coeffs
        direct = np.roll(dft2_reference(img), (shape[0] // 2, shape[1] // 2), axis=(0, 1))
        assert np.abs(centered - direct).max() <= 1e-9

    def test_cosine_has_two_symmetric_bins(self):
        y, x = np.mgrid[0:8, 0:8]
        img = 100 + 50 * np.cos(2 * np.pi * (2 * x + 1 * y) / 8)
        coeffs = fft2_forward(img).coeffs.copy()
        coeffs[4, 4] -= 100 * 64
        nonzero = np.argwhere(np.abs(coeffs) > 1e-9)
        assert len(nonzero) == 2
        (a, b), (c, d) = nonzero - 4
        assert (a, b) == (-c, -d)
        assert np.abs(coeffs[np.abs(coeffs) > 1e-9] - 50 * 32).max() <= 1e-9


class TestButterworth:
    def test_dc_gain_one(self):
        assert butterworth_gain(0.0, 5.0, 2) == 1.0

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 7])
    def test_half_gain_at_cutoff(self, n):
        assert abs(butterworth_gain(6.5, 6.5, n) - 0.5) <= 1e-12

    def test_sharpens_with_order(self):
        g1 = butterworth_gain([0.9, 1.1], 1.0, 1)
        g8 = butterworth_gain([0.9, 1.1], 1.0, 8)
        assert g8[0] > g1[0] and g8[1] < g1[1]

    def test_radially_nonincreasing(self):
        d = np.linspace(0, 50, 2001)
        for n in (1, 2, 5):
            assert np.all(np.diff(butterworth_gain(d, 7.0, n)) <= 0)

    def test_bad_parameters(self):
        with pytest.raises(ParameterError):
            butterworth_gain(1.0, 0.0, 2)
        with pytest.raises(ParameterError):
            butterworth_gain(1.0, 1.0, 0)

    def test_filter_keeps_dc_and_damps_high_frequencies(self):
        img = random_image((16, 16), 5)
        f = fft2_forward(img)
        g = butterworth_lowpass(f, 4.0, 2)
        assert isinstance(g, FreqImage)
        assert g.dc == f.dc
        assert abs(g.coeffs[0, 0]) <= abs(f.coeffs[0, 0]) * butterworth_gain(np.hypot(8, 8), 4.0, 2) + 1e-9


class TestMorphology:
    def test_disk_radius_one_is_cross(self):
        assert sorted(disk(1)) == [(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)]

    def test_isolated_pixel_removed(self):
        m = np.zeros((9, 9), np.uint8)
        m[4, 4] = 1
        assert not morph_open_close(m, 1).any()

    def test_hole_filled(self):
        m = np.zeros((16, 16), np.uint8)
        m[3:13, 3:13] = 1
        m[7, 7] = 0
        out = morph_open_close(m, 1)
        assert out[7, 7] == 1
        # opening with the cross rounds off the four corners only
        np.testing.assert_array_equal(out[4:12, 3:13], 1)
        assert out[3:13, 3:13].sum() == 96

    def test_erode_dilate_duality(self):
        img = random_image((12, 12), 9)
        np.testing.assert_array_equal(255 - erode(img, 2), dilate(255 - img, 2))

    def test_idempotent_on_random_masks(self):
        for seed in range(100):
            m = (np.random.default_rng(seed).random((24, 24)) < 0.4).astype(np.uint8)
            once = morph_open_close(m, 1)
            np.testing.assert_array_equal(morph_open_close(once, 1), once)

    def test_range_preserved(self):
        img = random_image((10, 10), 2)
        out = morph_open_close(img, 2)
        assert out.dtype == np.uint8 and img.min() <= out.min() and out.max() <= img.max()


class TestOtsu:
    def test_bimodal_split(self):
        img = np.full((8, 8), 10, np.uint8)
        img[:, 4:] = 200
        t = otsu_threshold(img)
        assert t == exhaustive_otsu(img)
        assert 10 <= t < 200
        np.testing.assert_array_equal(binarize_otsu(img), (img == 200).astype(np.uint8))

    def test_constant_all_zero(self):
        assert not binarize_otsu(np.full((5, 5), 77, np.uint8)).any()

    def test_matches_exhaustive_scan(self):
        for seed in range(40):
            rng = np.random.default_rng(seed)
            img = rng.integers(0, rng.integers(2, 256), size=(rng.integers(2, 20), 13), dtype=np.uint8)
            assert otsu_threshold(img) == exhaustive_otsu(img), seed

    def test_inversion_inverts_mask(self):
        for seed in range(20):
            img = random_image((16, 16), 50 + seed)
            m, mi = binarize_otsu(img), binarize_otsu(255 - img)
            t = otsu_threshold(img)
            differs = m == mi
            # only the bin sitting on the inverted threshold may disagree
            assert np.all((255 - img[differs]) == otsu_threshold(255 - img)) or not differs.any()
            assert t == exhaustive_otsu(img)


class TestPipeline:
    def test_golden_mask_counts(self):
        ds = generate_dataset(1, 1, "standard", 42)
        counts = {s.label: int(roi_pipeline(s.coronal)[1].sum()) for s in ds.samples}
        assert counts == {1: 1362, 0: 1616}

    def test_all_zero_image(self):
        enhanced, mask = roi_pipeline(np.zeros((32, 32), np.uint8))
        assert enhanced.shape == mask.shape == (32, 32)
        assert not mask.any()

    def test_deterministic(self):
        img = generate_dataset(1, 0, "standard", 3).samples[0].transverse
        a, b = roi_pipeline(img), roi_pipeline(img)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    def test_mask_covers_lesion_center(self):
        s = generate_dataset(0, 1, "easy", 8).samples[0]
        cy, cx = (int(round(c)) for c in s.params.center)
        assert roi_pipeline(s.coronal)[1][cy, cx] == 1

    def test_timings_recorded(self):
        timings = {}
        roi_pipeline(random_image((16, 16), 0), timings=timings)
        assert list(timings) == ["median", "equalize", "fft", "butterworth", "inverse_fft", "open_close", "binarize"]

    def test_stage_error_named(self):
        with pytest.raises(PipelineError) as info:
            roi_pipeline(random_image((16, 16), 0), PipelineParams(butterworth_order=0))
        assert info.value.stage == "butterworth"
        with pytest.raises(PipelineError, match="median"):
            roi_pipeline(np.zeros((2, 3, 4)))


class TestPGM:
    def test_round_trip_bytes(self, tmp_path):
        img = random_image((7, 5), 4)
        path = tmp_path / "x.pgm"
        write_pgm(path, img, ["seed=4", "kind=test"])
        back = read_pgm(path)
        np.testing.assert_array_equal(back, img)
        assert encode_pgm(back, ["seed=4", "kind=test"]) == path.read_bytes()

    def test_rejects_ascii_pgm(self):
        with pytest.raises(PGMError):
            decode_pgm(b"P2\n2 2\n255\n0 0 0 0\n")

    def test_rejects_truncated(self):
        with pytest.raises(PGMError):
            decode_pgm(encode_pgm(np.zeros((4, 4), np.uint8))[:-3])
