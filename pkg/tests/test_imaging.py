import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advirl.imaging import (
    DimensionMismatchError,
    Image,
    ImageError,
    MalformedHeaderError,
    Mask,
    UnreadableImageError,
    UnsupportedBitDepthError,
    apply_mask,
    chroma_mask,
    downsample,
    load_image,
    load_mask,
    mse,
    save_image,
    save_mask,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


def image_arrays(h=st.integers(1, 6), w=st.integers(1, 6)):
    return st.tuples(h, w).flatmap(lambda hw: arrays(np.float64, (hw[0], hw[1], 3), elements=unit))


def test_image_rejects_out_of_range_values():
    with pytest.raises(ImageError):
        Image(np.full((2, 2, 3), 1.5))
    with pytest.raises(ImageError):
        Image(np.full((2, 2, 3), np.nan))
    with pytest.raises(ImageError):
        Image(np.zeros((2, 2)))


def test_image_is_immutable():
    img = Image.constant(2, 2, (0.1, 0.2, 0.3))
    with pytest.raises(ValueError):
        img.pixels[0, 0, 0] = 1.0


class TestMse:
    def test_identical_images(self):
        img = Image(np.random.default_rng(0).random((4, 5, 3)))
        assert mse(img, img) == 0.0

    def test_single_channel_difference(self):
        a = Image.constant(1, 1, (10 / 255, 0, 0))
        b = Image.constant(1, 1, (0, 0, 0))
        assert mse(a, b) == pytest.approx(100.0 / 3.0, rel=1e-12)

    def test_black_vs_white(self):
        assert mse(Image.constant(2, 2, (0, 0, 0)), Image.constant(2, 2, (1, 1, 1))) == 65025.0

    def test_size_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            mse(Image.constant(2, 2, (0, 0, 0)), Image.constant(2, 3, (0, 0, 0)))

    @given(image_arrays(), st.data())
    @settings(max_examples=50, deadline=None)
    def test_symmetric_and_nonnegative(self, arr, data):
        other = data.draw(arrays(np.float64, arr.shape, elements=unit))
        a, b = Image(arr), Image(other)
        assert mse(a, b) == mse(b, a)
        assert mse(a, b) >= 0.0
        assert mse(a, a) == 0.0


class TestApplyMask:
    def test_all_true_is_identity(self):
        img = Image(np.random.default_rng(1).random((3, 4, 3)))
        assert apply_mask(img, Mask(np.ones((3, 4), bool))) == img

    def test_all_false_gives_background(self):
        img = Image(np.random.default_rng(2).random((3, 4, 3)))
        out = apply_mask(img, Mask(np.zeros((3, 4), bool)), (0, 0, 0))
        assert np.all(out.pixels == 0.0)

    def test_checkerboard(self):
        color, bg = (0.2, 0.4, 0.6), (1.0, 0.0, 0.5)
        img = Image.constant(4, 4, color)
        checker = (np.add.outer(np.arange(4), np.arange(4)) % 2) == 0
        out = apply_mask(img, Mask(checker), bg)
        for y in range(4):
            for x in range(4):
                expected = color if (x + y) % 2 == 0 else bg
                assert tuple(out.pixels[y, x]) == expected

    def test_size_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            apply_mask(Image.constant(2, 2, (0, 0, 0)), Mask(np.ones((3, 2), bool)))

    @given(image_arrays(), st.data())
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, arr, data):
        bits = data.draw(arrays(bool, arr.shape[:2]))
        bg = data.draw(st.tuples(unit, unit, unit))
        m = Mask(bits)
        once = apply_mask(Image(arr), m, bg)
        assert apply_mask(once, m, bg) == once


class TestDownsample:
    def test_factor_one(self):
        img = Image(np.random.default_rng(3).random((4, 6, 3)))
        assert downsample(img, 1) == img

    def test_constant_block(self):
        out = downsample(Image.constant(2, 2, (0.3, 0.6, 0.9)), 2)
        assert out.width == out.height == 1
        np.testing.assert_allclose(out.pixels[0, 0], (0.3, 0.6, 0.9), rtol=0, atol=1e-15)

    def test_block_mean(self):
        px = np.zeros((2, 2, 3))
        px[1, :, 0] = 1.0  # channel 0 values {0, 0, 1, 1}
        assert downsample(Image(px), 2).pixels[0, 0, 0] == 0.5

    def test_non_divisible(self):
        with pytest.raises(DimensionMismatchError):
            downsample(Image.constant(3, 2, (0, 0, 0)), 2)

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.data())
    @settings(max_examples=50, deadline=None)
    def test_preserves_mean_color(self, f, bh, bw, data):
        arr = data.draw(arrays(np.float64, (bh * f, bw * f, 3), elements=unit))
        img = Image(arr)
        np.testing.assert_allclose(downsample(img, f).mean_color(), img.mean_color(),
                                   rtol=0, atol=1e-12)


class TestFileIO:
    @pytest.mark.parametrize("suffix", [".png", ".ppm"])
    def test_round_trip(self, tmp_path, suffix):
        img = Image(np.random.default_rng(4).random((7, 5, 3)))
        path = tmp_path / f"img{suffix}"
        save_image(img, path)
        back = load_image(path)
        assert (back.width, back.height) == (5, 7)
        assert np.max(np.abs(back.pixels - img.pixels)) <= 1 / 255 + 1e-9

    @given(image_arrays())
    @settings(max_examples=20, deadline=None)
    def test_round_trip_property(self, tmp_path_factory, arr):
        path = tmp_path_factory.mktemp("rt") / "x.ppm"
        save_image(Image(arr), path)
        assert np.max(np.abs(load_image(path).pixels - arr)) <= 1 / 255 + 1e-9

    def test_missing_file(self, tmp_path):
        with pytest.raises(UnreadableImageError):
            load_image(tmp_path / "nope.png")

    def test_malformed_ppm_header(self, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"P6\n2 x\n255\n" + bytes(12))
        with pytest.raises(MalformedHeaderError):
            load_image(p)

    def test_truncated_ppm_payload(self, tmp_path):
        p = tmp_path / "short.ppm"
        p.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(MalformedHeaderError):
            load_image(p)

    def test_ppm_bit_depth(self, tmp_path):
        p = tmp_path / "deep.ppm"
        p.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(UnsupportedBitDepthError):
            load_image(p)

    def test_png_bit_depth(self, tmp_path):
        from PIL import Image as PILImage

        p = tmp_path / "deep.png"
        PILImage.fromarray(np.full((2, 2), 40000, dtype=np.uint16)).save(p)
        with pytest.raises(UnsupportedBitDepthError):
            load_image(p)

    def test_unknown_format(self, tmp_path):
        p = tmp_path / "junk.png"
        p.write_bytes(b"GIF89a....")
        with pytest.raises(MalformedHeaderError):
            load_image(p)

    def test_ppm_comment_in_header(self, tmp_path):
        p = tmp_path / "c.ppm"
        p.write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([255, 0, 128]))
        np.testing.assert_allclose(load_image(p).pixels[0, 0], (1.0, 0.0, 128 / 255))

    def test_mask_threshold(self, tmp_path):
        from PIL import Image as PILImage

        lum = np.array([[0, 127], [128, 255]], dtype=np.uint8)
        p = tmp_path / "m.png"
        PILImage.fromarray(lum, mode="L").save(p)
        m = load_mask(p, label="red")
        assert m.label == "red"
        assert m.bits.tolist() == [[False, False], [True, True]]

    def test_mask_round_trip(self, tmp_path):
        bits = np.random.default_rng(5).random((4, 6)) > 0.5
        save_mask(Mask(bits), tmp_path / "m.png")
        assert np.array_equal(load_mask(tmp_path / "m.png").bits, bits)


def test_chroma_mask_separates_object_from_backdrop():
    px = np.zeros((3, 3, 3))
    px[1, 1] = (0.9, 0.1, 0.1)
    m = chroma_mask(Image(px), (0, 0, 0))
    assert m.bits.sum() == 1 and m.bits[1, 1]
