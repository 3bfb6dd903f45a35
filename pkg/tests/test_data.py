import gzip
import struct

import numpy as np
import pytest
from PIL import Image

from nslnet.data.idx import (
    IMAGE_MAGIC,
    LABEL_MAGIC,
    LabeledImages,
    read_idx,
    read_idx_array,
    read_idx_real,
    to_pixels,
    mnist_paths,
    write_idx,
    write_idx_array,
    write_idx_real,
)
from nslnet.data.synthetic import (
    DotAnnotation,
    TwoRegionSpec,
    gaussian_dot_targets,
    gen_two_region,
    read_points,
    write_points,
)
from nslnet.data.variants import (
    CROSS,
    PLUS,
    foreground_mask,
    gen_mnist_m,
    gen_mnist_p,
    gen_mnist_s,
    gen_mnist_v,
    load_backgrounds,
)
from nslnet.errors import DataError, FormatError, ParameterError

from conftest import MNIST_DIR


def toy_digits(n=20, seed=0):
    rng = np.random.default_rng(seed)
    images = np.zeros((n, 1, 28, 28), np.float32)
    for i in range(n):
        r, c = rng.integers(6, 16, size=2)
        images[i, 0, r : r + 8, c : c + 4] = rng.uniform(0.6, 1.0)
    return LabeledImages(images, rng.integers(0, 10, size=n))


class TestIdx:
    def test_round_trip(self, tmp_path):
        data = toy_digits()
        data.images[0, 0, 0, 0] = 1.0
        write_idx(data, tmp_path / "i.idx", tmp_path / "l.idx")
        back = read_idx(tmp_path / "i.idx", tmp_path / "l.idx")
        np.testing.assert_array_equal(back.labels, data.labels)
        assert np.abs(back.images - data.images).max() <= 1 / 256
        np.testing.assert_array_equal(back.images, to_pixels(data.images).astype(np.float32) / 256)

    def test_lossless_at_u8(self, tmp_path):
        raw = np.random.default_rng(0).integers(0, 256, size=(5, 28, 28)).astype(np.uint8)
        data = LabeledImages((raw.astype(np.float32) / 256)[:, None], np.arange(5))
        write_idx(data, tmp_path / "i.idx.gz", tmp_path / "l.idx.gz")
        np.testing.assert_array_equal(read_idx_array(tmp_path / "i.idx.gz", IMAGE_MAGIC), raw)
        with gzip.open(tmp_path / "i.idx.gz", "rb") as f:
            assert struct.unpack(">4I", f.read(16)) == (IMAGE_MAGIC, 5, 28, 28)

    def test_quantization(self):
        np.testing.assert_array_equal(to_pixels(np.array([0.0, 0.5, 255 / 256, 1.0])), [0, 128, 255, 255])

    def test_wrong_magic(self, tmp_path):
        data = toy_digits(2)
        write_idx(data, tmp_path / "i.idx", tmp_path / "l.idx")
        with pytest.raises(FormatError):
            read_idx(tmp_path / "l.idx", tmp_path / "i.idx")

    def test_truncated(self, tmp_path):
        data = toy_digits(2)
        write_idx(data, tmp_path / "i.idx", tmp_path / "l.idx")
        blob = (tmp_path / "i.idx").read_bytes()
        (tmp_path / "i.idx").write_bytes(blob[:-10])
        with pytest.raises(FormatError):
            read_idx(tmp_path / "i.idx", tmp_path / "l.idx")
        (tmp_path / "i.idx").write_bytes(blob[:6])
        with pytest.raises(FormatError):
            read_idx(tmp_path / "i.idx", tmp_path / "l.idx")

    def test_count_mismatch(self):
        with pytest.raises(DataError):
            LabeledImages(np.zeros((3, 1, 4, 4), np.float32), np.zeros(2, dtype=int))

    def test_real_round_trip(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 5)).astype(np.float32)
        write_idx_real(tmp_path / "x.idx", x)
        np.testing.assert_array_equal(read_idx_real(tmp_path / "x.idx"), x)
        with pytest.raises(FormatError):
            read_idx_array(tmp_path / "x.idx", IMAGE_MAGIC)
        write_idx_array(tmp_path / "u.idx", np.zeros((2, 2), np.uint8), LABEL_MAGIC)
        with pytest.raises(FormatError):
            read_idx_real(tmp_path / "u.idx")

    def test_mnist_train_header(self, mnist_test):
        images, labels = mnist_paths(MNIST_DIR, "train")
        assert read_idx_array(labels, LABEL_MAGIC).shape == (60000,)
        with pytest.raises(DataError):
            mnist_paths(MNIST_DIR, "validation")

    def test_mnist_test_split(self, mnist_test):
        assert mnist_test.images.shape == (10000, 1, 28, 28)
        assert mnist_test.images.min() >= 0 and mnist_test.images.max() < 1
        assert set(np.unique(mnist_test.labels)) == set(range(10))


class TestForegroundMask:
    def test_empty(self):
        assert not foreground_mask(np.zeros((28, 28))).any()

    def test_threshold(self):
        assert foreground_mask(np.array([0.9]))[0]
        assert not foreground_mask(np.array([0.5]))[0]

    def test_mnist_area(self, mnist_test):
        # frozen corpus statistic: 9854 of 10000 test digits fall in (5%, 40%); thin ones make up the rest
        areas = foreground_mask(mnist_test.images[:, 0]).mean(axis=(1, 2))
        assert np.sum((areas > 0.05) & (areas < 0.40)) == 9854
        assert areas.max() < 0.40
        assert np.mean((areas > 0.04) & (areas < 0.40)) >= 0.99


class TestVariants:
    def test_p_statistics(self):
        src = toy_digits(200)
        out = gen_mnist_p(src, seed=1)
        assert set(np.unique(out.images)) <= {0.0, 1.0}
        fg = src.images > 0.5
        n = fg.sum()
        lit = out.images[fg].mean()
        assert abs(lit - 0.5) < 3 * np.sqrt(0.25 / n)
        nb = (~fg).sum()
        assert abs(out.images[~fg].mean() - 0.05) < 3 * np.sqrt(0.05 * 0.95 / nb)
        np.testing.assert_array_equal(out.labels, src.labels)

    def test_p_jaccard(self):
        src = toy_digits(200)
        before = src.images > 0.5
        after = gen_mnist_p(src, seed=2).images > 0.5
        inter = (before & after).sum()
        union = (before | after).sum()
        # E[inter] = 0.5 |fg|, E[union] = |fg| + 0.05 |bg|
        expected = 0.5 * before.sum() / (before.sum() + 0.05 * (~before).sum())
        assert inter / union == pytest.approx(expected, rel=0.05)

    def test_s_blank_image(self):
        n = 400
        src = LabeledImages(np.zeros((n, 1, 28, 28), np.float32), np.zeros(n, dtype=int))
        out = gen_mnist_s(src, seed=3)
        assert set(np.unique(out.images)) <= {0.0, 1.0}
        # a visible X needs no later site within Chebyshev distance 2 (12 of them in scan order)
        visible = 0
        for img in out.images[:, 0]:
            for r in range(1, 27):
                for c in range(1, 27):
                    visible += np.array_equal(img[r - 1 : r + 2, c - 1 : c + 2], CROSS)
        p = 0.02
        stamps = n * 26 * 26 * p
        assert 0.95 * stamps * (1 - p) ** 12 < visible < 1.03 * stamps

    def test_s_glyph_on_foreground(self):
        img = np.zeros((1, 1, 28, 28), np.float32)
        img[0, 0, 9, 9] = 1.0  # only (9, 9) is foreground and on the stride grid
        out = gen_mnist_s(LabeledImages(img, np.zeros(1, dtype=int)), seed=0, density=0.0)
        np.testing.assert_array_equal(out.images[0, 0, 8:11, 8:11], PLUS)
        assert out.images.sum() == PLUS.sum()

    def test_s_distractor_shape(self):
        src = LabeledImages(np.zeros((1, 1, 9, 9), np.float32), np.zeros(1, dtype=int))
        out = gen_mnist_s(src, seed=0, density=1.0)  # every interior site, last write wins
        np.testing.assert_array_equal(out.images[0, 0, -3:, -3:], CROSS)

    def test_v_statistics(self):
        src = toy_digits(300)
        out = gen_mnist_v(src, seed=4)
        fg = src.images > 0.5
        assert out.images.min() >= 0 and out.images.max() <= 1
        mf, mb = out.images[fg].mean(), out.images[~fg].mean()
        sf, sb = out.images[fg].std(), out.images[~fg].std()
        assert abs(mf - 0.5) < 3 * sf / np.sqrt(fg.sum())
        assert abs(mb - 0.5) < 3 * sb / np.sqrt((~fg).sum())
        assert abs(mf - mb) < 0.01
        assert sf > 3 * sb

    def test_m_identities(self):
        bg = np.random.default_rng(0).random((40, 50)).astype(np.float32)
        zeros = LabeledImages(np.zeros((3, 1, 28, 28), np.float32), np.arange(3))
        ones = LabeledImages(np.ones((3, 1, 28, 28), np.float32), np.arange(3))
        a = gen_mnist_m(zeros, [bg], seed=5)
        b = gen_mnist_m(ones, [bg], seed=5)
        np.testing.assert_allclose(a.images + b.images, 1.0, atol=1e-6)
        crop = a.images[0, 0]
        found = any(np.array_equal(crop, bg[r : r + 28, c : c + 28]) for r in range(13) for c in range(23))
        assert found

    def test_m_requires_backgrounds(self, tmp_path):
        with pytest.raises(DataError, match="backgrounds required"):
            gen_mnist_m(toy_digits(2), [np.zeros((10, 10))], seed=0)
        with pytest.raises(DataError, match="backgrounds required"):
            gen_mnist_m(toy_digits(2), tmp_path, seed=0)

    def test_backgrounds_from_files(self, tmp_path):
        rgb = np.random.default_rng(0).integers(0, 256, size=(30, 32, 3)).astype(np.uint8)
        Image.fromarray(rgb).save(tmp_path / "a.ppm")
        Image.fromarray(rgb[:, :, 0]).save(tmp_path / "b.pgm")
        (tmp_path / "notes.txt").write_text("ignored")
        bgs = load_backgrounds(tmp_path)
        assert len(bgs) == 2
        np.testing.assert_allclose(bgs[1], rgb[:, :, 0] / 255.0, atol=1e-6)
        out = gen_mnist_m(toy_digits(4), tmp_path, seed=1)
        np.testing.assert_array_equal(out.images, gen_mnist_m(toy_digits(4), tmp_path, seed=1).images)

    @pytest.mark.parametrize("gen", [gen_mnist_p, gen_mnist_s, gen_mnist_v])
    def test_deterministic_and_order_free(self, gen):
        src = toy_digits(10)
        a = gen(src, seed=7)
        np.testing.assert_array_equal(a.images, gen(src, seed=7).images)
        assert not np.array_equal(a.images, gen(src, seed=8).images)
        head = gen(LabeledImages(src.images[:5], src.labels[:5]), seed=7)
        np.testing.assert_array_equal(head.images, a.images[:5])
        np.testing.assert_array_equal(a.labels, src.labels)
        assert a.images.min() >= 0 and a.images.max() <= 1


class TestTwoRegion:
    def test_two_valued(self):
        spec = TwoRegionSpec([1.0, 2.0], [0.0, -1.0], p_f=0.3)
        images, mask = gen_two_region(spec, 2, seed=0)
        np.testing.assert_array_equal(images[:, :, mask], np.broadcast_to([[1.0], [2.0]], (2, 2, mask.sum())))
        np.testing.assert_array_equal(images[:, :, ~mask], np.broadcast_to([[0.0], [-1.0]], (2, 2, (~mask).sum())))

    @pytest.mark.parametrize("p_f", [0.1, 0.5, 0.8])
    def test_foreground_fraction(self, p_f):
        mask = TwoRegionSpec([1.0], [0.0], p_f=p_f).mask()
        assert abs(mask.mean() - p_f) < 0.02

    def test_region_means(self):
        spec = TwoRegionSpec([1.0, 0.5], [0.0, 0.0], sigma_f=0.3, sigma_b=0.2)
        images, mask = gen_two_region(spec, 20, seed=1)
        fg = images[:, :, mask]
        bg = images[:, :, ~mask]
        for c, (mf, mb) in enumerate(zip(spec.mu_f, spec.mu_b)):
            assert abs(fg[:, c].mean() - mf) < 3 * 0.3 / np.sqrt(fg[:, c].size)
            assert abs(bg[:, c].mean() - mb) < 3 * 0.2 / np.sqrt(bg[:, c].size)

    def test_piecewise_generation(self):
        spec = TwoRegionSpec([1.0], [0.0], sigma_f=0.1, sigma_b=0.1, height=8, width=8)
        whole, _ = gen_two_region(spec, 4, seed=2)
        second, _ = gen_two_region(spec, 2, seed=2, start=2)
        np.testing.assert_array_equal(whole[2:], second)

    def test_validation(self):
        with pytest.raises(ParameterError):
            TwoRegionSpec([1.0], [0.0, 1.0])
        with pytest.raises(ParameterError):
            TwoRegionSpec([1.0], [0.0], p_f=1.0)
        with pytest.raises(ParameterError):
            TwoRegionSpec([1.0], [0.0], sigma_f=-1)
        with pytest.raises(ParameterError):
            TwoRegionSpec([1.0], [1.0]).check_discriminable()

    def test_explicit_radius(self):
        mask = TwoRegionSpec([1.0], [0.0], height=9, width=9, center=(4, 4), radius=1.0).mask()
        assert mask.sum() == 5


class TestDotTargets:
    def test_single_centered_point(self):
        t = gaussian_dot_targets(DotAnnotation([[(10, 10)]]), 21, 21, sigma=2.0)[0, 0]
        assert t[10, 10] == 1.0
        np.testing.assert_allclose(t, t.T, atol=1e-7)
        np.testing.assert_allclose(t, t[::-1, ::-1], atol=1e-7)

    def test_zero_points(self):
        assert not gaussian_dot_targets(DotAnnotation([[]]), 10, 10, 1.5).any()

    def test_two_points_midpoint(self):
        sigma, d = 2.0, 12.0
        t = gaussian_dot_targets(DotAnnotation([[(10, 4), (10, 4 + d)]]), 21, 21, sigma, dtype=np.float64)[0, 0]
        assert t[10, 4] == pytest.approx(1.0) and t[10, 16] == pytest.approx(1.0)
        assert t[10, 10] == pytest.approx(np.exp(-d**2 / (8 * sigma**2)), rel=1e-12)

    def test_out_of_grid(self):
        with pytest.raises(DataError):
            gaussian_dot_targets(DotAnnotation([[(10, 30)]]), 21, 21, 1.0)

    def test_points_round_trip(self, tmp_path):
        ann = DotAnnotation([[(1.5, 2.0), (3, 4)], [], [(0.25, 7)]])
        write_points(tmp_path / "p.csv", ann)
        back = read_points(tmp_path / "p.csv", n_images=3)
        assert len(back) == 3
        for a, b in zip(ann.points, back.points):
            np.testing.assert_array_equal(a, b)

    def test_malformed_line_number(self, tmp_path):
        (tmp_path / "p.csv").write_text("# header\n0,1,2\n0,x,2\n")
        with pytest.raises(FormatError, match=":3:"):
            read_points(tmp_path / "p.csv")
