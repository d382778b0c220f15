import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from compresskit import data as D
from compresskit import gan as G
from compresskit.errors import ConfigError, DataError, ParameterError
from compresskit.metrics import iou


def ellipse_extent(b, samples=4000):
    """Bounding box of densely sampled boundary points of a rotated ellipse."""
    t = np.linspace(0, 2 * np.pi, samples, endpoint=False)
    c, s = math.cos(b.theta), math.sin(b.theta)
    x = b.cx + b.a * np.cos(t) * c - b.b * np.sin(t) * s
    y = b.cy + b.a * np.cos(t) * s + b.b * np.sin(t) * c
    return x.min(), y.min(), x.max(), y.max(), x, y


def sample_violations(sample) -> list[str]:
    """Every label-consistency and box-tightness breach of one generated sample."""
    p = sample.params
    out = []
    if D.label_of(p) != sample.label:
        out.append("label")
    if (sample.label == D.DEFECTIVE) != (p.blemish_count >= 1):
        out.append("defective-iff-blemish")
    if len(sample.boxes) != p.blemish_count:
        out.append("box-count")
    fx, fy, r = p.fruit
    for bl, box in zip(p.blemishes, sample.boxes):
        x0, y0, x1, y1, xs, ys = ellipse_extent(bl)
        if max(abs(box.box[0] - x0), abs(box.box[1] - y0), abs(box.box[2] - x1), abs(box.box[3] - y1)) > 1.0:
            out.append("tightness")
        if iou(box.box, (x0, y0, x1, y1)) < 0.8:
            out.append("iou")
        if np.max((xs - fx) ** 2 + (ys - fy) ** 2) > r**2:
            out.append("outside-fruit")
        if min(bl.a, bl.b) < D.MIN_AXIS * p.image_size / 64 - 1e-12:
            out.append("axis")
    if not (np.all(sample.image >= 0) and np.all(sample.image <= 1)):
        out.append("range")
    return out


class TestGenerate:
    def test_degenerate_balance(self):
        ds = D.generate_dataset(4, [1, 0, 0], seed=7)
        assert [s.label for s in ds.samples] == [0, 0, 0, 0]
        assert all(not s.boxes for s in ds.samples)

    def test_determinism(self):
        a = D.generate_dataset(12, seed=3)
        b = D.generate_dataset(12, seed=3)
        for x, y in zip(a.samples, b.samples):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.label == y.label and x.split == y.split

    def test_class_counts_600(self):
        counts = D.generate_dataset(600, seed=1).class_counts()
        assert all(180 <= c <= 220 for c in counts)

    def test_split_is_75_25(self):
        ds = D.generate_dataset(800, seed=1)
        assert len(ds.split("train")) == 600
        assert len(ds.split("test")) == 200

    @pytest.mark.parametrize("balance", [[0.5, 0.5], [0.5, 0.6, -0.1], [0.2, 0.2, 0.2]])
    def test_invalid_balance(self, balance):
        with pytest.raises(ParameterError):
            D.generate_dataset(4, balance)

    def test_invalid_n(self):
        with pytest.raises(ParameterError):
            D.generate_dataset(0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 200), st.integers(0, 1000))
    def test_proportions_close_to_balance(self, n, seed):
        balance = np.random.default_rng(seed).dirichlet(np.ones(3))
        counts = np.bincount(D.allocate_labels(n, balance, seed), minlength=3)
        assert counts.sum() == n
        assert np.all(np.abs(counts / n - balance) <= 1 / math.sqrt(n))


class TestSampleInvariants:
    def test_hundreds_of_samples(self):
        ds = D.generate_dataset(300, seed=11)
        bad = [i for i, s in enumerate(ds.samples) if sample_violations(s)]
        assert bad == []

    def test_class_semantics(self):
        ds = D.generate_dataset(90, seed=4)
        for s in ds.samples:
            if s.label == D.UNRIPE:
                assert s.params.hue < D.HUE_SPLIT and s.params.blemish_count == 0
            elif s.label == D.RIPE:
                assert s.params.hue >= D.HUE_SPLIT and s.params.blemish_count == 0
            else:
                assert 1 <= s.params.blemish_count <= 3

    def test_one_box_centre_per_cell(self):
        ds = D.generate_dataset(120, seed=5)
        cell = 64 / D.DETECTOR_GRID
        for s in ds.samples:
            keys = [(int(((b.box[1] + b.box[3]) / 2) // cell), int(((b.box[0] + b.box[2]) / 2) // cell)) for b in s.boxes]
            assert len(keys) == len(set(keys))

    def test_label_is_pure_function_of_params(self):
        s = D.generate_sample(9, 3, D.DEFECTIVE)
        params = D.SceneParams.from_dict(s.params.to_dict())
        assert D.label_of(params) == s.label
        assert_array_equal(D.render(params), s.image)


class TestDiskFormat:
    def test_roundtrip(self, tmp_path):
        ds = D.generate_dataset(6, seed=2)
        ds.save(tmp_path / "d")
        back = D.Dataset.load(tmp_path / "d")
        assert [s.label for s in back.samples] == [s.label for s in ds.samples]
        for a, b in zip(back.samples, ds.samples):
            assert_array_equal(a.image, b.image)
            assert [x.box for x in a.boxes] == [tuple(x.box) for x in b.boxes]
        assert (tmp_path / "d" / "img_00005.ppm").exists()

    def test_ppm_header(self, tmp_path):
        D.write_ppm(tmp_path / "a.ppm", np.zeros((3, 4, 5)))
        assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n5 4\n255\n")

    def test_refuses_non_empty_dir(self, tmp_path):
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "x").write_text("x")
        with pytest.raises(ConfigError):
            D.generate_dataset(2).save(tmp_path / "d")

    def test_manifest_hash_stable(self, tmp_path):
        D.generate_dataset(5, seed=8).save(tmp_path / "a")
        D.generate_dataset(5, seed=8).save(tmp_path / "b")
        assert D.manifest_hash(tmp_path / "a") == D.manifest_hash(tmp_path / "b")


class TestDrawing:
    def test_box_outline_pixels(self):
        img = np.zeros((3, 16, 16))
        from compresskit.models import Detection
        out = D.draw_boxes(img, [Detection(0, (2.0, 3.0, 8.0, 10.0), 0.9)])
        changed = np.any(out != img, axis=0)
        x0, y0, x1, y1 = D.box_pixels((2.0, 3.0, 8.0, 10.0), 16)
        expected = np.zeros((16, 16), bool)
        expected[y0, x0 : x1 + 1] = expected[y1, x0 : x1 + 1] = True
        expected[y0 : y1 + 1, x0] = expected[y0 : y1 + 1, x1] = True
        assert_array_equal(changed, expected)
        assert np.all(img == 0)


class TestGanLosses:
    def test_half_discriminator(self):
        zero = np.zeros(5)
        assert_allclose(G.discriminator_loss(zero, zero).item(), 2 * math.log(2), rtol=0, atol=1e-15)

    def test_zero_generator(self):
        gan = G.init_gan(2, (3, 4, 4), hidden=8, zero=True)
        assert_array_equal(gan.sample(3, 1), 0.5)

    def test_losses_match_log_forms(self):
        rng = np.random.default_rng(0)
        r, f = rng.normal(size=6), rng.normal(size=6)
        sig = lambda z: 1 / (1 + np.exp(-z))
        want_d = np.mean(-np.log(sig(r))) + np.mean(-np.log(1 - sig(f)))
        assert_allclose(G.discriminator_loss(r, f).item(), want_d, rtol=1e-12)
        assert_allclose(G.generator_loss(f).item(), np.mean(-np.log(sig(f))), rtol=1e-12)


@pytest.fixture(scope="module")
def defective():
    ds = D.generate_dataset(240, [0.2, 0.2, 0.6], seed=1)
    return ds, ds.arrays("train")[0][ds.arrays("train")[1] == D.DEFECTIVE]


class TestGanTraining:
    def test_needs_sixteen_samples(self):
        with pytest.raises(DataError):
            G.gan_train(np.zeros((15, 3, 4, 4)), 2)

    def test_history_finite_and_outputs_in_range(self, defective):
        _, real = defective
        gan = G.gan_train(real, 2, steps=40, seed=1)
        assert len(gan.history) == 40
        assert np.all(np.isfinite(gan.history))
        imgs = gan.sample(10, 3)
        assert np.all((imgs > 0) & (imgs < 1))

    def test_untrained_generator_starts_at_class_mean(self, defective):
        _, real = defective
        gan = G.gan_train(real, 2, steps=0, seed=1)
        g = gan.params
        zeroed = G.GanPair({**g, "g.w2": type(g["g.w2"])(np.zeros_like(g["g.w2"].data))}, 2, real.shape[1:])
        assert_allclose(zeroed.sample(1, 0)[0], np.clip(real.mean(axis=0), 0.02, 0.98), rtol=0, atol=1e-12)

    def test_seed_determinism(self, defective):
        _, real = defective
        a = G.gan_train(real, 2, steps=5, seed=4)
        b = G.gan_train(real, 2, steps=5, seed=4)
        assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)

    def test_save_load(self, defective, tmp_path):
        _, real = defective
        gan = G.gan_train(real, 2, steps=3, seed=1)
        G.save_gan(gan, tmp_path / "g")
        back = G.load_gan(tmp_path / "g")
        assert_array_equal(back.sample(2, 5), gan.sample(2, 5))
        with pytest.raises(ConfigError):
            G.load_gan(tmp_path / "missing")


class TestAugment:
    def test_k_zero(self, defective):
        ds, _ = defective
        gan = G.init_gan(2, (3, 64, 64), hidden=4)
        out = G.augment(ds, gan, 0, 2, seed=1)
        assert len(out) == len(ds)
        assert out.class_counts() == ds.class_counts()

    def test_k_fifty(self, defective):
        ds, _ = defective
        gan = G.init_gan(2, (3, 64, 64), hidden=4)
        out = G.augment(ds, gan, 50, 2, seed=1)
        assert out.class_counts()[2] == ds.class_counts()[2] + 50
        added = out.samples[len(ds):]
        assert len(added) == 50 and all(s.synthetic and s.label == 2 for s in added)
        assert all(a is b for a, b in zip(out.samples, ds.samples))
        stack = np.stack([s.image for s in added])
        assert np.all((stack > 0) & (stack < 1))
        assert 0 <= stack.mean(axis=0).min() and stack.mean(axis=0).max() <= 1

    def test_negative_k(self, defective):
        with pytest.raises(ParameterError):
            G.augment(defective[0], G.init_gan(2, (3, 64, 64), hidden=4), -1, 2, seed=1)

    def test_class_mismatch(self, defective):
        with pytest.raises(ConfigError):
            G.augment(defective[0], G.init_gan(1, (3, 64, 64), hidden=4), 3, 2, seed=1)
