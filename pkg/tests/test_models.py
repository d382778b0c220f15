import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from compresskit import models as Mo
from compresskit import tensor as T
from compresskit.errors import ConfigError, DataError, DimensionError, SpecError
from compresskit.metrics import iou
from compresskit.models import Detection, ModelSpec

DET = ModelSpec(head="detector", num_classes=1, attention="none")


def audit_count(spec: ModelSpec) -> int:
    """Parameter count by enumerating every tensor of a freshly built model."""
    return sum(t.size for t in Mo.build(spec, 0).params.values())


class TestSpec:
    def test_bad_stage(self):
        with pytest.raises(SpecError):
            ModelSpec(stages=[[16, 0]])

    def test_empty_stages(self):
        with pytest.raises(SpecError):
            ModelSpec(stages=[])

    def test_reduction_divides(self):
        with pytest.raises(SpecError):
            ModelSpec(stages=[[6, 1]], reduction=4)

    def test_detector_grid_must_match(self):
        with pytest.raises(SpecError):
            ModelSpec(head="detector", grid=4)

    def test_roundtrip(self):
        spec = Mo.student_spec(attention="bam")
        assert ModelSpec.from_dict(spec.to_dict()) == spec


class TestBuild:
    def test_determinism(self):
        a, b = Mo.build(Mo.teacher_spec(), 3), Mo.build(Mo.teacher_spec(), 3)
        assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)

    @pytest.mark.parametrize("attention", ["none", "cbam", "sam", "bam"])
    @pytest.mark.parametrize("head", ["classifier", "detector"])
    def test_closed_form_count(self, attention, head):
        for spec in (Mo.teacher_spec(attention=attention, head=head, num_classes=2),
                     Mo.student_spec(attention=attention, head=head, num_classes=2)):
            assert Mo.parameter_count(spec) == audit_count(spec)

    def test_default_counts(self):
        teacher, student = Mo.parameter_count(Mo.teacher_spec()), Mo.parameter_count(Mo.student_spec())
        assert teacher == 182363
        assert student == 20577
        assert student <= 0.5 * teacher

    def test_objectness_prior(self):
        m = Mo.build(DET, 0)
        assert m.params["head.b"].data[4] == Mo.OBJECTNESS_PRIOR
        assert np.all(np.delete(m.params["head.b"].data, 4) == 0)


class TestForwardClassify:
    def test_zero_head_gives_zero_logits(self):
        m = Mo.build(Mo.teacher_spec(), 1)
        m.params["head.w"].data[...] = 0.0
        assert_array_equal(Mo.forward_classify(m, np.zeros((3, 64, 64))).data, 0.0)

    def test_shape(self):
        m = Mo.build(Mo.student_spec(), 1)
        out = Mo.forward_classify(m, np.random.default_rng(0).uniform(size=(3, 64, 64)))
        assert out.shape == (3,)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Mo.forward_classify(Mo.build(Mo.student_spec(), 1), np.zeros((3, 32, 32)))

    def test_zero_attention_equals_quarter_gate(self):
        rng = np.random.default_rng(2)
        cbam = Mo.build(Mo.student_spec(attention="cbam"), 5)
        for name, t in cbam.params.items():
            if ".attn." in name:
                t.data[...] = 0.0
        plain_spec = Mo.student_spec(attention="none")
        params = {}
        for name, _ in ((n, None) for n in Mo.build(plain_spec, 0).params):
            data = cbam.params[name].data.copy()
            if name.endswith("conv2.w"):
                data *= 0.25
            params[name] = T.Tensor(data)
        plain = Mo.Model(plain_spec, params)
        x = rng.uniform(size=(3, 64, 64))
        assert_allclose(Mo.forward_classify(cbam, x).data, Mo.forward_classify(plain, x).data, rtol=0, atol=1e-12)

    def test_finite_and_deterministic_on_random_images(self):
        m = Mo.build(Mo.student_spec(), 7)
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.uniform(size=(100, 3, 64, 64))
            a = Mo.predict_grids(m, x, batch_size=100)
            b = Mo.predict_grids(m, x, batch_size=100)
            assert np.all(np.isfinite(a))
            assert a.tobytes() == b.tobytes()


def _grid(spec=DET):
    return np.zeros((spec.boxes_per_cell * 5 + spec.num_classes, spec.grid, spec.grid))


class TestDecode:
    def test_zero_grid(self):
        g = _grid()
        assert_array_equal(1 / (1 + np.exp(-g[4])), 0.5)
        assert Mo.decode_grid(g, DET, 0.6) == []

    def test_single_forced_cell(self):
        g = _grid()
        g[4] = -20.0
        g[4, 2, 5] = 8.0
        g[0, 2, 5], g[1, 2, 5], g[2, 2, 5], g[3, 2, 5] = 0.4, -0.3, 0.2, -0.1
        dets = Mo.decode_grid(g, DET, 0.5)
        assert len(dets) == 1
        sig = lambda z: 1 / (1 + math.exp(-z))
        cx, cy = (5 + sig(0.4)) * 8, (2 + sig(-0.3)) * 8
        w, h = 8 * math.exp(0.2), 8 * math.exp(-0.1)
        assert_allclose(dets[0].box, (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), rtol=0, atol=1e-12)
        assert_allclose(dets[0].score, sig(8.0), rtol=0, atol=1e-15)

    def test_nms_keeps_higher_score(self):
        a = Detection(0, (0.0, 0.0, 10.0, 10.0), 0.9)
        b = Detection(0, (0.0, 0.0, 10.0, 9.0), 0.8)
        assert iou(a.box, b.box) == pytest.approx(0.9)
        assert Mo.nms([b, a]) == [a]

    def test_nms_antichain(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            dets = []
            for _ in range(12):
                x, y = rng.uniform(0, 20, 2)
                dets.append(Detection(int(rng.integers(2)), (x, y, x + rng.uniform(1, 6), y + rng.uniform(1, 6)),
                                      float(rng.uniform())))
            kept = Mo.nms(dets, 0.5)
            for i, a in enumerate(kept):
                for b in kept[i + 1 :]:
                    assert a.class_id != b.class_id or iou(a.box, b.box) <= 0.5

    def test_decoded_boxes_valid(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            g = rng.normal(scale=4, size=_grid().shape)
            for d in Mo.decode_grid(g, DET, 0.0):
                assert d.box[0] < d.box[2] and d.box[1] < d.box[3]
                assert 0 <= d.score <= 1

    def test_forward_detect_needs_detector(self):
        with pytest.raises(ConfigError):
            Mo.forward_detect(Mo.build(Mo.student_spec(), 0), np.zeros((3, 64, 64)))

    def test_detection_invariants(self):
        with pytest.raises(ValueError):
            Detection(0, (1.0, 0.0, 1.0, 2.0), 0.5)
        with pytest.raises(ValueError):
            Detection(0, (0.0, 0.0, 1.0, 2.0), 1.5)


def _logit(p):
    return math.log(p / (1 - p))


class TestDetectLoss:
    def test_empty_truth_zero_grid(self):
        g = _grid()
        want = DET.grid * DET.grid * DET.boxes_per_cell * 0.25
        assert_allclose(Mo.detect_loss(g, [], DET).item(), want, rtol=0, atol=1e-12)

    def test_perfect_prediction_is_zero(self):
        spec = ModelSpec(head="detector", num_classes=2, attention="none")
        box = Detection(1, (13.0, 21.0, 20.0, 26.0), 1.0)
        cx, cy = 16.5, 23.5
        gx, gy = int(cx // 8), int(cy // 8)
        g = _grid(spec)
        g[4] = -50.0
        g[0, gy, gx] = _logit(cx / 8 - gx)
        g[1, gy, gx] = _logit(cy / 8 - gy)
        g[2, gy, gx] = math.log(7.0 / 8)
        g[3, gy, gx] = math.log(5.0 / 8)
        g[4, gy, gx] = 50.0
        g[5, gy, gx], g[6, gy, gx] = -50.0, 50.0
        assert Mo.detect_loss(g, [box], spec).item() <= 1e-12

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            g = rng.normal(size=_grid().shape)
            assert Mo.detect_loss(g, [Detection(0, (10.0, 10.0, 20.0, 16.0), 1.0)], DET).item() >= 0

    def test_box_outside_image(self):
        with pytest.raises(DataError):
            Mo.detect_loss(_grid(), [Detection(0, (60.0, 0.0, 70.0, 5.0), 1.0)], DET)

    def test_batched_is_mean(self):
        rng = np.random.default_rng(2)
        g = rng.normal(size=(2,) + _grid().shape)
        truth = [[Detection(0, (10.0, 10.0, 20.0, 16.0), 1.0)], []]
        each = [Mo.detect_loss(g[i], truth[i], DET).item() for i in range(2)]
        assert_allclose(Mo.detect_loss(g, truth, DET).item(), np.mean(each), rtol=1e-13)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = Mo.build(Mo.student_spec(attention="sam"), 2)
        Mo.save_model(m, tmp_path / "ck", extra={"k": 1})
        back = Mo.load_model(tmp_path / "ck")
        assert back.spec == m.spec
        assert all(back.params[n].data.tobytes() == m.params[n].data.tobytes() for n in m.params)
        assert Mo.checkpoint_extra(tmp_path / "ck") == {"k": 1}

    def test_missing(self, tmp_path):
        with pytest.raises(ConfigError):
            Mo.load_model(tmp_path)
