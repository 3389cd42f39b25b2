import pytest
import torch

from mmctl.codecs import AudioCodec, VideoCodec
from mmctl.errors import InputError, ShapeError
from mmctl.mmcu import (
    acoustic_mask,
    apply_control_dropout,
    build_acoustic_control,
    build_control_unit,
    build_visual_control,
    drop_acoustic,
    drop_visual,
    visual_mask,
)
from mmctl.numerics import Rng
from mmctl.prompt import encode_text, parse_prompt


@pytest.fixture(scope="module")
def codecs():
    return VideoCodec(16, 16), AudioCodec(64, 640)


def _text():
    rng = Rng(9)
    table, seg = rng.normal((65, 16)), rng.normal((2, 16))
    return encode_text(parse_prompt("[VISUAL]: a [SPEECH]: b"), table, seg, 4)


class TestMaskLayout:
    @pytest.mark.parametrize("t", range(1, 17))
    def test_visual_mask_layout(self, t):
        m = visual_mask(t)
        assert m.shape == (1 + t,)
        assert float(m[0]) == 0.0                 # reference-image slot
        assert m[1:].tolist() == [1.0] * t        # structure slots

    @pytest.mark.parametrize("t", range(1, 17))
    @pytest.mark.parametrize("k", range(0, 9))
    def test_acoustic_mask_layout(self, t, k):
        m = acoustic_mask(k, t)
        assert m.shape == (k + t,)
        assert m[:k].tolist() == [0.0] * k        # reference-audio slots
        assert m[k:].tolist() == [1.0] * t        # silence slots aligned with targets


class TestVisualControl:
    def test_present_everything(self, codecs):
        vc, _ = codecs
        v = build_visual_control(torch.rand(16, 16, 3), torch.rand(5, 16, 16), 5, vc)
        assert tuple(v.latents.data.shape) == (6, vc.tokens_per_frame, 192)
        assert v.mask.tolist() == [0.0] + [1.0] * 5

    def test_absent_conditions_give_zero_latents_same_layout(self, codecs):
        vc, _ = codecs
        v = build_visual_control(None, None, 5, vc)
        assert tuple(v.latents.data.shape) == (6, vc.tokens_per_frame, 192)
        assert float(v.latents.data.abs().max()) == 0.0
        assert v.mask.tolist() == [0.0] + [1.0] * 5

    def test_structure_length_mismatch_rejected(self, codecs):
        vc, _ = codecs
        with pytest.raises(ShapeError):
            build_visual_control(None, torch.rand(4, 16, 16), 5, vc)

    def test_single_channel_structure_accepted(self, codecs):
        vc, _ = codecs
        v = build_visual_control(None, torch.rand(3, 16, 16), 3, vc)
        w = build_visual_control(None, torch.rand(3, 16, 16, 3), 3, vc)
        assert v.latents.data.shape == w.latents.data.shape


class TestAcousticControl:
    def test_present_reference(self, codecs):
        _, ac = codecs
        a = build_acoustic_control(torch.rand(3 * 64), 5, ac)
        assert tuple(a.latents.data.shape) == (8, 1, 64)
        assert a.k == 3
        assert a.mask.tolist() == [0.0] * 3 + [1.0] * 5
        # trailing t slots hold silence latents
        assert float(a.latents.data[3:].abs().max()) == 0.0

    def test_absent_uses_default_k(self, codecs):
        _, ac = codecs
        a = build_acoustic_control(None, 5, ac, k_default=2)
        assert a.k == 2
        assert tuple(a.latents.data.shape) == (7, 1, 64)
        assert float(a.latents.data.abs().max()) == 0.0

    def test_empty_reference_rejected(self, codecs):
        _, ac = codecs
        with pytest.raises(InputError):
            build_acoustic_control(torch.zeros(0), 5, ac)


class TestDrop:
    def test_drop_zeroes_latents_and_mask(self, codecs):
        vc, ac = codecs
        v = build_visual_control(torch.rand(16, 16, 3), torch.rand(4, 16, 16), 4, vc)
        dv = drop_visual(v)
        assert float(dv.latents.data.abs().max()) == 0.0
        assert not bool(dv.mask.any())
        assert dv.latents.data.shape == v.latents.data.shape

        a = build_acoustic_control(torch.rand(2 * 64), 4, ac)
        da = drop_acoustic(a)
        assert float(da.latents.data.abs().max()) == 0.0
        assert not bool(da.mask.any())
        assert da.latents.data.shape == a.latents.data.shape

    def test_dropout_rate_within_tolerance(self, codecs):
        vc, ac = codecs
        unit = build_control_unit(
            _text(), 4, vc, ac,
            ref_image=torch.rand(16, 16, 3), ref_audio=torch.rand(2 * 64),
        )
        rng = Rng(123)
        n = 10_000
        v_drops = a_drops = 0
        for i in range(n):
            u = apply_control_dropout(unit, rng.split(f"i/{i}"), 0.1)
            if not bool(u.visual.mask.any()):
                v_drops += 1
            if not bool(u.acoustic.mask.any()):
                a_drops += 1
        assert 0.08 <= v_drops / n <= 0.12
        assert 0.08 <= a_drops / n <= 0.12

    def test_dropout_streams_independent(self, codecs):
        vc, ac = codecs
        unit = build_control_unit(
            _text(), 4, vc, ac,
            ref_image=torch.rand(16, 16, 3), ref_audio=torch.rand(2 * 64),
        )
        rng = Rng(7)
        joint = 0
        n = 10_000
        for i in range(n):
            u = apply_control_dropout(unit, rng.split(f"i/{i}"), 0.1)
            if not bool(u.visual.mask.any()) and not bool(u.acoustic.mask.any()):
                joint += 1
        assert 0.005 <= joint / n <= 0.02  # ~= 0.1 * 0.1

    def test_text_never_dropped(self, codecs):
        vc, ac = codecs
        unit = build_control_unit(_text(), 4, vc, ac)
        u = apply_control_dropout(unit, Rng(0), 1.0)
        assert torch.equal(u.text.tokens, unit.text.tokens)
        assert not bool(u.visual.mask.any()) and not bool(u.acoustic.mask.any())
