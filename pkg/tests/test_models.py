import numpy as np
import pytest

from labelhalluc import diffcore as dc
from labelhalluc.errors import ConfigError, DataError, DimensionError
from labelhalluc.models import (Backbone, LinearHead, ParamGroupMask, embed, forward_embed,
                                forward_logits, init_model, load_checkpoint, param_count,
                                predict_logits, replace_head, save_checkpoint)


def test_zero_depth_backbone_is_identity():
    backbone, head = init_model(6, [], None, 3, seed=0)
    x = np.random.default_rng(0).normal(size=(4, 6))
    assert np.array_equal(embed(backbone, x), x)
    assert head.weight.shape == (6, 3)
    with pytest.raises(ConfigError):
        init_model(6, [], 4, 3, seed=0)


def test_identity_layer_with_nonnegative_input():
    backbone = Backbone(3, [(dc.parameter(np.eye(3)), dc.parameter(np.zeros(3)))])
    x = np.abs(np.random.default_rng(1).normal(size=(5, 3)))
    assert np.array_equal(embed(backbone, x), x)


def test_head_constant_logits_and_hand_case():
    head = LinearHead(dc.parameter(np.zeros((2, 3))), dc.parameter([0.5, -1.0, 2.0]))
    out = head(dc.constant(np.random.default_rng(2).normal(size=(7, 2)))).value
    assert out.shape == (7, 3) and (out == [0.5, -1.0, 2.0]).all()
    head = LinearHead(dc.parameter([[0.1, -0.2], [0.3, 0.4]]), dc.parameter([0.05, -0.05]))
    got = head(dc.constant([[2.0, -1.0]])).value[0]
    assert np.allclose(got, [0.2 - 0.3 + 0.05, -0.4 - 0.4 - 0.05], atol=1e-10)


def test_init_determinism_and_he_scale():
    a, ha = init_model(200, [400], 64, 5, seed=3)
    b, hb = init_model(200, [400], 64, 5, seed=3)
    for p, q in zip(a.params() + ha.params(), b.params() + hb.params()):
        assert np.array_equal(p.value, q.value)
    w = a.layers[0][0].value
    assert w.std() == pytest.approx(np.sqrt(2 / 200), rel=0.02)
    assert (a.layers[0][1].value == 0).all()
    assert a.widths == [400, 64] and a.embed_dim == 64


def test_param_count_matches_init():
    backbone, head = init_model(32, [64, 64], 64, 20, seed=0)
    total = sum(p.value.size for p in backbone.params() + head.params())
    assert total == param_count(32, [64, 64], 64, 20)


def test_replace_head():
    backbone, head = init_model(8, [16], 16, 64, seed=0)
    new = replace_head(backbone, 5, seed=9)
    assert predict_logits(backbone, new, np.ones((3, 8))).shape == (3, 5)
    again = replace_head(backbone, 5, seed=9)
    assert np.array_equal(new.weight.value, again.weight.value)


def test_composition_is_exact():
    backbone, head = init_model(8, [16, 12], 10, 4, seed=1)
    x = np.random.default_rng(4).normal(size=(6, 8))
    assert np.array_equal(forward_logits(backbone, head, x).value,
                          head(forward_embed(backbone, x)).value)


def test_input_dimension_mismatch():
    backbone, _ = init_model(8, [16], 16, 4, seed=1)
    with pytest.raises(DimensionError):
        embed(backbone, np.ones((2, 7)))


def test_mask_labels():
    assert ParamGroupMask().label == "TT"
    assert ParamGroupMask(False, True).label == "FT"


def test_clone_is_independent():
    backbone, head = init_model(4, [5], 3, 2, seed=0)
    copy = backbone.clone()
    copy.layers[0][0].value[0, 0] += 1.0
    assert copy.layers[0][0].value[0, 0] != backbone.layers[0][0].value[0, 0]


def test_checkpoint_round_trip(tmp_path):
    backbone, head = init_model(6, [7, 5], 4, 3, seed=2)
    path = tmp_path / "ck.json"
    save_checkpoint(path, backbone, head, {"epochs_done": 4})
    b2, h2, extra = load_checkpoint(path)
    assert extra == {"epochs_done": 4}
    for p, q in zip(backbone.params() + head.params(), b2.params() + h2.params()):
        assert np.array_equal(p.value, q.value)


def test_checkpoint_bad_format(tmp_path):
    path = tmp_path / "ck.json"
    path.write_text('{"format": "other", "version": 1}')
    with pytest.raises(DataError):
        load_checkpoint(path)
