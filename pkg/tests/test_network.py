import json

import numpy as np
import pytest

from rkd import tensor as T
from rkd.netspec import LayerSpec, NetworkSpec, SpecError, infer_shapes, load_spec, reference_spec
from rkd.network import Adapter, adapt_feature, build_network, checksum, forward_with_taps, identity_adapter

from oracles import pixelwise_channel_matmul


def _tiny_spec(k=2, width=4, classes=3):
    blocks = [[LayerSpec("conv", width, 3, 1, 1), LayerSpec("batchnorm"), LayerSpec("relu")]]
    for i in range(1, k):
        blocks.append([LayerSpec("residual-block", width * 2**i, 3, 2, 1, "projection")])
    return NetworkSpec((1, 8, 8), blocks, classes, "tiny")


@pytest.mark.parametrize("name", ["resnet18", "resnet34"])
def test_imagenet_taps(name):
    rep = infer_shapes(load_spec(name))
    assert [t[1:] for t in rep.taps] == [(56, 56), (28, 28), (14, 14), (7, 7)]
    assert [t[0] for t in rep.taps] == [64, 128, 256, 512]


def test_tinyres8_taps():
    rep = infer_shapes(load_spec("tinyres8"))
    assert rep.taps == [(16, 32, 32), (32, 16, 16), (64, 8, 8), (128, 4, 4)]
    assert rep.classifier_in == 128


@pytest.mark.parametrize("name", ["resnet18", "resnet34", "tinyres8", "tinyres16"])
def test_shipped_specs_match_reference(name):
    assert load_spec(name) == reference_spec(name)
    assert NetworkSpec.from_dict(json.loads(load_spec(name).to_json())) == load_spec(name)


def test_single_block_has_one_tap_equal_to_prepool_feature():
    net = build_network(_tiny_spec(k=1), seed=0)
    x = np.random.default_rng(0).standard_normal((2, 1, 8, 8))
    taps, logits = net.forward_with_taps(x, "eval")
    assert len(taps) == 1
    np.testing.assert_allclose(logits.data, net.classify(taps[0]).data)


def test_identity_shortcut_width_change_is_rejected_with_layer_name():
    spec = NetworkSpec((1, 8, 8), [[LayerSpec("conv", 4, 3, 1, 1)], [LayerSpec("residual-block", 8, 3, 1, 1,
                                                                               "identity")]], 2)
    with pytest.raises(SpecError, match="b1.l0"):
        infer_shapes(spec)


def test_oversized_kernel_names_layer():
    spec = NetworkSpec((1, 4, 4), [[LayerSpec("conv", 2, 7, 1, 0)]], 2)
    with pytest.raises(SpecError, match="b0.l0"):
        build_network(spec)


def test_unknown_kind_rejected():
    with pytest.raises(SpecError):
        LayerSpec("dropout")


def test_taps_match_inferred_shapes_and_count():
    spec = _tiny_spec(k=3)
    net = build_network(spec, seed=1)
    taps, logits = forward_with_taps(net, np.zeros((5, 1, 8, 8)), "train")
    assert len(taps) == spec.num_blocks
    assert [t.shape[1:] for t in taps] == net.tap_shapes
    assert logits.shape == (5, 3)
    np.testing.assert_allclose(T.softmax(logits).data.sum(axis=1), 1.0, atol=1e-6)


def test_wrong_input_shape_raises():
    net = build_network(_tiny_spec(), seed=0)
    with pytest.raises(ValueError, match="does not match"):
        net.features(np.zeros((1, 2, 8, 8)))


def test_duplicated_sample_gives_identical_rows_in_eval():
    net = build_network(_tiny_spec(k=3), seed=2)
    x = np.random.default_rng(1).standard_normal((4, 1, 8, 8))
    x[3] = x[1]
    taps, logits = net.forward_with_taps(x, "eval")
    for t in taps:
        np.testing.assert_array_equal(t.data[1], t.data[3])
    np.testing.assert_array_equal(logits.data[1], logits.data[3])


def test_build_is_seeded():
    a, b, c = (build_network(_tiny_spec(), seed=s) for s in (5, 5, 6))
    assert checksum(a) == checksum(b) != checksum(c)


def test_eval_forward_is_pure():
    net = build_network(_tiny_spec(), seed=0)
    x = np.random.default_rng(0).standard_normal((3, 1, 8, 8))
    before = checksum(net)
    first = net.forward_with_taps(x, "eval")[1].data.copy()
    assert net.forward_with_taps(x, "eval")[1].data.tobytes() == first.tobytes()
    assert checksum(net) == before


def test_train_mode_updates_running_stats_only():
    net = build_network(_tiny_spec(), seed=0)
    params = checksum(net.parameters())
    buffers = checksum([T.Tensor(b) for _, b in net.named_buffers()])
    net.forward_with_taps(np.random.default_rng(0).standard_normal((4, 1, 8, 8)), "train")
    assert checksum(net.parameters()) == params
    assert checksum([T.Tensor(b) for _, b in net.named_buffers()]) != buffers


def test_batchnorm_switch_removes_normalization():
    net = build_network(_tiny_spec(), seed=0, batchnorm=False)
    assert net.named_buffers() == []


def test_classifier_width_matches_final_tap():
    net = build_network(load_spec("tinyres16"), seed=0)
    assert net.classifier.weight.shape == (10, 128)


# -- adapters -------------------------------------------------------------------


def test_identity_adapter_passes_through():
    tap = T.Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    assert adapt_feature(tap, identity_adapter([3]), 1) is tap


def test_adapter_maps_to_teacher_width():
    ad = Adapter([2], [3], seed=0)
    out = adapt_feature(T.Tensor(np.ones((4, 2, 5, 6))), ad, 1)
    assert out.shape == (4, 3, 5, 6)


def test_adapter_matches_pixelwise_oracle():
    ad = Adapter([5, 4], [7, 4], seed=3, dtype=np.float64)
    x = np.random.default_rng(4).standard_normal((2, 5, 6, 3))
    conv = ad.convs[0]
    ref = pixelwise_channel_matmul(x, conv.weight.data.reshape(7, 5), conv.bias.data)
    got = ad(T.Tensor(x), 1).data
    assert np.linalg.norm(got - ref) / np.linalg.norm(ref) < 1e-6
    assert ad.convs[1] is None


def test_adapter_level_out_of_range():
    ad = Adapter([2, 2], [3, 3])
    with pytest.raises(IndexError):
        ad(T.Tensor(np.ones((1, 2, 2, 2))), 3)
    with pytest.raises(IndexError):
        ad(T.Tensor(np.ones((1, 2, 2, 2))), 0)


def test_adapter_channel_mismatch():
    with pytest.raises(ValueError, match="level 1"):
        Adapter([2], [3])(T.Tensor(np.ones((1, 4, 2, 2))), 1)


def test_zero_init_adapter_outputs_zero():
    ad = Adapter([4], [6], seed=0, zero_init=True)
    out = ad(T.Tensor(np.random.default_rng(0).standard_normal((2, 4, 3, 3))), 1)
    assert np.all(out.data == 0)


def test_adapter_between_models():
    teacher = build_network(load_spec("tinyres16"))
    student = build_network(load_spec("tinyres8").with_widths({(0, 0): 8, (0, 3): 8}))
    ad = Adapter.between(student, teacher)
    assert ad.out_channels == teacher.tap_channels
    assert ad.convs[0] is not None and ad.convs[1] is None
