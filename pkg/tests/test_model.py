"""End-to-end architecture checks: shapes, head arithmetic, fusion identity."""

import numpy as np
import numpy.testing as npt
import pytest

from nodulemap.errors import ConfigError, MapUndefinedError, ShapeError
from nodulemap.layers import count_params
from nodulemap.model import ModelConfig, build_model
from nodulemap.tensor import no_grad


def _patch(channels, n=2, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, (n, channels, 32, 32)).astype(dtype)


def test_shape_trace_every_channel_count():
    for channels in (1, 3, 11, 21):
        model = build_model(ModelConfig(in_channels=channels, head="hesam"), seed=0)
        with no_grad():
            fp = model.forward(_patch(channels), training=False)
        trace = fp.shape_trace()
        assert trace["logits"] == (2, 2)
        assert trace["bottleneck"] == (2, 256, 4, 4)
        assert trace["unet_out"] == (2, 64, 32, 32)
        assert trace["final_features"] == (2, 256, 16, 16)
        assert trace["minor"] == (2, 256, 6, 6)
        assert trace["sam_vector"] == (2, 256)
        assert trace["hf_vector"] == (2, 256)


def test_geometry_without_residual_stack():
    model = build_model(ModelConfig(in_channels=3, head="sam", use_residual_stack=False), seed=0)
    assert model.stack is None
    assert (model.fcf_kernel, model.fcf_stride) == (7, 5)
    with no_grad():
        fp = model.forward(_patch(3), training=False)
    assert fp.unet_out.shape == (2, 256, 32, 32)
    assert fp.final_features.shape == (2, 256, 32, 32)
    assert fp.minor.shape == (2, 256, 6, 6)
    assert fp.hf_vector is None


def test_cam_head_has_no_minor_branch():
    model = build_model(ModelConfig(in_channels=1, head="cam"), seed=0)
    assert model.minor_fc is None
    with no_grad():
        fp = model.forward(_patch(1), training=False)
    assert fp.logits.shape == (2, 2)
    assert fp.minor is None and fp.sam_vector is None and fp.hf_vector is None


def test_sam_logits_match_explicit_loop():
    model = build_model(ModelConfig(in_channels=1, head="sam"), seed=4, dtype=np.float64)
    x = _patch(1, n=3, seed=1, dtype=np.float64)
    with no_grad():
        fp = model.forward(x, training=False)
    flat = fp.minor.data.reshape(3, 256, 36)
    w = model.minor_fc.w.data
    b = model.minor_fc.b.data
    h = np.zeros((3, 256))
    for n in range(3):
        for c in range(256):
            acc = b[c]
            for l in range(36):
                acc += w[c, l] * flat[n, c, l]
            h[n, c] = acc
    npt.assert_allclose(fp.sam_vector.data, h, rtol=1e-10, atol=1e-12)
    cw = model.classifier.w.data
    cb = model.classifier.b.data
    logits = np.zeros((3, 2))
    for n in range(3):
        for k in range(2):
            logits[n, k] = cb[k] + sum(h[n, c] * cw[c, k] for c in range(256))
    npt.assert_allclose(fp.logits.data, logits, rtol=1e-8, atol=1e-10)


@pytest.mark.parametrize("pool", ["gmp", "gap"])
def test_hesam_fusion_matches_explicit_loop(pool):
    config = ModelConfig(in_channels=3, head="hesam", hf_pool=pool)
    model = build_model(config, seed=5, dtype=np.float64)
    x = _patch(3, n=2, seed=2, dtype=np.float64)
    with no_grad():
        fp = model.forward(x, training=False)
    bott = fp.bottleneck.data
    d = np.zeros((2, 256))
    for n in range(2):
        for c in range(256):
            vals = bott[n, c].ravel()
            d[n, c] = vals.max() if pool == "gmp" else vals.mean()
    npt.assert_allclose(fp.hf_vector.data, d, rtol=1e-12, atol=0)
    fused = fp.sam_vector.data + d
    want = fused @ model.classifier.w.data + model.classifier.b.data
    npt.assert_allclose(fp.logits.data, want, rtol=1e-10, atol=1e-12)


def test_hesam_with_zeroed_hf_equals_sam_exactly():
    """Sum fusion with the high-level vector forced to zero is the plain
    minor-feature head; same seed gives the same weights, so the logits
    must agree to the last bit.
    """
    x = _patch(11, n=4, seed=3)
    sam = build_model(ModelConfig(in_channels=11, head="sam"), seed=7)
    hesam = build_model(ModelConfig(in_channels=11, head="hesam", fusion="sum"), seed=7)
    hesam.force_zero_hf = True
    with no_grad():
        a = sam.forward(x, training=False).logits.data
        b = hesam.forward(x, training=False).logits.data
    assert a.tobytes() == b.tobytes()


def test_concat_fusion_doubles_classifier_input():
    model = build_model(ModelConfig(in_channels=1, head="hesam", fusion="concat"), seed=0)
    assert model.classifier.w.shape == (512, 2)
    with no_grad():
        fp = model.forward(_patch(1), training=False)
    assert fp.logits.shape == (2, 2)
    with pytest.raises(MapUndefinedError):
        model.attention_weights()


def test_attention_weights_expose_classifier_matrix():
    for head in ("cam", "sam", "hesam"):
        model = build_model(ModelConfig(in_channels=1, head=head), seed=1)
        w = model.attention_weights()
        assert w.shape == (256, 2)
        npt.assert_array_equal(w, model.classifier.w.data)


def test_minor_fc_parameter_count():
    model = build_model(ModelConfig(in_channels=11, head="hesam"), seed=0)
    params = model.param_set()
    assert count_params(params, "minor_fc") == 256 * (36 + 1) == 9472


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(in_channels=7).validate()
    with pytest.raises(ConfigError):
        ModelConfig(head="grad").validate()
    with pytest.raises(ConfigError):
        ModelConfig(hf_pool="sum").validate()
    with pytest.raises(ConfigError):
        ModelConfig(fusion="stack").validate()
    with pytest.raises(ConfigError):
        ModelConfig(head="hesam", use_hf_branch=False).validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"in_channels": 11, "bogus": 1})
    with pytest.raises(ConfigError):
        build_model(ModelConfig(in_channels=9), seed=0)


def test_forward_rejects_wrong_input_shapes():
    model = build_model(ModelConfig(in_channels=3), seed=0)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((2, 1, 32, 32), np.float32))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((2, 3, 16, 16), np.float32))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((3, 32, 32), np.float32))


def test_same_seed_reproduces_weights_exactly():
    a = build_model(ModelConfig(in_channels=3), seed=11)
    b = build_model(ModelConfig(in_channels=3), seed=11)
    for (na, ta), (nb, tb) in zip(a.state_entries(), b.state_entries()):
        assert na == nb
        npt.assert_array_equal(ta, tb)


def test_eval_forward_is_repeatable_and_training_moves_buffers():
    model = build_model(ModelConfig(in_channels=1), seed=2)
    x = _patch(1, seed=9)
    with no_grad():
        l1 = model.forward(x, training=False).logits.data.copy()
        l2 = model.forward(x, training=False).logits.data.copy()
    npt.assert_array_equal(l1, l2)
    before = model.stack.block1.bn1.running_mean.copy()
    with no_grad():
        model.forward(x, training=True)
    assert not np.array_equal(model.stack.block1.bn1.running_mean, before)
