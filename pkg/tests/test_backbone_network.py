import json

import numpy as np
import pytest
import torch
from sklearn.base import clone

from cmfd.backbone import (
    ASPPDecoder,
    BackboneConfig,
    SelfDeepMatcher,
    SelfDeepMatchingNet,
    train_backbone,
)
from cmfd.base import NotFittedError


def tiny_cfg(**kw):
    return BackboneConfig(**{"T": 16, "extractor": "tiny", "tiny_channels": (8, 16, 16),
                             "aspp_channels": 8, "decoder_channels": 8, **kw})


@pytest.mark.parametrize("side", [256, 512])
def test_vgg_feature_maps_are_stride_eight(side):
    net = SelfDeepMatchingNet(BackboneConfig())
    with torch.no_grad():
        f3, f4, f5 = net.features(torch.zeros(1, 3, side, side))
    for f in (f3, f4, f5):
        assert f.shape[-2:] == (side // 8, side // 8)
    assert (f3.shape[1], f4.shape[1], f5.shape[1]) == (256, 512, 512)


@pytest.mark.parametrize("stride", [4, 8])
def test_tiny_feature_maps_follow_stride(stride):
    net = SelfDeepMatchingNet(tiny_cfg(tiny_stride=stride))
    assert net.cfg.stride == stride
    with torch.no_grad():
        feats = net.features(torch.zeros(1, 3, 64, 64))
        out = net(torch.zeros(1, 3, 64, 64))
    assert all(f.shape[-2:] == (64 // stride, 64 // stride) for f in feats)
    assert out.shape == (1, 2, 64, 64)
    with pytest.raises(ValueError):
        BackboneConfig(extractor="tiny", tiny_stride=2)


def test_decoder_norm_switch():
    def n_bn(module):
        return sum(isinstance(m, torch.nn.BatchNorm2d) for m in module.modules())

    assert n_bn(ASPPDecoder(12, norm=True)) == 7
    assert n_bn(ASPPDecoder(12, norm=False)) == 0
    net = SelfDeepMatchingNet(tiny_cfg(decoder_norm=False))
    assert n_bn(net.decoder) == 0


def test_indivisible_input_rejected():
    net = SelfDeepMatchingNet(BackboneConfig())
    with pytest.raises(ValueError):
        net.features(torch.zeros(1, 3, 250, 250))


def test_too_few_locations_for_t_rejected():
    net = SelfDeepMatchingNet(tiny_cfg(T=64))
    with pytest.raises(ValueError):
        net(torch.zeros(1, 3, 56, 56))  # 7x7 = 49 < 64


def test_decoder_shape_propagation():
    dec = ASPPDecoder(144)
    with torch.no_grad():
        out = dec(torch.randn(1, 144, 64, 64), out_size=(512, 512))
    assert out.shape == (1, 2, 512, 512)


def test_decoder_zero_input_zero_classifier_gives_half():
    dec = ASPPDecoder(48)
    torch.nn.init.zeros_(dec.classifier.weight)
    torch.nn.init.zeros_(dec.classifier.bias)
    with torch.no_grad():
        p = torch.softmax(dec(torch.zeros(1, 48, 8, 8), out_size=(64, 64)), dim=1)[:, 1]
    assert torch.all(p == 0.5)


def test_scores_in_unit_range_and_image_sized():
    net = SelfDeepMatchingNet(tiny_cfg()).eval()
    x = torch.rand(2, 3, 64, 96)
    with torch.no_grad():
        s = net.scores(x)
    assert s.shape == (2, 64, 96)
    assert float(s.min()) >= 0 and float(s.max()) <= 1


def test_forward_deterministic():
    net = SelfDeepMatchingNet(tiny_cfg()).eval()
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(net.scores(x), net.scores(x))


def test_attention_lambdas_start_at_zero_and_are_unshared():
    net = SelfDeepMatchingNet(tiny_cfg())
    assert net.attention_scales() == [0.0, 0.0, 0.0]
    params = [lv.attention.query.weight for lv in net.levels]
    assert params[0].data_ptr() != params[1].data_ptr() != params[2].data_ptr()


def test_attention_can_be_disabled():
    net = SelfDeepMatchingNet(tiny_cfg(attention=False))
    assert all(lv.attention is None for lv in net.levels)


@pytest.mark.parametrize("name", ["resnet50", "mobilenetv2", "shufflenetv2"])
def test_reserved_extractors_not_implemented(name):
    with pytest.raises(NotImplementedError):
        SelfDeepMatchingNet(BackboneConfig(extractor=name))


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        BackboneConfig(T=20)
    cfg = tiny_cfg(T=32)
    assert BackboneConfig.from_dict(json.loads(cfg.to_json())) == cfg


def _copy_sample(size=64):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 255, (size, size, 3), dtype=np.uint8)
    img[8:24, 36:52] = img[8:24, 8:24]
    mask = np.zeros((size, size), bool)
    mask[8:24, 8:24] = mask[8:24, 36:52] = True
    return img, mask


def test_overfit_single_sample_halves_loss():
    torch.manual_seed(0)
    net = SelfDeepMatchingNet(tiny_cfg())
    losses, lambdas = train_backbone(net, [_copy_sample()], epochs=200, batch_size=1,
                                     resize_range=(64, 64))
    assert len(losses) == 200
    assert np.mean(losses[-10:]) < 0.5 * losses[0]
    assert any(abs(v) > 0 for v in lambdas[-1])


def test_training_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train_backbone(SelfDeepMatchingNet(tiny_cfg()), [], epochs=1)


def test_training_aborts_on_nan_loss():
    net = SelfDeepMatchingNet(tiny_cfg())
    with torch.no_grad():
        net.decoder.classifier.bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError, match="non-finite loss"):
        train_backbone(net, [_copy_sample()], epochs=1, batch_size=1, resize_range=(64, 64))


def test_training_resizes_mixed_sizes():
    a = _copy_sample(64)
    b = (np.zeros((40, 48, 3), np.uint8), np.zeros((40, 48), bool))
    losses, _ = train_backbone(SelfDeepMatchingNet(tiny_cfg()), [a, b], epochs=1, batch_size=2,
                               resize_range=(32, 48))
    assert len(losses) == 1 and np.isfinite(losses[0])


def test_estimator_api(tmp_path):
    est = SelfDeepMatcher(T=16, extractor="tiny", tiny_channels=(8, 16, 16), aspp_channels=8,
                          decoder_channels=8, epochs=1, batch_size=2, resize_range=(64, 64))
    with pytest.raises(NotFittedError):
        est.predict_proba([np.zeros((64, 64, 3), np.uint8)])
    assert clone(est).get_params() == est.get_params()
    img, mask = _copy_sample()
    est.fit([img, img], [mask, mask])
    assert len(est.loss_trace_) == 1
    (p,) = est.predict_proba([img])
    assert p.shape == (64, 64) and p.dtype == np.float64
    assert est.predict([img])[0].dtype == bool
    assert 0.0 <= est.score([img], [mask]) <= 1.0
    est.save(tmp_path / "m.pt")
    loaded = SelfDeepMatcher.load(tmp_path / "m.pt")
    assert loaded.get_params() == est.get_params()
    np.testing.assert_array_equal(loaded.predict_proba([img])[0], p)


def test_estimator_fit_length_mismatch():
    with pytest.raises(ValueError):
        SelfDeepMatcher(extractor="tiny", T=16).fit([np.zeros((64, 64, 3), np.uint8)], [])
