import numpy as np
import pytest

from neuronet import oracles
from neuronet.errors import ConfigurationError, InputError
from neuronet.graph import (DecoderSpec, EncoderConfig, FCNBaseline, ModelConfig, build_model, forward,
                            reference_config, tap_shapes)

SMALL = EncoderConfig(3, 2, (1, 2, 2), (4, 6, 8))


def small_config(*decoders, seed=3):
    decs = [DecoderSpec(n, c) for n, c in decoders] or [DecoderSpec("a", 3)]
    return ModelConfig(SMALL, decs, seed)


def test_taps_and_outputs_have_expected_shapes(rng):
    params = build_model(small_config(("a", 3), ("b", 5)))
    image = rng.standard_normal((1, 8, 12, 16)).astype(np.float32)
    outputs, taps = forward(params, image, return_taps=True)
    assert [t.shape for t in taps] == [(4, 8, 12, 16), (6, 4, 6, 8), (8, 2, 3, 4)]
    assert tap_shapes(SMALL, (8, 12, 16)) == [t.shape for t in taps]
    assert [o.shape for o in outputs] == [(3, 8, 12, 16), (5, 8, 12, 16)]


def test_reference_tap_algebra():
    cfg = reference_config()
    assert tap_shapes(cfg.encoder, (128,) * 3) == [
        (16, 128, 128, 128), (32, 64, 64, 64), (64, 32, 32, 32), (128, 16, 16, 16)]
    assert cfg.protocols == ["spm_tissue", "fsl_first", "malp_em", "malp_em_tissue", "fsl_fast"]


@pytest.mark.parametrize("n_scales,filters,strides", [(3, (4, 6, 8), (1, 2, 2)), (2, (5, 7), (2, 1))])
def test_parameter_count_matches_closed_form(n_scales, filters, strides):
    enc = EncoderConfig(n_scales, 2, strides, filters)
    params = build_model(ModelConfig(enc, [DecoderSpec("a", 3), DecoderSpec("b", 7)]))
    assert params.count() == oracles.parameter_count(n_scales, 2, strides, filters, [3, 7])


def test_reference_parameter_count():
    params = build_model(reference_config())
    assert params.count() == oracles.parameter_count(4, 2, (1, 2, 2, 2), (16, 32, 64, 128), [4, 16, 139, 6, 4])


def test_single_decoder_equals_standalone_baseline(rng):
    cfg = small_config(("only", 4), seed=11)
    model = build_model(cfg)
    baseline = FCNBaseline(SMALL, DecoderSpec("only", 4), seed=11)
    image = rng.standard_normal((1, 8, 8, 8)).astype(np.float32)
    for mode in ("infer", "train"):
        a = forward(model, image, mode=mode)[0].data
        b = baseline.forward(image, mode=mode).data
        assert a.tobytes() == b.tobytes()


def test_initialisation_is_seeded():
    a = build_model(small_config(seed=5))
    b = build_model(small_config(seed=5))
    c = build_model(small_config(seed=6))
    assert all(np.array_equal(a.tensors[k].data, b.tensors[k].data) for k in a.tensors)
    assert not np.array_equal(a.tensors["encoder.init.kernel"].data, c.tensors["encoder.init.kernel"].data)


def test_adding_a_decoder_leaves_encoder_init_unchanged():
    a = build_model(small_config(("a", 3)))
    b = build_model(small_config(("a", 3), ("b", 4)))
    for name, t in a.tensors.items():
        np.testing.assert_array_equal(t.data, b.tensors[name].data)


def test_input_extent_must_be_multiple_of_total_stride():
    params = build_model(small_config())
    with pytest.raises(InputError, match="multiple of 4"):
        forward(params, np.zeros((1, 8, 8, 10), np.float32))


def test_infer_mode_is_pure(rng):
    params = build_model(small_config())
    image = rng.standard_normal((1, 8, 8, 8)).astype(np.float32)
    first = forward(params, image)[0].data
    forward(params, image, mode="train")
    second = forward(params, image)[0].data
    assert not np.array_equal(first, second)          # running stats moved in train mode
    np.testing.assert_array_equal(second, forward(params, image)[0].data)


class TestConfig:
    def test_duplicate_protocols_rejected(self):
        with pytest.raises(ConfigurationError, match="duplicate"):
            small_config(("a", 3), ("a", 4))

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(3, 2, (1, 2), (4, 6, 8))

    def test_too_few_classes(self):
        with pytest.raises(ConfigurationError):
            DecoderSpec("a", 1)

    def test_round_trip_and_unknown_keys(self):
        cfg = small_config(("a", 3), ("b", 5))
        assert ModelConfig.from_dict(cfg.to_dict()).canonical_json() == cfg.canonical_json()
        data = cfg.to_dict()
        data["encoder"]["depth"] = 3
        with pytest.raises(ConfigurationError, match="depth"):
            ModelConfig.from_dict(data)
