import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundingdesk import autodiff as ad
from groundingdesk.autodiff import Tensor
from groundingdesk.autodiff.gradcheck import check_gradients
from groundingdesk.errors import ConfigError, DataError, ShapeError
from groundingdesk.model import GroundingDetector, ModelConfig
from groundingdesk.model.detector import (
    ContrastiveHead,
    QueryState,
    bias_init,
    contrastive_embedding,
    selection_scores,
    top_k_indices,
)
from groundingdesk.text import Vocabulary, tokenize

DESK = dict(num_query=8, vocab_size=16)


def desk_inputs(seed=1):
    vocab = Vocabulary.build(["red box. blue ball."])
    cap = tokenize("red box. blue ball.", vocab)
    px = np.random.default_rng(seed).random((3, 32, 32))
    return px, cap


@pytest.fixture(scope="module")
def model():
    return GroundingDetector(ModelConfig(**DESK))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=18, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(num_query=0)
    with pytest.raises(ConfigError):
        ModelConfig(bias_prior=1.0)
    assert ModelConfig.from_dict(ModelConfig(seed=3).to_dict()) == ModelConfig(seed=3)


def test_full_scale_config_is_valid():
    cfg = ModelConfig(num_query=900, n_enhancer_layers=6, n_decoder_layers=6, d_model=256, n_heads=8)
    assert cfg.num_query == 900


def test_image_token_counts(model):
    px, _ = desk_inputs()
    feats = model.encode_image(px)
    assert feats.spatial_shapes == [(8, 8), (4, 4)]
    assert feats.n_tokens == 80 and feats.tokens.shape == (80, 16)
    assert feats.reference_points.min() > 0 and feats.reference_points.max() < 1
    assert model.config.min_image_size == 8


def test_image_too_small():
    with pytest.raises(ShapeError):
        GroundingDetector(ModelConfig(**DESK)).encode_image(np.zeros((3, 4, 4)))


def test_zero_image_with_zero_projection_gives_zero_features():
    m = GroundingDetector(ModelConfig(**DESK))
    for proj in m.image_encoder.proj:
        proj.zero_()
    assert not m.encode_image(np.zeros((3, 32, 32))).tokens.data.any()


def test_image_features_deterministic():
    px, _ = desk_inputs()
    a = GroundingDetector(ModelConfig(**DESK)).encode_image(px).tokens.data
    b = GroundingDetector(ModelConfig(**DESK)).encode_image(px).tokens.data
    assert a.tobytes() == b.tobytes()


def test_text_single_token(model):
    cap = tokenize("red", Vocabulary.build(["red"]))
    assert model.encode_text(cap).shape == (1, 16)


def test_text_out_of_vocab_id(model):
    cap = tokenize("red", Vocabulary.build(["red"]))
    cap.token_ids = [99]
    with pytest.raises(DataError):
        model.encode_text(cap)


def test_text_permutation_equivariance_without_positions():
    m = GroundingDetector(ModelConfig(text_positional=False, **DESK))
    v = Vocabulary.build(["red box blue"])
    a = tokenize("red box blue", v)
    b = tokenize("blue box red", v)
    fa, fb = m.encode_text(a).data, m.encode_text(b).data
    assert np.allclose(fa[[2, 1, 0]], fb, atol=1e-12)


def test_enhancer_preserves_shapes_and_gradients(model):
    px, cap = desk_inputs()
    img, txt = model.encode_image(px), model.encode_text(cap)
    layer = model.enhancer[0]
    out_img, out_txt = layer(img, txt)
    assert out_img.tokens.shape == img.tokens.shape and out_txt.shape == txt.shape
    probe = np.random.default_rng(0).normal(size=txt.shape)
    w = layer.bi_attn.txt_out.weight
    assert check_gradients(lambda: (layer(img, txt)[1] * probe).sum(), [w]) <= 1e-4


def test_zero_projections_make_layers_identity():
    m = GroundingDetector(ModelConfig(**DESK))
    m.zero_output_projections()
    px, cap = desk_inputs()
    img, txt = m.encode_image(px), m.encode_text(cap)
    for layer in m.enhancer:
        out_img, out_txt = layer(img, txt)
        assert np.array_equal(out_img.tokens.data, img.tokens.data)
        assert np.array_equal(out_txt.data, txt.data)
    state, _, _ = m.select_queries(img, txt)
    for layer in m.decoder:
        layer.box_delta.output.zero_()
        new = layer(state, m.query_pos(state.anchors), img, txt)
        assert np.array_equal(new.content.data, state.content.data)
        assert np.allclose(new.anchors.data, state.anchors.data, rtol=0, atol=1e-12)


def test_refined_anchors_stay_in_unit_box(model):
    rng = np.random.default_rng(0)
    layer = model.decoder[0]
    for _ in range(1000):
        c = Tensor(rng.normal(0, 5, (4, 16)))
        a = Tensor(rng.uniform(1e-6, 1 - 1e-6, (4, 4)))
        out = layer.refine(c, a).data
        assert np.all(out > 0) and np.all(out < 1)


def test_query_selection_tie_break():
    assert top_k_indices(np.array([0.2, 0.9, 0.9]), 2).tolist() == [1, 2]
    assert top_k_indices(np.array([0.5, 0.1, 0.5, 0.7]), 4).tolist() == [3, 0, 2, 1]
    with pytest.raises(ConfigError):
        top_k_indices(np.zeros(3), 4)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_cosine_selection_scale_invariant(scale, seed):
    rng = np.random.default_rng(seed)
    mem, txt = rng.normal(size=(20, 8)), rng.normal(size=(5, 8))
    a = set(top_k_indices(selection_scores(mem, txt, "cosine"), 6).tolist())
    b = set(top_k_indices(selection_scores(mem, txt * scale, "cosine"), 6).tolist())
    assert a == b


def test_num_query_above_tokens_is_config_error():
    m = GroundingDetector(ModelConfig(num_query=81, vocab_size=16))
    px, cap = desk_inputs()
    with pytest.raises(ConfigError):
        m(px, cap)


def test_contrastive_embedding_cases():
    assert np.all(contrastive_embedding(Tensor(np.zeros((2, 4))), Tensor(np.ones((3, 4))), -1.5).data == -1.5)
    out = contrastive_embedding(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))), 0.0).data
    assert out.tolist() == [[2.0]]
    with pytest.raises(ShapeError):
        contrastive_embedding(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 3))), 0.0)


def test_bias_init_value():
    assert math.isclose(bias_init(0.01), -math.log(99), rel_tol=1e-15)
    assert round(bias_init(0.01), 4) == -4.5951


def expected_sigmoid(bias, std):
    """E[sigmoid(bias + std * Z)] for standard normal Z, by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(80)
    return float((w / (1 + np.exp(-(bias + std * x)))).sum() / math.sqrt(2 * math.pi))


def test_bias_prior_activation_without_features_is_prior():
    head = ContrastiveHead(0.01)
    out = ad.sigmoid(head(Tensor(np.zeros((5, 16))), Tensor(np.ones((3, 16))))).data
    assert np.allclose(out, 0.01, rtol=1e-14, atol=0)


def test_bias_prior_mean_activation_matches_quadrature():
    # the head scales by 1/sqrt(d), so unit-variance features give unit-variance logit noise
    rng = np.random.default_rng(0)
    head = ContrastiveHead(0.01)
    logits = head(Tensor(rng.normal(size=(900, 16))), Tensor(rng.normal(size=(256, 16))))
    mean = float(ad.sigmoid(logits).data.mean())
    assert abs(mean - expected_sigmoid(bias_init(0.01), 1.0)) < 5e-4


def test_forward_shapes_on_desk_config(model):
    px, cap = desk_inputs()
    pred = model(px, cap)
    assert len(pred.supervision_sets) == model.config.n_decoder_layers + 1
    for s in pred.decoder:
        assert s.logits.shape == (8, 6) and s.boxes.shape == (8, 4)
        assert np.all(s.boxes.data > 0) and np.all(s.boxes.data < 1)
    assert pred.encoder.logits.shape == (8, 6)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([8, 16]), st.sampled_from([1, 2, 4]), st.integers(0, 2), st.integers(1, 2),
       st.integers(1, 6), st.integers(1, 3), st.booleans())
def test_shape_contracts_across_configs(d, heads, n_enh, n_dec, nq, levels, mask):
    cfg = ModelConfig(d_model=d, n_heads=heads, n_enhancer_layers=n_enh, n_decoder_layers=n_dec,
                      num_query=nq, n_feature_levels=levels, vocab_size=16, mask_cross_phrase=mask)
    px, cap = desk_inputs()
    pred = GroundingDetector(cfg)(px, cap)
    assert len(pred.supervision_sets) == n_dec + 1
    assert all(s.logits.shape == (nq, len(cap)) for s in pred.supervision_sets)


def test_end_to_end_deterministic():
    px, cap = desk_inputs()
    a = GroundingDetector(ModelConfig(**DESK))(px, cap).final
    b = GroundingDetector(ModelConfig(**DESK))(px, cap).final
    assert a.logits.data.tobytes() == b.logits.data.tobytes()
    assert a.boxes.data.tobytes() == b.boxes.data.tobytes()


def test_state_dict_round_trip(model):
    other = GroundingDetector(ModelConfig(seed=5, **DESK))
    other.load_state_dict(model.state_dict())
    px, cap = desk_inputs()
    assert np.array_equal(other(px, cap).final.logits.data, model(px, cap).final.logits.data)


def test_query_state_content_starts_at_zero(model):
    px, cap = desk_inputs()
    img, txt = model.encode_image(px), model.encode_text(cap)
    state, enc, idx = model.select_queries(img, txt)
    assert isinstance(state, QueryState) and not state.content.data.any()
    assert len(set(idx.tolist())) == 8
