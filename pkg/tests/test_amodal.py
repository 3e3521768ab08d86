import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st

from amodalseg.amodal import AmodalHead
from gradcheck_util import assert_close, check_layer, double_copy, layers_with_params, projection


def test_shapes_and_attention_range():
    head = AmodalHead(64)
    pred = head(torch.randn(2, 64, 14, 14), torch.rand(2, 28, 28))
    assert pred.amodal_logits.shape == (2, 1, 28, 28)
    assert pred.attention_map.shape == (2, 1, 14, 14)
    assert ((pred.attention_map >= 0) & (pred.attention_map <= 1)).all()
    single = head(torch.randn(64, 14, 14), torch.rand(28, 28))
    assert single.amodal_logits.shape == (1, 28, 28)


def test_zero_prior_gives_bias_only_logits():
    torch.manual_seed(0)
    head = AmodalHead(16)
    pred = head(torch.randn(3, 16, 7, 7), torch.zeros(3, 14, 14))
    assert torch.count_nonzero(pred.spatial_attention) == 0
    bias_only = head.predict(torch.zeros(1, 16, 7, 7))
    assert torch.equal(pred.amodal_logits, bias_only.expand_as(pred.amodal_logits))


@given(s=st.floats(0.01, 1.0), seed=st.integers(0, 1000))
def test_prior_scaling_scales_spatial_attention(s, seed):
    g = torch.Generator().manual_seed(seed)
    head = AmodalHead(8)
    x = torch.randn(1, 8, 5, 5, generator=g)
    prior = torch.rand(1, 5, 5, generator=g)
    a = head(x, prior).spatial_attention
    b = head(x, prior * s).spatial_attention
    assert torch.allclose(b, a * s, rtol=1e-5, atol=1e-7)


def test_prior_is_resized_bilinearly_before_the_product():
    head = AmodalHead(8)
    x = torch.randn(1, 8, 7, 7)
    prior = torch.rand(1, 14, 14)
    pred = head(x, prior)
    small = F.interpolate(prior[:, None], size=(7, 7), mode="bilinear", align_corners=False)
    assert torch.allclose(pred.spatial_attention, pred.attention_map * small)


def test_prior_count_mismatch():
    with pytest.raises(ValueError):
        AmodalHead(8)(torch.randn(2, 8, 7, 7), torch.rand(3, 14, 14))


@pytest.mark.gradcheck
def test_gradient_wrt_prior_pixel():
    torch.manual_seed(1)
    head = double_copy(AmodalHead(16))
    x = torch.randn(1, 16, 6, 6, dtype=torch.float64)
    prior = torch.rand(1, 12, 12, dtype=torch.float64, requires_grad=True)
    head(x, prior).amodal_logits.sum().backward()
    analytic = prior.grad[0, 5, 7].item()
    h = 1e-3
    with torch.no_grad():
        up, down = prior.clone(), prior.clone()
        up[0, 5, 7] += h
        down[0, 5, 7] -= h
        numeric = (head(x, up).amodal_logits.sum() - head(x, down).amodal_logits.sum()).item() / (2 * h)
    assert analytic != 0.0
    assert numeric == pytest.approx(analytic, rel=1e-3)


@pytest.mark.gradcheck
def test_amodal_gradients_match_finite_differences():
    torch.manual_seed(0)
    head = double_copy(AmodalHead(64))
    x = torch.randn(2, 64, 6, 6, dtype=torch.float64)
    prior = torch.rand(2, 12, 12, dtype=torch.float64)
    w = projection((2, 1, 12, 12))

    def objective():
        return (head(x, prior).amodal_logits * w).mean()

    layers = layers_with_params(head)
    assert len(layers) == 8
    for name, layer in layers:
        pairs = check_layer(head, layer, objective, n_samples=20)
        assert len(pairs) >= 20, name
        assert_close(pairs, label=name)
