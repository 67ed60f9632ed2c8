import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from featsent.embedding import CPModule, EmbeddingLayer, cp_apply, cp_param_count, embed_series, init_embedding
from featsent.errors import ShapeError

RESNET_DIMS = [(64, 32, 32), (64, 32, 32), (128, 16, 16), (256, 8, 8), (512, 4, 4)]


def _zero_biases(emb):
    for cp in emb.cps:
        torch.nn.init.zeros_(cp.conv.bias)
    return emb


def test_resnet_cascade_channels():
    emb = init_embedding(RESNET_DIMS, seed=0)
    assert len(emb.cps) == 4
    assert [(cp.conv.in_channels, cp.conv.out_channels) for cp in emb.cps] == [(64, 64), (64, 128), (128, 256), (256, 512)]


def test_single_tap_is_plain_average_pooling():
    emb = init_embedding([(8, 4, 4)], seed=0)
    x = torch.rand(3, 8, 4, 4)
    assert len(emb.cps) == 0
    assert torch.allclose(embed_series(emb, [x])[:, 0], x.mean(dim=(2, 3)))


def test_upsampling_and_bad_channels_rejected():
    with pytest.raises(ValueError, match="upsample"):
        init_embedding([(8, 4, 4), (8, 8, 8)])
    with pytest.raises(ValueError):
        CPModule((0, 4, 4), (8, 2, 2))


def test_cp_apply_shapes():
    emb = init_embedding(RESNET_DIMS, seed=0)
    assert cp_apply(emb.cps[1], torch.rand(4, 64, 32, 32)).shape == (4, 128, 16, 16)
    with pytest.raises(ShapeError):
        cp_apply(emb.cps[1], torch.rand(4, 64, 31, 32))


def test_zero_input_zero_output():
    emb = _zero_biases(init_embedding(RESNET_DIMS[:3], seed=0))
    assert torch.count_nonzero(cp_apply(emb.cps[0], torch.zeros(2, 64, 32, 32))) == 0
    maps = [torch.zeros((2,) + d) for d in RESNET_DIMS[:3]]
    assert torch.count_nonzero(embed_series(emb, maps)) == 0


def test_resnet_sentence_shape_and_last_word_average():
    emb = init_embedding(RESNET_DIMS, seed=0)
    maps = [torch.rand((4,) + d) for d in RESNET_DIMS]
    maps[-1] = torch.full((4, 512, 4, 4), 3.0)
    s = embed_series(emb, maps)
    assert s.shape == (4, 5, 512)
    assert torch.all(s[:, -1] == 3.0)


def test_average_pooling_exactness():
    emb = init_embedding([(2, 2, 3)], seed=0)
    values = torch.tensor([[0.5, 1.0, 2.0], [4.0, -1.0, 0.25]])
    x = torch.stack([values, 2 * values])[None]
    s = embed_series(emb, [x])
    assert abs(s[0, 0, 0].item() - values.mean().item()) < 1e-6
    assert abs(s[0, 0, 1].item() - 2 * values.mean().item()) < 1e-6


def test_module_reuse_and_parameter_count():
    emb = init_embedding(RESNET_DIMS, seed=0)
    assert sum(p.numel() for p in emb.parameters()) == cp_param_count(RESNET_DIMS)


def test_words_depend_on_shared_modules():
    emb = init_embedding([(4, 8, 8), (6, 4, 4), (5, 2, 2)], seed=0)
    maps = [torch.rand(2, 4, 8, 8), torch.rand(2, 6, 4, 4), torch.rand(2, 5, 2, 2)]
    base = emb(maps)
    with torch.no_grad():
        emb.cps[1].conv.weight.add_(0.5)
    moved = emb(maps)
    # CP_2 feeds words 1 and 2; word 3 is untouched
    assert not torch.equal(base[:, 0], moved[:, 0]) and not torch.equal(base[:, 1], moved[:, 1])
    assert torch.equal(base[:, 2], moved[:, 2])


@st.composite
def dims_lists(draw):
    """Up to 6 taps with channels <= 32 and spatial sizes <= 16 that never grow."""
    w = h = 16
    dims = []
    for _ in range(draw(st.integers(1, 6))):
        w, h = draw(st.integers(1, w)), draw(st.integers(1, h))
        dims.append((draw(st.integers(1, 32)), w, h))
    return dims


@settings(max_examples=40, deadline=None)
@given(dims_lists())
def test_every_word_has_length_c_L(dims):
    emb = init_embedding(dims, seed=0)
    s = emb([torch.rand((2,) + d) for d in dims])
    assert s.shape == (2, len(dims), dims[-1][0])


def test_gradient_wrt_kernels_double_precision():
    emb = init_embedding([(2, 4, 4), (3, 2, 2)], seed=0).double()
    x0, x1 = torch.rand(1, 2, 4, 4, dtype=torch.float64), torch.rand(1, 3, 2, 2, dtype=torch.float64)
    weight = emb.cps[0].conv.weight

    def f(w):
        with torch.no_grad():
            weight.copy_(w)
        return emb([x0, x1]).sum().item()

    w0 = weight.detach().clone()
    out = emb([x0, x1]).sum()
    (g,) = torch.autograd.grad(out, [weight])
    h = 1e-3
    for idx in [(0, 0, 1, 1), (2, 1, 0, 2), (1, 0, 2, 0)]:
        wp, wm = w0.clone(), w0.clone()
        wp[idx] += h
        wm[idx] -= h
        fd = (f(wp) - f(wm)) / (2 * h)
        assert abs(fd - g[idx].item()) <= 1e-3 * max(abs(fd), abs(g[idx].item()), 1e-8)
    f(w0)


def test_gradcheck_cascade():
    emb = init_embedding([(2, 4, 4), (3, 3, 3), (2, 2, 2)], seed=1).double()
    maps = [torch.rand(1, 2, 4, 4, dtype=torch.float64, requires_grad=True),
            torch.rand(1, 3, 3, 3, dtype=torch.float64, requires_grad=True),
            torch.rand(1, 2, 2, 2, dtype=torch.float64, requires_grad=True)]
    assert torch.autograd.gradcheck(lambda a, b, c: emb([a, b, c]), maps, eps=1e-6, atol=1e-5, rtol=1e-3)


def test_plan_mismatch():
    emb = EmbeddingLayer([(2, 4, 4), (3, 2, 2)])
    with pytest.raises(ShapeError):
        emb([torch.rand(1, 2, 4, 4)])
    with pytest.raises(ShapeError):
        emb([torch.rand(1, 2, 4, 4), torch.rand(1, 3, 3, 2)])
