"""Word embedding of hidden-layer feature maps.

Feature map ``i`` of shape ``(c_i, w_i, h_i)`` is pushed through the cascade
of convolution-pooling modules ``CP_i .. CP_{L-1}`` until it has the shape of
the last tap, then global-average-pooled into a word of length ``c_L``. The
cascade is shared by all taps, so only ``L - 1`` modules exist.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteError, ShapeError
from .utils import seeded


class CPModule(nn.Module):
    """3x3 convolution (stride 1, padding 1) + ReLU + adaptive max pooling."""

    def __init__(self, in_dims, out_dims):
        super().__init__()
        self.in_dims = tuple(int(d) for d in in_dims)
        self.out_dims = tuple(int(d) for d in out_dims)
        cin, cout = self.in_dims[0], self.out_dims[0]
        if cin <= 0 or cout <= 0:
            raise ValueError(f"channel counts must be positive, got {cin} -> {cout}")
        if self.out_dims[1] > self.in_dims[1] or self.out_dims[2] > self.in_dims[2]:
            raise ValueError(f"CP module cannot upsample {self.in_dims[1:]} -> {self.out_dims[1:]}")
        self.conv = nn.Conv2d(cin, cout, kernel_size=3, stride=1, padding=1)
        self.pool = nn.AdaptiveMaxPool2d(self.out_dims[1:])
        nn.init.kaiming_uniform_(self.conv.weight, nonlinearity="relu")
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        return self.pool(F.relu(self.conv(x)))


class EmbeddingLayer(nn.Module):
    def __init__(self, dims):
        super().__init__()
        self.dims = [tuple(int(v) for v in d) for d in dims]
        if not self.dims:
            raise ValueError("embedding needs at least one tap")
        self.cps = nn.ModuleList(CPModule(self.dims[i], self.dims[i + 1]) for i in range(len(self.dims) - 1))

    @property
    def L(self):
        return len(self.dims)

    @property
    def word_dim(self):
        return self.dims[-1][0]

    def forward(self, maps):
        if len(maps) != self.L:
            raise ShapeError(f"expected {self.L} feature maps, got {len(maps)}")
        words = []
        for l, fmap in enumerate(maps):
            if tuple(fmap.shape[1:]) != self.dims[l]:
                raise ShapeError(f"feature map {l} has shape {tuple(fmap.shape[1:])}, expected {self.dims[l]}")
            h = fmap
            for cp in self.cps[l:]:
                h = cp(h)
            words.append(h.mean(dim=(2, 3)))
        return torch.stack(words, dim=1)


def init_embedding(plan, seed=0):
    dims = plan.dims if hasattr(plan, "dims") else plan
    with seeded(seed):
        return EmbeddingLayer(dims)


def cp_apply(cp, fmap):
    if tuple(fmap.shape[1:]) != cp.in_dims:
        raise ShapeError(f"CP module expects (., {cp.in_dims}), got {tuple(fmap.shape)}")
    return cp(fmap)


def embed_series(emb, fs):
    """Sentence of shape ``(batch, L, c_L)`` for a feature series."""
    sentence = emb(list(fs))
    if not torch.isfinite(sentence).all():
        raise NonFiniteError("non-finite value in embedded sentence")
    return sentence


def cp_param_count(dims):
    """Closed form: sum over CP modules of 9*c_i*c_{i+1} + c_{i+1}."""
    return sum(9 * dims[i][0] * dims[i + 1][0] + dims[i + 1][0] for i in range(len(dims) - 1))


def embedding_flops(dims):
    """Multiply-accumulates of one embedding pass; grows as O(L^2) in the cascade length."""
    total = 0
    for l in range(len(dims)):
        for q in range(l, len(dims) - 1):
            cin, w, h = dims[q]
            total += 9 * cin * dims[q + 1][0] * w * h
    return total

