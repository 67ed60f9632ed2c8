"""TextCNN sentiment analyzer and the full feature-map detector.

A sentence of ``L`` words (each of length ``c_L``) is convolved with ``M``
kernels for every n-gram size, each kernel output is reduced by global max
pooling, and the concatenated pooled vector goes through dropout and a
two-way fully-connected layer (benign, adversarial).
"""
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .classifiers import TapPlan
from .embedding import EmbeddingLayer, cp_param_count, embed_series, init_embedding
from .errors import NonFiniteError, ShapeError
from .serialization import load_module_state, read_manifest, save_module
from .utils import seeded

BENIGN, ADVERSARIAL = 0, 1


@dataclass
class AnalyzerConfig:
    word_dim: int
    words_per_sentence: int
    gram_set: tuple = (1, 2, 3, 4)
    instances_per_gram: int = 100
    dropout_rate: float = 0.5

    def __post_init__(self):
        self.gram_set = tuple(sorted(set(int(g) for g in self.gram_set)))
        if not self.gram_set:
            raise ValueError("gram_set must not be empty")
        if min(self.gram_set) < 1:
            raise ValueError("n-gram sizes must be >= 1")
        if max(self.gram_set) > self.words_per_sentence:
            raise ValueError(
                f"{max(self.gram_set)}-gram kernel is longer than the {self.words_per_sentence}-word sentence"
            )
        if self.instances_per_gram < 1:
            raise ValueError("instances_per_gram must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def pooled_width(self):
        return self.instances_per_gram * len(self.gram_set)

    def to_dict(self):
        return {
            "word_dim": self.word_dim,
            "words_per_sentence": self.words_per_sentence,
            "gram_set": list(self.gram_set),
            "instances_per_gram": self.instances_per_gram,
            "dropout_rate": self.dropout_rate,
        }


class SentimentAnalyzer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.convs = nn.ModuleDict(
            {str(n): nn.Conv1d(cfg.word_dim, cfg.instances_per_gram, kernel_size=n) for n in cfg.gram_set}
        )
        self.dropout = nn.Dropout(cfg.dropout_rate)
        self.fc = nn.Linear(cfg.pooled_width, 2)

    def pooled(self, sentence):
        """Global-max-pooled n-gram activations, shape ``(batch, M * |grams|)``."""
        x = sentence.transpose(1, 2)  # (batch, c_L, L): words become the 1-D axis
        return torch.cat([F.relu(conv(x)).amax(dim=2) for conv in self.convs.values()], dim=1)

    def forward(self, sentence):
        return self.fc(self.dropout(self.pooled(sentence)))


def init_analyzer(cfg, seed=0):
    with seeded(seed):
        return SentimentAnalyzer(cfg)


def _check_sentence(an, s):
    cfg = an.cfg
    if s.dim() != 3 or s.shape[1] != cfg.words_per_sentence or s.shape[2] != cfg.word_dim:
        raise ShapeError(
            f"sentence shape {tuple(s.shape)} does not match (batch, {cfg.words_per_sentence}, {cfg.word_dim})"
        )
    if not torch.isfinite(s).all():
        raise NonFiniteError("sentence contains non-finite values")


def analyze(an, s, inference_mode=True):
    """Probabilities ``(batch, 2)`` ordered (benign, adversarial)."""
    _check_sentence(an, s)
    was_training = an.training
    an.train(not inference_mode)
    try:
        return F.softmax(an(s), dim=1)
    finally:
        an.train(was_training)


class Detector(nn.Module):
    """Word embedding layer composed with a sentiment analyzer.

    ``analyzer`` may be any module mapping ``(batch, L, c_L)`` sentences to
    two logits; :class:`SentimentAnalyzer` is the default.
    """

    def __init__(self, plan, embedding, analyzer, meta=None):
        super().__init__()
        if embedding.L != plan.L or tuple(embedding.dims) != tuple(tuple(d) for d in plan.dims):
            raise ShapeError("embedding does not match the tap plan")
        cfg = getattr(analyzer, "cfg", None)
        if cfg is not None and (cfg.word_dim != embedding.word_dim or cfg.words_per_sentence != plan.L):
            raise ShapeError(
                f"analyzer expects {cfg.words_per_sentence} words of length {cfg.word_dim}, "
                f"embedding yields {plan.L} of length {embedding.word_dim}"
            )
        self.plan = plan
        self.embedding = embedding
        self.analyzer = analyzer
        self.meta = dict(meta or {})

    def forward(self, maps):
        return self.analyzer(self.embedding(list(maps)))


def build_detector(plan, gram_set=(1, 2, 3, 4), instances_per_gram=100, dropout_rate=0.5, seed=0, meta=None):
    emb = init_embedding(plan, seed)
    cfg = AnalyzerConfig(plan.dims[-1][0], plan.L, gram_set, instances_per_gram, dropout_rate)
    an = init_analyzer(cfg, seed + 1)
    meta = {"seed": seed, **(meta or {})}
    return Detector(plan, emb, an, meta)


def _check_series(d, fs):
    if len(fs) != d.plan.L:
        raise ShapeError(f"detector expects {d.plan.L} feature maps, got {len(fs)}")
    for m, dims, name in zip(fs, d.plan.dims, d.plan.layer_ids):
        if tuple(m.shape[1:]) != tuple(dims):
            raise ShapeError(f"feature map for {name} has shape {tuple(m.shape[1:])}, plan expects {tuple(dims)}")


def detect(d, fs):
    """Inference-mode (benign, adversarial) probabilities for a feature series."""
    _check_series(d, fs)
    return analyze(d.analyzer, embed_series(d.embedding, fs), inference_mode=True)


def param_count(d):
    return sum(p.numel() for p in d.parameters() if p.requires_grad)


def param_count_closed_form(dims, gram_set, instances_per_gram):
    c_L = dims[-1][0]
    M = instances_per_gram
    analyzer = sum(M * (n * c_L + 1) for n in gram_set)
    fc = M * len(gram_set) * 2 + 2
    return cp_param_count(dims) + analyzer + fc


def save_detector(d, directory, extra=None):
    manifest = {
        "kind": "detector",
        "plan": d.plan.to_dict(),
        "analyzer": d.analyzer.cfg.to_dict(),
        "meta": d.meta,
        **(extra or {}),
    }
    return save_module(d, directory, manifest)


def load_detector(directory):
    manifest = read_manifest(directory)
    if manifest.get("kind") != "detector":
        raise ValueError(f"{directory} is not a detector checkpoint")
    plan = TapPlan.from_dict(manifest["plan"])
    cfg = AnalyzerConfig(**manifest["analyzer"])
    d = Detector(plan, EmbeddingLayer(plan.dims), SentimentAnalyzer(cfg), manifest.get("meta"))
    load_module_state(d, directory)
    d.eval()
    return d, manifest
