"""Image classifiers with named hidden-layer taps.

Each classifier is an ordered sequence of named stages followed by a head.
A tap is the output of one stage (after its final activation), so a single
forward pass yields the logits together with any subset of stage outputs.
"""
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteError, ShapeError
from .utils import batches, logger, seeded

ARCHITECTURES = ("resnet34", "inceptionv3", "tinycnn")

TAPS = {
    "resnet34": ("Input", "BN1", "Res1", "Res2", "Res3", "Res4"),
    "inceptionv3": (
        "Input",
        "Stem",
        "Inception-A",
        "Reduction-A",
        "Inception-B",
        "Reduction-B",
        "Inception-C",
        "Avg-pool",
    ),
    "tinycnn": ("Input", "B1", "B2", "B3", "B4"),
}

DEFAULT_TAPS = {
    "resnet34": ("BN1", "Res1", "Res2", "Res3", "Res4"),
    "inceptionv3": ("Stem", "Inception-A", "Reduction-B", "Inception-C", "Avg-pool"),
    "tinycnn": ("B1", "B2", "B3", "B4"),
}

MIN_SIZE = {"resnet34": 8, "inceptionv3": 75, "tinycnn": 8}

_MEAN = (0.4914, 0.4822, 0.4465)
_STD = (0.2470, 0.2435, 0.2616)


@dataclass(frozen=True)
class ClassifierSpec:
    architecture: str
    num_classes: int
    input_shape: tuple = (3, 32, 32)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if int(self.num_classes) < 1:
            raise ValueError("num_classes must be positive")
        c, w, h = self.input_shape
        if c not in (1, 3):
            raise ValueError(f"input channels must be 1 or 3, got {c}")
        m = MIN_SIZE[self.architecture]
        if min(w, h) < m:
            raise ValueError(f"{self.architecture} needs spatial size >= {m}, got {w}x{h}")

    def to_dict(self):
        return {"architecture": self.architecture, "num_classes": int(self.num_classes), "input_shape": list(self.input_shape)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["architecture"], int(d["num_classes"]), tuple(d["input_shape"]))


@dataclass
class TapPlan:
    layer_ids: list
    dims: list = field(default_factory=list)

    @property
    def L(self):
        return len(self.layer_ids)

    def to_dict(self):
        return {"layer_ids": list(self.layer_ids), "dims": [list(d) for d in self.dims]}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["layer_ids"]), [tuple(x) for x in d["dims"]])


class Normalize(nn.Module):
    def __init__(self, channels):
        super().__init__()
        mean = _MEAN if channels == 3 else (0.5,)
        std = _STD if channels == 3 else (0.5,)
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _res_layer(cin, cout, n, stride):
    layers = [BasicBlock(cin, cout, stride)] + [BasicBlock(cout, cout) for _ in range(n - 1)]
    return nn.Sequential(*layers)


def _conv_bn(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU())


def _resnet34_stages(c, num_classes):
    stages = {
        "Input": nn.Identity(),
        "BN1": nn.Sequential(Normalize(c), _conv_bn(c, 64, 1)),
        "Res1": _res_layer(64, 64, 3, 1),
        "Res2": _res_layer(64, 128, 4, 2),
        "Res3": _res_layer(128, 256, 6, 2),
        "Res4": _res_layer(256, 512, 3, 2),
    }
    head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(512, num_classes))
    return stages, head


def _tinycnn_stages(c, num_classes):
    def block(cin, cout, stride):
        return nn.Sequential(_conv_bn(cin, cout, stride), _conv_bn(cout, cout, 1))

    stages = {
        "Input": nn.Identity(),
        "B1": nn.Sequential(Normalize(c), block(c, 16, 1)),
        "B2": block(16, 32, 2),
        "B3": block(32, 64, 2),
        "B4": block(64, 128, 2),
    }
    head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(128, num_classes))
    return stages, head


def _inceptionv3_stages(c, num_classes):
    from torchvision.models import inception_v3

    net = inception_v3(weights=None, aux_logits=False, init_weights=True, num_classes=num_classes, transform_input=False)
    if c != 3:
        net.Conv2d_1a_3x3.conv = nn.Conv2d(c, 32, kernel_size=3, stride=2, bias=False)
    stem = nn.Sequential(
        Normalize(c),
        net.Conv2d_1a_3x3,
        net.Conv2d_2a_3x3,
        net.Conv2d_2b_3x3,
        net.maxpool1,
        net.Conv2d_3b_1x1,
        net.Conv2d_4a_3x3,
        net.maxpool2,
    )
    stages = {
        "Input": nn.Identity(),
        "Stem": stem,
        "Inception-A": nn.Sequential(net.Mixed_5b, net.Mixed_5c, net.Mixed_5d),
        "Reduction-A": net.Mixed_6a,
        "Inception-B": nn.Sequential(net.Mixed_6b, net.Mixed_6c, net.Mixed_6d, net.Mixed_6e),
        "Reduction-B": net.Mixed_7a,
        "Inception-C": nn.Sequential(net.Mixed_7b, net.Mixed_7c),
        "Avg-pool": net.avgpool,
    }
    head = nn.Sequential(nn.Dropout(0.5), nn.Flatten(), net.fc)
    return stages, head


_BUILDERS = {"resnet34": _resnet34_stages, "inceptionv3": _inceptionv3_stages, "tinycnn": _tinycnn_stages}


class Classifier(nn.Module):
    """Sequential stages with named tap points, followed by a classification head."""

    def __init__(self, spec, seed=0):
        super().__init__()
        self.spec = spec
        self.seed = int(seed)
        with seeded(self.seed):
            stages, head = _BUILDERS[spec.architecture](spec.input_shape[0], spec.num_classes)
        self.stages = nn.ModuleDict(stages)
        self.head = head
        self.tap_names = tuple(self.stages.keys())

    def forward(self, x):
        return self.forward_with_taps(x, ())[0]

    def forward_with_taps(self, x, taps):
        """Return ``(logits, [stage outputs for taps])`` from one pass."""
        wanted = set(taps)
        captured = {}
        h = x
        for name, stage in self.stages.items():
            h = stage(h)
            if name in wanted:
                captured[name] = h
        return self.head(h), [captured[t] for t in taps]


def build_classifier(spec, seed=0):
    if not isinstance(spec, ClassifierSpec):
        spec = ClassifierSpec(**spec)
    return Classifier(spec, seed)


def plan_taps(classifier, layer_ids):
    """Validate ``layer_ids`` and record each tap's (c, w, h) with a probe pass."""
    layer_ids = list(layer_ids)
    if not layer_ids:
        raise ValueError("at least one tap is required")
    order = {name: i for i, name in enumerate(classifier.tap_names)}
    unknown = [t for t in layer_ids if t not in order]
    if unknown:
        raise ValueError(f"unknown tap(s) {unknown} for {classifier.spec.architecture}; available {classifier.tap_names}")
    if len(set(layer_ids)) != len(layer_ids):
        raise ValueError(f"duplicate taps in {layer_ids}")
    pos = [order[t] for t in layer_ids]
    if pos != sorted(pos):
        raise ValueError(f"taps {layer_ids} are out of forward order")
    probe = torch.zeros((1,) + tuple(classifier.spec.input_shape))
    was_training = classifier.training
    classifier.eval()
    with torch.no_grad():
        _, maps = classifier.forward_with_taps(probe, layer_ids)
    classifier.train(was_training)
    return TapPlan(layer_ids, [tuple(int(s) for s in m.shape[1:]) for m in maps])


def check_batch(classifier, batch):
    batch = torch.as_tensor(batch, dtype=next(classifier.parameters()).dtype)
    expected = tuple(classifier.spec.input_shape)
    if batch.dim() != 4 or tuple(batch.shape[1:]) != expected:
        raise ShapeError(f"expected batch (n, {expected}), got {tuple(batch.shape)}")
    if not torch.isfinite(batch).all():
        raise NonFiniteError("input batch contains non-finite values")
    return batch


def forward_with_taps(classifier, batch, plan, grad=False):
    """Logits and feature series for ``batch`` without altering classifier state.

    With ``grad=True`` the outputs stay attached to the autograd graph (used by
    the adaptive attacks); otherwise the pass runs under ``no_grad``.
    """
    batch = check_batch(classifier, batch)
    taps = plan.layer_ids if isinstance(plan, TapPlan) else list(plan)
    was_training = classifier.training
    classifier.eval()
    try:
        with torch.set_grad_enabled(grad):
            logits, maps = classifier.forward_with_taps(batch, taps)
    finally:
        classifier.train(was_training)
    if isinstance(plan, TapPlan) and plan.dims:
        for m, d, name in zip(maps, plan.dims, taps):
            if tuple(m.shape[1:]) != tuple(d):
                raise ShapeError(f"tap {name} produced {tuple(m.shape[1:])}, plan expects {tuple(d)}")
    return logits, maps


@torch.no_grad()
def predict(classifier, images, batch_size=256):
    was_training = classifier.training
    classifier.eval()
    out = []
    for sl in batches(len(images), batch_size):
        out.append(classifier(torch.as_tensor(images[sl])).argmax(1))
    classifier.train(was_training)
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


def accuracy(classifier, data, batch_size=256):
    return float((predict(classifier, data.images, batch_size) == data.labels).mean())


def train_classifier(classifier, train, epochs, lr=1e-3, seed=0, val=None, batch_size=128, weight_decay=5e-4):
    """Adam training with cross-entropy; returns (classifier, per-epoch history)."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(train) == 0:
        raise ValueError("empty training set")
    labels = np.asarray(train.labels)
    if labels.min() < 0 or labels.max() >= classifier.spec.num_classes:
        raise ValueError(f"labels must lie in [0, {classifier.spec.num_classes})")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(classifier.parameters(), lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=lr, total_steps=epochs * ((len(train) + batch_size - 1) // batch_size)
    )
    x_all = torch.as_tensor(train.images)
    y_all = torch.as_tensor(labels)
    history = []
    for epoch in range(epochs):
        t0 = time.time()
        classifier.train()
        perm = torch.randperm(len(train), generator=gen)
        total = 0.0
        for sl in batches(len(train), batch_size):
            idx = perm[sl]
            xb = x_all[idx]
            # random horizontal flip keeps desk-scale training from overfitting
            flip = torch.rand(len(idx), generator=gen) < 0.5
            xb = torch.where(flip.view(-1, 1, 1, 1), xb.flip(3), xb)
            loss = F.cross_entropy(classifier(xb), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        classifier.eval()
        rec = {"epoch": epoch + 1, "loss": total / len(train), "seconds": time.time() - t0}
        if val is not None and len(val):
            rec["val_accuracy"] = accuracy(classifier, val)
        history.append(rec)
        logger.info("classifier epoch %d loss %.4f val_acc %s", epoch + 1, rec["loss"], rec.get("val_accuracy"))
    classifier.eval()
    return classifier, history
