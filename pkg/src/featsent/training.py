"""Benign/adversarial dataset assembly and detector training."""
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .classifiers import forward_with_taps, predict
from .detector import ADVERSARIAL, BENIGN
from .errors import FeatsentError
from .utils import batches, logger


@dataclass
class TrainRecipe:
    epochs: int = 10
    lr: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class DetectorDataset:
    """Images labelled benign (0) or adversarial (1); feature maps come from ``classifier``."""

    images: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    source_index: np.ndarray
    attack: str
    classifier: object = None
    plan: object = None
    class_weights: np.ndarray = field(default_factory=lambda: np.ones(2, dtype=np.float32))
    cache: bool = False
    _maps: list = None

    def __len__(self):
        return len(self.labels)

    def indices(self, split):
        return np.flatnonzero(self.split == split)

    def feature_maps(self, idx):
        if self.cache:
            if self._maps is None:
                self._maps = compute_maps(self.classifier, self.plan, self.images)
            return [m[idx] for m in self._maps]
        return forward_with_taps(self.classifier, torch.as_tensor(self.images[idx]), self.plan)[1]


def compute_maps(classifier, plan, images, batch_size=256):
    chunks = [forward_with_taps(classifier, torch.as_tensor(images[sl]), plan)[1] for sl in batches(len(images), batch_size)]
    return [torch.cat([c[i] for c in chunks]) for i in range(plan.L)]


def assemble(
    classifier,
    plan,
    benign_images,
    adv_set,
    balance=True,
    benign_labels=None,
    classifier_hash="",
    val_fraction=0.0,
    seed=0,
    cache=False,
):
    """Pair benign and successful adversarial images with detector labels.

    Benign images that ``classifier`` misclassifies are dropped when
    ``benign_labels`` is given. With ``balance`` the larger class is
    downsampled to the smaller; otherwise both are kept and class weights
    compensate in the loss.
    """
    adv_set.check_classifier(classifier_hash)
    rng = np.random.default_rng(seed)
    benign_images = np.asarray(benign_images, dtype=np.float32)
    benign_idx = np.arange(len(benign_images))
    if benign_labels is not None:
        correct = predict(classifier, benign_images) == np.asarray(benign_labels)
        benign_idx = benign_idx[correct]
    adv_idx = np.flatnonzero(adv_set.success)
    if len(adv_idx) == 0:
        raise FeatsentError(f"adversarial set {adv_set.spec.name} has no successful examples")
    if len(benign_idx) == 0:
        raise FeatsentError("no usable benign examples")
    if balance:
        k = min(len(benign_idx), len(adv_idx))
        benign_idx = np.sort(rng.choice(benign_idx, k, replace=False))
        adv_idx = np.sort(rng.choice(adv_idx, k, replace=False))
    images = np.concatenate([benign_images[benign_idx], adv_set.perturbed[adv_idx]])
    labels = np.concatenate([np.full(len(benign_idx), BENIGN), np.full(len(adv_idx), ADVERSARIAL)]).astype(np.int64)
    source = np.concatenate([benign_idx, adv_set.source_index[adv_idx]]).astype(np.int64)
    counts = np.bincount(labels, minlength=2).astype(np.float32)
    weights = len(labels) / (2 * counts)
    split = np.array(["train"] * len(labels), dtype=object)
    if val_fraction > 0:
        n_val = max(1, int(round(val_fraction * len(labels))))
        split[rng.choice(len(labels), n_val, replace=False)] = "val"
    return DetectorDataset(
        images=images,
        labels=labels,
        split=split,
        source_index=source,
        attack=adv_set.spec.name,
        classifier=classifier,
        plan=plan,
        class_weights=weights.astype(np.float32),
        cache=cache,
    )


@torch.no_grad()
def score(detector, maps):
    was = detector.training
    detector.eval()
    p = torch.softmax(detector(maps), dim=1)[:, ADVERSARIAL]
    detector.train(was)
    return p


def _score_split(detector, ds, idx, batch_size):
    out = [score(detector, ds.feature_maps(idx[sl])) for sl in batches(len(idx), batch_size)]
    return torch.cat(out).numpy()


def _run_epochs(detector, ds, recipe, opt, epochs, history, start_epoch=0):
    from .evaluation import roc_auc

    gen = torch.Generator().manual_seed(recipe.seed)
    train_idx = ds.indices("train")
    val_idx = ds.indices("val")
    weights = torch.as_tensor(ds.class_weights)
    labels = torch.as_tensor(ds.labels)
    for epoch in range(epochs):
        t0 = time.time()
        detector.train()
        order = train_idx[torch.randperm(len(train_idx), generator=gen).numpy()]
        total = 0.0
        for sl in batches(len(order), recipe.batch_size):
            idx = order[sl]
            maps = ds.feature_maps(idx)
            loss = F.cross_entropy(detector(maps), labels[idx], weight=weights)
            if not torch.isfinite(loss):
                raise FeatsentError(f"detector training diverged at epoch {start_epoch + epoch + 1}: loss={loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        detector.eval()
        rec = {"epoch": start_epoch + epoch + 1, "loss": total / max(len(order), 1), "attack": ds.attack}
        if len(val_idx) and len(np.unique(ds.labels[val_idx])) == 2:
            rec["val_auc"] = roc_auc(_score_split(detector, ds, val_idx, recipe.batch_size), ds.labels[val_idx])
        rec["wall_time"] = time.time() - t0
        history.append(rec)
        logger.info("detector epoch %d loss %.4f val_auc %s", rec["epoch"], rec["loss"], rec.get("val_auc"))
    return history


def _optimizer(detector, recipe):
    return torch.optim.Adam(detector.parameters(), lr=recipe.lr, weight_decay=recipe.weight_decay)


def train(detector, ds, recipe):
    """Train ``detector`` on ``ds``; returns ``(detector, history)``."""
    if len(ds) == 0 or len(np.unique(ds.labels[ds.indices("train")])) < 2:
        raise FeatsentError("detector training needs both benign and adversarial examples")
    torch.manual_seed(recipe.seed)
    history = _run_epochs(detector, ds, recipe, _optimizer(detector, recipe), recipe.epochs, [])
    detector.meta.setdefault("attacks", []).append(ds.attack)
    detector.meta["epochs"] = detector.meta.get("epochs", 0) + recipe.epochs
    detector.meta["seed"] = recipe.seed
    detector.meta.setdefault("history", []).extend(history)
    return detector, history


def fine_tune(detector, new_adv, benign_images, epochs, classifier, recipe=None, benign_labels=None, classifier_hash=""):
    """Continue training on a new benign/adversarial mixture without re-initialising."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if len(new_adv) == 0:
        raise FeatsentError("no new adversarial examples to fine-tune on")
    recipe = recipe or TrainRecipe(epochs=epochs)
    ds = assemble(
        classifier, detector.plan, benign_images, new_adv, True, benign_labels, classifier_hash, seed=recipe.seed
    )
    start = detector.meta.get("epochs", 0)
    history = _run_epochs(detector, ds, recipe, _optimizer(detector, recipe), epochs, [], start_epoch=start)
    detector.meta.setdefault("attacks", []).append(new_adv.spec.name)
    detector.meta["epochs"] = start + epochs
    detector.meta.setdefault("history", []).extend(history)
    return detector, history


def cross_entropy_on(detector, ds, idx):
    with torch.no_grad():
        was = detector.training
        detector.eval()
        loss = F.cross_entropy(detector(ds.feature_maps(idx)), torch.as_tensor(ds.labels[idx]))
        detector.train(was)
    return float(loss)


def steps_per_epoch(n, batch_size):
    return math.ceil(n / batch_size)
