"""Attack specifications, batched crafting and adversarial-set persistence."""
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ProvenanceError
from ..serialization import read_arrays, write_arrays
from ..utils import batches, derive_seed, hash_obj
from .adaptive import adaptive_pgd_alternating, adaptive_pgd_combined
from .gradient import apgd, fgsm, pgd
from .minimal import deepfool, jsma
from .optimization import cw_l2, ead

# defaults follow the attack hyper-parameter table of the experiments
DEFAULTS = {
    "fgsm": {"eps": 0.1},
    "pgd": {"eps": 8 / 255, "alpha": 0.002, "iters": 10, "random_start": True},
    "deepfool": {"max_iter": 50, "overshoot": 0.02, "nb_grads": 10},
    "jsma": {"theta": 1.0, "gamma": 0.1},
    "cw": {"binary_search_steps": 5, "steps": 1000, "stepsize": 0.01, "confidence": 0.8, "initial_const": 0.1},
    "ead": {
        "binary_search_steps": 9,
        "steps": 1000,
        "confidence": 0.8,
        "initial_const": 0.1,
        "beta": 0.01,
        "initial_stepsize": 0.01,
        "decision_rule": "L1",
    },
    "apgd_ce": {"eps": 8 / 255, "iters": 100},
    "apgd_dlr": {"eps": 8 / 255, "iters": 100},
    "adaptive_alt": {"eps": 8 / 255, "alpha": 2 / 255, "iters": 20, "random_start": True},
    "adaptive_comb": {"eps": 8 / 255, "alpha": 2 / 255, "iters": 20, "sigma": 0.5, "random_start": True},
}
ATTACKS = tuple(DEFAULTS)
LINF_ATTACKS = ("fgsm", "pgd", "apgd_ce", "apgd_dlr", "adaptive_alt", "adaptive_comb")
TARGETED = ("jsma", "cw", "ead")
ADAPTIVE = ("adaptive_alt", "adaptive_comb")

_RANGES = {
    "eps": (0.0, None, False),
    "alpha": (0.0, None, False),
    "theta": (0.0, 1.0, False),
    "gamma": (0.0, 1.0, False),
    "sigma": (0.0, 1.0, True),
    "overshoot": (0.0, None, True),
    "confidence": (0.0, None, True),
    "initial_const": (0.0, None, False),
    "stepsize": (0.0, None, False),
    "initial_stepsize": (0.0, None, False),
    "beta": (0.0, None, True),
}
_COUNTS = ("iters", "max_iter", "steps", "binary_search_steps", "nb_grads")


@dataclass
class AttackSpec:
    attack: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.attack not in DEFAULTS:
            raise ValueError(f"unknown attack {self.attack!r}; expected one of {ATTACKS}")
        unknown = set(self.params) - set(DEFAULTS[self.attack]) - {"target"}
        if unknown:
            raise ValueError(f"unknown parameter(s) {sorted(unknown)} for {self.attack}")
        self.params = {**DEFAULTS[self.attack], **self.params}
        for key, value in self.params.items():
            if key in _RANGES:
                lo, hi, closed_lo = _RANGES[key]
                ok = (value >= lo if closed_lo else value > lo) and (hi is None or value <= hi)
                if not ok:
                    raise ValueError(f"{self.attack}.{key}={value} out of range")
            if key in _COUNTS and int(value) < 1:
                raise ValueError(f"{self.attack}.{key} must be >= 1")
        if "alpha" in self.params and self.params["alpha"] > self.params["eps"] + 1e-12:
            raise ValueError(f"{self.attack}: alpha must not exceed eps")
        if not self.name:
            self.name = self.attack

    def to_dict(self):
        return {"attack": self.attack, "params": dict(self.params), "seed": self.seed, "name": self.name}

    @classmethod
    def from_dict(cls, d):
        return cls(d["attack"], dict(d.get("params", {})), int(d.get("seed", 0)), d.get("name", ""))

    def hash(self):
        return hash_obj(self.to_dict())


@dataclass
class AdversarialSet:
    originals: np.ndarray
    perturbed: np.ndarray
    true_labels: np.ndarray
    predictions: np.ndarray
    success: np.ndarray
    spec: AttackSpec
    classifier_hash: str = ""
    source_index: np.ndarray = None

    def __post_init__(self):
        if self.source_index is None:
            self.source_index = np.arange(len(self.true_labels), dtype=np.int64)

    def __len__(self):
        return len(self.true_labels)

    @property
    def success_rate(self):
        return float(np.mean(self.success)) if len(self) else 0.0

    def check_classifier(self, classifier_hash):
        if self.classifier_hash and classifier_hash and self.classifier_hash != classifier_hash:
            raise ProvenanceError(
                f"adversarial set {self.spec.name} was crafted against classifier {self.classifier_hash}, "
                f"not {classifier_hash}"
            )

    def manifest(self):
        return {
            "kind": "adversarial_set",
            "spec": self.spec.to_dict(),
            "classifier_hash": self.classifier_hash,
            "n": len(self),
            "successes": int(np.sum(self.success)),
            "success_rate": self.success_rate,
        }


def save_adversarial_set(adv, directory, extra=None):
    arrays = {
        "originals": adv.originals.astype(np.float32),
        "perturbed": adv.perturbed.astype(np.float32),
        "true_labels": adv.true_labels.astype(np.int32),
        "predictions": adv.predictions.astype(np.int32),
        "success": adv.success.astype(np.int8),
        "source_index": adv.source_index.astype(np.int32),
    }
    return write_arrays(directory, arrays, {**adv.manifest(), **(extra or {})})


def load_adversarial_set(directory):
    arrays, manifest = read_arrays(directory)
    return AdversarialSet(
        originals=arrays["originals"],
        perturbed=arrays["perturbed"],
        true_labels=arrays["true_labels"].astype(np.int64),
        predictions=arrays["predictions"].astype(np.int64),
        success=arrays["success"].astype(bool),
        spec=AttackSpec.from_dict(manifest["spec"]),
        classifier_hash=manifest.get("classifier_hash", ""),
        source_index=arrays["source_index"].astype(np.int64),
    )


def second_likely(logits):
    return logits.topk(2, dim=1).indices[:, 1]


def run_attack(classifier, spec, x, y, generator=None, detector=None, target=None):
    """Apply ``spec`` to one batch; returns the perturbed batch."""
    p = spec.params
    a = spec.attack
    if a in TARGETED and target is None:
        with torch.no_grad():
            target = second_likely(classifier(x))
    if a == "fgsm":
        return fgsm(classifier, x, y, p["eps"])
    if a == "pgd":
        return pgd(classifier, x, y, p["eps"], p["alpha"], int(p["iters"]), p["random_start"], generator)
    if a == "deepfool":
        return deepfool(classifier, x, int(p["max_iter"]), p["overshoot"], y=y, nb_grads=int(p["nb_grads"]))[0]
    if a == "jsma":
        return jsma(classifier, x, target, p["theta"], p["gamma"])[0]
    if a == "cw":
        return cw_l2(
            classifier, x, target, int(p["binary_search_steps"]), int(p["steps"]), p["stepsize"], p["confidence"],
            p["initial_const"],
        )[0]
    if a == "ead":
        return ead(
            classifier, x, target, int(p["binary_search_steps"]), int(p["steps"]), p["confidence"],
            p["initial_const"], p["beta"], p["initial_stepsize"], p["decision_rule"],
        )[0]
    if a in ("apgd_ce", "apgd_dlr"):
        return apgd(classifier, x, y, p["eps"], int(p["iters"]), loss=a.split("_")[1], generator=generator)
    if detector is None:
        raise ValueError(f"{a} needs a trained detector")
    if a == "adaptive_alt":
        return adaptive_pgd_alternating(
            classifier, detector, x, y, p["eps"], p["alpha"], int(p["iters"]), p["random_start"], generator
        )[0]
    return adaptive_pgd_combined(
        classifier, detector, x, y, p["eps"], p["alpha"], int(p["iters"]), p["sigma"],
        random_start=p["random_start"], generator=generator,
    )[0]


def craft_dataset(classifier, spec, images, labels, batch_size=128, detector=None, classifier_hash="", source_index=None):
    """Run ``spec`` over ``images`` in batches; deterministic given ``spec.seed``.

    Each batch draws from its own generator seeded by (spec seed, batch index),
    so results do not depend on how batches are scheduled.
    """
    if len(images) == 0:
        raise ValueError("no images to attack")
    if isinstance(spec, dict):
        spec = AttackSpec.from_dict(spec)
    was_training = classifier.training
    classifier.eval()
    x_all = torch.as_tensor(np.asarray(images, dtype=np.float32))
    y_all = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    out, preds = [], []
    try:
        for b, sl in enumerate(batches(len(x_all), batch_size)):
            gen = torch.Generator().manual_seed(derive_seed(f"{spec.name}/batch{b}", spec.seed))
            x_adv = run_attack(classifier, spec, x_all[sl], y_all[sl], gen, detector).detach()
            x_adv = torch.clamp(x_adv, 0.0, 1.0)
            with torch.no_grad():
                preds.append(classifier(x_adv).argmax(1))
            out.append(x_adv)
    finally:
        classifier.train(was_training)
    perturbed = torch.cat(out).numpy()
    predictions = torch.cat(preds).numpy()
    labels = y_all.numpy()
    return AdversarialSet(
        originals=x_all.numpy().copy(),
        perturbed=perturbed,
        true_labels=labels,
        predictions=predictions,
        success=predictions != labels,
        spec=spec,
        classifier_hash=classifier_hash,
        source_index=None if source_index is None else np.asarray(source_index, dtype=np.int64),
    )
