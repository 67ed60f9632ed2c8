"""Detection metrics, generalization matrices and separability diagnostics."""
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .classifiers import forward_with_taps, predict
from .detector import ADVERSARIAL
from .errors import FeatsentError, ShapeError
from .utils import batches

VAR_FLOOR = 1e-8


def roc_auc(scores, labels):
    """Probability that a random positive outscores a random negative, ties counted half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError("scores and labels differ in length")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def detection_accuracy(p_adv, labels, threshold=0.5):
    return float(np.mean((np.asarray(p_adv) > threshold) == (np.asarray(labels) == 1)))


@torch.no_grad()
def score_images(classifier, detector, images, batch_size=256):
    """p_adversarial for each image; the classifier supplies the tapped maps."""
    was = detector.training
    detector.eval()
    out = []
    try:
        for sl in batches(len(images), batch_size):
            _, maps = forward_with_taps(classifier, torch.as_tensor(images[sl]), detector.plan)
            out.append(torch.softmax(detector(maps), dim=1)[:, ADVERSARIAL])
    finally:
        detector.train(was)
    return torch.cat(out).numpy().astype(np.float64)


def _median_of_means(samples, group=10):
    samples = np.asarray(samples)
    k = max(1, len(samples) // group)
    return float(np.median([g.mean() for g in np.array_split(samples, k)]))


@torch.no_grad()
def measure_latency(classifier, detector, images, calls=100):
    """Per-example latency in ms as ``(end_to_end, detector_only)``.

    End-to-end includes the tap-capturing classifier forward; detector-only
    times the embedding and analyzer on precomputed maps.
    """
    if calls < 1:
        raise ValueError("calls must be >= 1")
    detector.eval()
    full, det = [], []
    for i in range(calls):
        x = torch.as_tensor(images[i % len(images)][None])
        t0 = time.perf_counter()
        _, maps = forward_with_taps(classifier, x, detector.plan)
        t1 = time.perf_counter()
        torch.softmax(detector(maps), dim=1)
        t2 = time.perf_counter()
        full.append(t2 - t0)
        det.append(t2 - t1)
    return 1000 * _median_of_means(full), 1000 * _median_of_means(det)


@dataclass
class EvalReport:
    auc: float
    detection_accuracy: float
    attack_success_rate: float
    mean_latency_ms: float
    n_examples: int
    attack: str = ""
    detector_latency_ms: float = float("nan")
    latency_note: str = "mean_latency_ms includes the tap-capturing classifier forward at batch size 1"
    config_hash: str = ""
    seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("auc", "detection_accuracy", "attack_success_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def balanced_test_set(classifier, benign_images, adv_set, benign_labels=None, seed=0):
    """Successful adversarial images plus an equal number of benign images.

    Returns ``(images, detector_labels, class_labels)``; class labels are the
    true labels where known and the classifier's predictions otherwise.
    """
    if len(benign_images) == 0 or len(adv_set) == 0:
        raise FeatsentError("empty benign or adversarial set")
    rng = np.random.default_rng(seed)
    benign_idx = np.arange(len(benign_images))
    preds = predict(classifier, benign_images)
    classes = preds if benign_labels is None else np.asarray(benign_labels)
    benign_idx = benign_idx[preds == classes]
    adv_idx = np.flatnonzero(adv_set.success)
    k = min(len(benign_idx), len(adv_idx))
    if k == 0:
        raise FeatsentError(f"no successful adversarial examples in {adv_set.spec.name}")
    benign_idx = np.sort(rng.choice(benign_idx, k, replace=False))
    adv_idx = np.sort(rng.choice(adv_idx, k, replace=False))
    images = np.concatenate([np.asarray(benign_images, dtype=np.float32)[benign_idx], adv_set.perturbed[adv_idx]])
    labels = np.r_[np.zeros(k, dtype=np.int64), np.ones(k, dtype=np.int64)]
    return images, labels, np.r_[classes[benign_idx], adv_set.true_labels[adv_idx]].astype(np.int64)


def report_from_scores(scores, labels, attack_success_rate, latency=(float("nan"), float("nan")), **meta):
    return EvalReport(
        auc=roc_auc(scores, labels),
        detection_accuracy=detection_accuracy(scores, labels),
        attack_success_rate=float(attack_success_rate),
        mean_latency_ms=latency[0],
        detector_latency_ms=latency[1],
        n_examples=len(labels),
        **meta,
    )


def evaluate_detector(
    detector,
    classifier,
    benign_images,
    adv_set,
    benign_labels=None,
    classifier_hash="",
    latency_calls=100,
    seed=0,
    config_hash="",
):
    """AUC and accuracy on a balanced benign/adversarial test set plus latency."""
    adv_set.check_classifier(classifier_hash)
    images, labels, _ = balanced_test_set(classifier, benign_images, adv_set, benign_labels, seed)
    scores = score_images(classifier, detector, images)
    latency = measure_latency(classifier, detector, images, latency_calls) if latency_calls else (float("nan"),) * 2
    return report_from_scores(
        scores, labels, adv_set.success_rate, latency, attack=adv_set.spec.name, config_hash=config_hash,
        seeds={"eval": seed},
    )


def generalization_matrix(detectors, adv_sets, classifier, benign, benign_labels=None, classifier_hash="", seed=0):
    """AUC of each trained detector (rows) on each attack's examples (columns).

    Returns ``{"matrix": {train: {test: auc}}, "row_average": {train: mean}}``;
    the row average is over the off-diagonal (unseen-attack) entries, or over
    the whole row when it has a single column.
    """
    if not detectors or not adv_sets:
        raise FeatsentError("generalization matrix needs at least one detector and one set")
    matrix, avg = {}, {}
    for a, det in detectors.items():
        if det is None:
            raise FeatsentError(f"missing detector for {a}")
        row = {}
        for b, adv in adv_sets.items():
            if adv is None:
                raise FeatsentError(f"missing adversarial set for {b}")
            row[b] = evaluate_detector(det, classifier, benign, adv, benign_labels, classifier_hash, 0, seed).auc
        matrix[a] = row
        unseen = [v for b, v in row.items() if b != a] or list(row.values())
        avg[a] = float(np.mean(unseen))
    return {"matrix": matrix, "row_average": avg}


def _moments(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    if w.shape[0] < 2:
        raise ValueError("need at least 2 samples per side")
    return w.mean(0), np.maximum(w.var(0), VAR_FLOOR)


def bhattacharyya_gaussian(words_a, words_b):
    """Bhattacharyya distance between diagonal Gaussians fitted to two sample sets."""
    mu1, v1 = _moments(words_a)
    mu2, v2 = _moments(words_b)
    if mu1.shape != mu2.shape:
        raise ShapeError(f"dimension mismatch: {mu1.shape[0]} vs {mu2.shape[0]}")
    v = (v1 + v2) / 2
    mahal = np.sum((mu1 - mu2) ** 2 / v) / 8
    logdet = np.sum(np.log(v)) - 0.5 * (np.sum(np.log(v1)) + np.sum(np.log(v2)))
    return float(mahal + 0.5 * logdet)


@dataclass
class SeparabilityReport:
    taps: list
    classifier_side: list
    detector_side: list
    n_benign: int
    n_adversarial: int
    attack: str = ""

    def __post_init__(self):
        if min(self.classifier_side + self.detector_side, default=0.0) < -1e-9:
            raise ValueError("Bhattacharyya distances must be non-negative")

    def distances(self):
        return list(self.classifier_side) + list(self.detector_side)

    def to_dict(self):
        return asdict(self)


@torch.no_grad()
def word_vectors(classifier, detector, images, batch_size=256):
    """Classifier-side words (pooled raw maps, one array per tap) and detector words (n, L, c_L)."""
    detector.eval()
    raw = [[] for _ in detector.plan.layer_ids]
    emb = []
    for sl in batches(len(images), batch_size):
        _, maps = forward_with_taps(classifier, torch.as_tensor(images[sl]), detector.plan)
        for i, m in enumerate(maps):
            raw[i].append(m.mean(dim=(2, 3)))
        emb.append(detector.embedding(maps))
    return [torch.cat(r).numpy() for r in raw], torch.cat(emb).numpy()


def separability_report(classifier, detector, benign, adv_set, successful_only=True):
    """Per-tap Bhattacharyya distances between benign and adversarial words."""
    benign = np.asarray(benign, dtype=np.float32)
    adv = adv_set.perturbed[adv_set.success] if successful_only else adv_set.perturbed
    if len(adv) < 2 or len(benign) < 2:
        raise FeatsentError("separability needs at least 2 benign and 2 adversarial examples")
    raw_b, emb_b = word_vectors(classifier, detector, benign)
    raw_a, emb_a = word_vectors(classifier, detector, adv)
    L = detector.plan.L
    return SeparabilityReport(
        taps=list(detector.plan.layer_ids),
        classifier_side=[bhattacharyya_gaussian(raw_b[i], raw_a[i]) for i in range(L)],
        detector_side=[bhattacharyya_gaussian(emb_b[:, i], emb_a[:, i]) for i in range(L)],
        n_benign=len(benign),
        n_adversarial=len(adv),
        attack=adv_set.spec.name,
    )


WORD_COLUMNS = ("example_id", "tap_index", "adversarial", "label")


def export_words(detector, classifier, images, labels, out_path, adversarial=None, csv=False):
    """Write one row per (example, tap): the detector word plus metadata columns.

    The binary layout is ``words.f32`` (rows x c_L float32, little-endian),
    ``meta.i64`` (rows x 4 int64) and a ``schema.json`` sidecar. ``csv``
    writes a single ``words.csv`` instead.
    """
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("no images to export")
    labels = np.asarray(labels, dtype=np.int64)
    adversarial = np.zeros(len(images), dtype=np.int64) if adversarial is None else np.asarray(adversarial, np.int64)
    _, emb = word_vectors(classifier, detector, images)
    n, L, c = emb.shape
    words = emb.reshape(n * L, c).astype("<f4")
    meta = np.stack(
        [np.repeat(np.arange(n), L), np.tile(np.arange(L), n), np.repeat(adversarial, L), np.repeat(labels, L)], 1
    ).astype("<i8")
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    schema = {
        "rows": n * L,
        "word_dim": c,
        "taps": list(detector.plan.layer_ids),
        "meta_columns": list(WORD_COLUMNS),
        "format": "csv" if csv else "binary",
        "files": {"words": "words.csv"} if csv else {"words": "words.f32", "meta": "meta.i64"},
    }
    if csv:
        header = ",".join(list(WORD_COLUMNS) + [f"w{i}" for i in range(c)])
        body = np.concatenate([meta.astype(object), words.astype(object)], 1)
        fmt = ["%d"] * 4 + ["%.9g"] * c
        np.savetxt(out / "words.csv", body, fmt=fmt, delimiter=",", header=header, comments="")
    else:
        words.tofile(out / "words.f32")
        meta.tofile(out / "meta.i64")
    (out / "schema.json").write_text(json.dumps(schema, indent=2))
    return out


def read_words(path):
    """Inverse of :func:`export_words`; returns ``(words, meta_dict, schema)``."""
    path = Path(path)
    schema = json.loads((path / "schema.json").read_text())
    rows, c = schema["rows"], schema["word_dim"]
    if schema["format"] == "csv":
        table = np.loadtxt(path / "words.csv", delimiter=",", skiprows=1, ndmin=2)
        meta = table[:, :4].astype(np.int64)
        words = table[:, 4:].astype(np.float32)
    else:
        words = np.fromfile(path / "words.f32", dtype="<f4").reshape(rows, c)
        meta = np.fromfile(path / "meta.i64", dtype="<i8").reshape(rows, 4)
    return words, {k: meta[:, i] for i, k in enumerate(WORD_COLUMNS)}, schema
