"""White-box PGD variants that also attack the detector.

The detector loss is the cross-entropy of the detector's logits against its
ground-truth label for the crafted input (``adversarial``); ascending it
pushes the detector toward calling the input benign.
"""
import contextlib

import torch
import torch.nn.functional as F

from ..classifiers import forward_with_taps
from ..detector import ADVERSARIAL
from .gradient import _check_box, input_grad, project_linf, random_init


@contextlib.contextmanager
def _eval(*modules):
    states = [m.training for m in modules]
    for m in modules:
        m.eval()
    try:
        yield
    finally:
        for m, s in zip(modules, states):
            m.train(s)


def detector_logits(classifier, detector, x):
    _, maps = forward_with_taps(classifier, x, detector.plan, grad=True)
    return detector(maps)


def classifier_loss(classifier, y):
    return lambda v: F.cross_entropy(classifier(v), y, reduction="none")


def detector_loss(classifier, detector, y_d):
    return lambda v: F.cross_entropy(detector_logits(classifier, detector, v), y_d, reduction="none")


def _outcomes(classifier, detector, x_adv):
    with torch.no_grad():
        pred = classifier(x_adv).argmax(1)
        p_adv = torch.softmax(detector_logits(classifier, detector, x_adv), dim=1)[:, ADVERSARIAL]
    return {"predictions": pred, "p_adversarial": p_adv}


def adaptive_pgd_alternating(
    classifier, detector, x, y, eps, alpha, iters, random_start=True, generator=None, history=None
):
    """PGD alternating between the classifier loss (odd steps) and detector loss (even steps).

    Returns ``(x_adv, outcomes)`` where outcomes holds the classifier's
    predictions and the detector's adversarial probabilities on ``x_adv``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if alpha > eps + 1e-12:
        raise ValueError(f"step size {alpha} exceeds eps {eps}")
    _check_box(x)
    x = x.detach()
    y_d = torch.full((x.shape[0],), ADVERSARIAL, dtype=torch.long)
    lc, ld = classifier_loss(classifier, y), detector_loss(classifier, detector, y_d)
    with _eval(classifier, detector):
        x_adv = random_init(x, eps, generator) if random_start else x.clone()
        for step in range(1, iters + 1):
            g, _ = input_grad(lc if step % 2 == 1 else ld, x_adv)
            x_adv = project_linf(x_adv + alpha * torch.sign(g), x, eps)
            if history is not None:
                history.append(x_adv.clone())
        return x_adv, _outcomes(classifier, detector, x_adv)


def combined_direction(grad_c, grad_d, sigma):
    """``(1 - sigma) * sign(grad_c) + sigma * sign(grad_d)``."""
    return (1 - sigma) * torch.sign(grad_c) + sigma * torch.sign(grad_d)


def adaptive_pgd_combined(
    classifier, detector, x, y, eps, alpha, iters, sigma, y_d=None, random_start=True, generator=None, history=None
):
    """PGD whose step mixes the signed classifier and detector gradients with weight ``sigma``."""
    if not 0 <= sigma <= 1:
        raise ValueError("sigma must lie in [0, 1]")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if alpha > eps + 1e-12:
        raise ValueError(f"step size {alpha} exceeds eps {eps}")
    _check_box(x)
    x = x.detach()
    if y_d is None:
        y_d = torch.full((x.shape[0],), ADVERSARIAL, dtype=torch.long)
    lc, ld = classifier_loss(classifier, y), detector_loss(classifier, detector, y_d)
    with _eval(classifier, detector):
        x_adv = random_init(x, eps, generator) if random_start else x.clone()
        zeros = torch.zeros_like(x)
        for _ in range(iters):
            gc = input_grad(lc, x_adv)[0] if sigma < 1 else zeros
            gd = input_grad(ld, x_adv)[0] if sigma > 0 else zeros
            x_adv = project_linf(x_adv + alpha * combined_direction(gc, gd, sigma), x, eps)
            if history is not None:
                history.append(x_adv.clone())
        return x_adv, _outcomes(classifier, detector, x_adv)
