"""Minimal-perturbation attacks: DeepFool and JSMA."""
import torch

from ..errors import NonFiniteError


def _class_grads(model, x, classes):
    """Logits at ``x`` and input gradients of each logit listed in ``classes`` (n, k)."""
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        z = model(x)
        picked = z.gather(1, classes)
        grads = []
        for j in range(classes.shape[1]):
            (g,) = torch.autograd.grad(picked[:, j].sum(), [x], retain_graph=j + 1 < classes.shape[1])
            grads.append(g)
    return z.detach(), torch.stack(grads, dim=1)


def deepfool(model, x, max_iter=50, overshoot=0.02, y=None, nb_grads=10, use_probabilities=False):
    """DeepFool toward the closest decision boundary of the source class.

    The source class is ``y`` when given, otherwise the current prediction.
    Each step moves by ``|f'| / ||w'||^2 * w'`` for the closest other class,
    where ``f'`` and ``w'`` are the output and gradient differences; the
    accumulated perturbation is scaled by ``1 + overshoot``. Outputs are logits
    unless ``use_probabilities`` is set.

    Returns ``(x_adv, iterations_used, success)``.
    """
    x = x.detach()
    n = x.shape[0]
    forward = (lambda v: torch.softmax(model(v), dim=1)) if use_probabilities else model
    with torch.no_grad():
        z0 = forward(x)
    num_classes = z0.shape[1]
    k = min(nb_grads, num_classes)
    source = z0.argmax(1) if y is None else y.clone()
    # candidate classes: source first, then the remaining top logits
    ranked = z0.clone()
    ranked.scatter_(1, source.view(-1, 1), float("inf"))
    candidates = ranked.topk(k, dim=1).indices

    r_tot = torch.zeros_like(x)
    x_adv = x.clone()
    iterations = torch.zeros(n, dtype=torch.long)
    active = z0.argmax(1) == source
    degenerate = torch.zeros(n, dtype=torch.bool)
    view = (-1,) + (1,) * (x.dim() - 1)

    for _ in range(max_iter):
        if not active.any():
            break
        idx = active.nonzero().squeeze(1)
        z, grads = _class_grads(forward, x_adv[idx], candidates[idx])
        f = z.gather(1, candidates[idx])
        f_diff = f[:, 1:] - f[:, :1]
        w_diff = grads[:, 1:] - grads[:, :1]
        w_norm = w_diff.flatten(2).norm(dim=2)
        dist = f_diff.abs() / w_norm
        dist = torch.where(w_norm > 0, dist, torch.full_like(dist, float("inf")))
        best = dist.argmin(dim=1)
        rows = torch.arange(len(idx))
        fb, wb, nb = f_diff[rows, best], w_diff[rows, best], w_norm[rows, best]
        bad = ~torch.isfinite(dist[rows, best])
        step = (fb.abs() / nb.clamp_min(1e-30) ** 2).view(view) * wb
        step[bad] = 0
        if not torch.isfinite(step).all():
            raise NonFiniteError("non-finite DeepFool step")
        r_tot[idx] = r_tot[idx] + step
        x_adv[idx] = torch.clamp(x[idx] + (1 + overshoot) * r_tot[idx], 0.0, 1.0)
        iterations[idx] += 1
        degenerate[idx[bad]] = True
        with torch.no_grad():
            still = forward(x_adv[idx]).argmax(1) == source[idx]
        active[idx] = still & ~bad

    with torch.no_grad():
        success = (forward(x_adv).argmax(1) != source) & ~degenerate
    x_adv[degenerate] = x[degenerate]
    return x_adv, iterations, success


def saliency_map(j_target, j_others):
    """Per-feature saliency ``J_t * |sum_{j!=t} J_j|``, zero where ``J_t < 0`` or the off-target sum is positive."""
    s = j_target * j_others.abs()
    return torch.where((j_target < 0) | (j_others > 0), torch.zeros_like(s), s)


def jsma(model, x, target, theta=1.0, gamma=0.1):
    """Jacobian saliency-map attack increasing one feature by ``theta`` per step.

    Stops per example once the prediction equals ``target`` or
    ``floor(gamma * P)`` features have been modified. Returns
    ``(x_adv, n_modified, success)``; examples whose saliency map became
    identically zero stop early with ``success`` false.
    """
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    x_adv = x.detach().clone()
    n = x.shape[0]
    flat_dim = x[0].numel()
    budget = int(gamma * flat_dim)
    # features that can still move up
    search = (x_adv.reshape(n, -1) < 1.0).clone()
    modified = torch.zeros(n, dtype=torch.long)
    with torch.no_grad():
        active = model(x_adv).argmax(1) != target
    stuck = torch.zeros(n, dtype=torch.bool)

    while active.any():
        idx = active.nonzero().squeeze(1)
        xa = x_adv[idx].detach().requires_grad_(True)
        with torch.enable_grad():
            z = model(xa)
            t = target[idx]
            z_t = z.gather(1, t.view(-1, 1)).squeeze(1)
            (j_t,) = torch.autograd.grad(z_t.sum(), [xa], retain_graph=True)
            (j_all,) = torch.autograd.grad(z.sum(), [xa])
        j_t = j_t.reshape(len(idx), -1)
        j_o = j_all.reshape(len(idx), -1) - j_t
        s = saliency_map(j_t, j_o)
        s = torch.where(search[idx], s, torch.zeros_like(s))
        top_val, top = s.max(dim=1)
        zero = top_val <= 0
        stuck[idx[zero]] = True
        go = idx[~zero]
        feat = top[~zero]
        flat = x_adv.reshape(n, -1)
        flat[go, feat] = torch.clamp(flat[go, feat] + theta, 0.0, 1.0)
        x_adv = flat.reshape(x.shape)
        search[go, feat] = False
        modified[go] += 1
        with torch.no_grad():
            done = model(x_adv[idx]).argmax(1) == target[idx]
        active[idx] = ~done & ~zero & (modified[idx] < budget)

    with torch.no_grad():
        success = model(x_adv).argmax(1) == target
    return x_adv, modified, success
