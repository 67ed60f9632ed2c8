"""l-infinity gradient-sign attacks: FGSM, PGD and APGD (CE or DLR loss)."""
import torch
import torch.nn.functional as F

from ..errors import NonFiniteError


def _check_box(x):
    if not torch.isfinite(x).all():
        raise NonFiniteError("input contains non-finite values")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("inputs must lie in [0, 1]")


def project_linf(x_adv, x, eps):
    """Closest point to ``x_adv`` inside the eps-ball around ``x`` and the [0, 1] box."""
    return torch.clamp(torch.min(torch.max(x_adv, x - eps), x + eps), 0.0, 1.0)


def input_grad(loss_fn, x):
    """Gradient of ``loss_fn(x).sum()`` with respect to ``x`` (per-example losses)."""
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        loss = loss_fn(x)
        (g,) = torch.autograd.grad(loss.sum(), [x])
    if not torch.isfinite(g).all():
        raise NonFiniteError("non-finite input gradient")
    return g.detach(), loss.detach()


def ce_loss(model, y):
    return lambda x: F.cross_entropy(model(x), y, reduction="none")


def fgsm(model, x, y, eps):
    """Single signed-gradient step of size ``eps`` on the cross-entropy, clipped to [0, 1]."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    _check_box(x)
    g, _ = input_grad(ce_loss(model, y), x)
    return torch.clamp(x + eps * torch.sign(g), 0.0, 1.0)


def random_init(x, eps, generator=None):
    noise = torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1
    return torch.clamp(x + eps * noise, 0.0, 1.0)


def pgd(model, x, y, eps, alpha, iters, random_start=True, generator=None, history=None):
    """Projected signed-gradient ascent on the cross-entropy inside the eps-ball.

    ``history`` (a list) receives every iterate when given. Returns the final
    iterate.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if alpha > eps + 1e-12:
        raise ValueError(f"step size {alpha} exceeds eps {eps}")
    _check_box(x)
    x = x.detach()
    x_adv = random_init(x, eps, generator) if random_start else x.clone()
    loss_fn = ce_loss(model, y)
    for _ in range(iters):
        g, _ = input_grad(loss_fn, x_adv)
        x_adv = project_linf(x_adv + alpha * torch.sign(g), x, eps)
        if history is not None:
            history.append(x_adv.clone())
    return x_adv


def dlr_loss(z, y):
    """Difference-of-logits-ratio loss per example; needs at least 3 classes."""
    if z.shape[1] < 3:
        raise ValueError("DLR loss needs at least 3 classes")
    zs, _ = z.sort(dim=1, descending=True)
    denom = zs[:, 0] - zs[:, 2]
    if (denom == 0).any():
        raise ValueError("degenerate DLR denominator: top-1 and top-3 logits coincide")
    z_y = z.gather(1, y.view(-1, 1)).squeeze(1)
    others = z.scatter(1, y.view(-1, 1), float("-inf"))
    return -(z_y - others.amax(dim=1)) / denom


def apgd_checkpoints(iters):
    """Iteration counts at which APGD re-examines its step size.

    Windows start at 22% of the budget and shrink by 3% per checkpoint down to
    a floor of 6%, in integer arithmetic as in AutoAttack.
    """
    window = max(int(0.22 * iters), 1)
    floor, shrink = max(int(0.06 * iters), 1), max(int(0.03 * iters), 1)
    points, k = [], window
    while k <= iters:
        points.append(k)
        window = max(window - shrink, floor)
        k += window
    return points


def apgd(
    model,
    x,
    y,
    eps,
    iters=100,
    loss="ce",
    step_size=None,
    momentum=0.25,
    decay=True,
    rho=0.75,
    random_start=True,
    generator=None,
    history=None,
):
    """Auto-PGD in the l-infinity ball; returns the highest-objective iterate.

    ``momentum`` weights the previous displacement (AutoAttack's step weight is
    ``1 - momentum = 0.75``). When ``decay`` is on, the step halves at each
    checkpoint where fewer than ``rho`` of the steps since the last checkpoint
    increased the objective, or where the best objective stalled without a
    reduction last time; the iterate then restarts from the best point.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    _check_box(x)
    if loss == "ce":
        loss_fn = ce_loss(model, y)
    elif loss == "dlr":
        loss_fn = lambda v: dlr_loss(model(v), y)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    x = x.detach()
    n = x.shape[0]
    view = (-1,) + (1,) * (x.dim() - 1)
    eta = torch.full((n,), 2.0 * eps if step_size is None else float(step_size), dtype=x.dtype)

    x_adv = random_init(x, eps, generator) if random_start else x.clone()
    g, cur = input_grad(loss_fn, x_adv)
    best_loss, x_best, g_best = cur.clone(), x_adv.clone(), g.clone()
    x_prev = x_adv.clone()

    checkpoints = apgd_checkpoints(iters) if decay else []
    last_ckpt = 0
    increases = torch.zeros(n)
    best_at_ckpt = best_loss.clone()
    reduced_last = torch.ones(n, dtype=torch.bool)

    for k in range(iters):
        z = project_linf(x_adv + eta.view(view) * torch.sign(g), x, eps)
        if k == 0 or momentum == 0:
            x_new = z
        else:
            a = 1.0 - momentum
            x_new = project_linf(x_adv + a * (z - x_adv) + (1 - a) * (x_adv - x_prev), x, eps)
        x_prev, x_adv = x_adv, x_new
        g, new = input_grad(loss_fn, x_adv)
        if history is not None:
            history.append(x_adv.clone())

        increases += (new > cur).float()
        cur = new
        improved = new > best_loss
        best_loss = torch.where(improved, new, best_loss)
        x_best[improved] = x_adv[improved]
        g_best[improved] = g[improved]

        if checkpoints and (k + 1) == checkpoints[0]:
            window = checkpoints.pop(0) - last_ckpt
            last_ckpt = k + 1
            oscillating = increases < rho * window
            stalled = (~reduced_last) & (best_loss <= best_at_ckpt)
            reduce = oscillating | stalled
            eta = torch.where(reduce, eta / 2, eta)
            x_adv[reduce] = x_best[reduce]
            g[reduce] = g_best[reduce]
            x_prev[reduce] = x_best[reduce]
            reduced_last = reduce
            best_at_ckpt = best_loss.clone()
            increases.zero_()
    return x_best


def objective(model, x, y, loss="ce"):
    with torch.no_grad():
        z = model(x)
        return F.cross_entropy(z, y, reduction="none") if loss == "ce" else dlr_loss(z, y)
