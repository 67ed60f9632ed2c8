"""Optimization-based targeted attacks: Carlini-Wagner L2 and elastic-net (EAD)."""
import torch


def margin_loss(z, target, confidence):
    """``max(max_{j != t} z_j - z_t, -confidence)`` per example."""
    z_t = z.gather(1, target.view(-1, 1)).squeeze(1)
    others = z.scatter(1, target.view(-1, 1), float("-inf")).amax(dim=1)
    return torch.clamp(others - z_t, min=-confidence)


def update_constants(const, lower, upper, success):
    """One bisection step on the trade-off constant, element-wise.

    Success lowers the upper bound and tries a smaller constant; failure raises
    the lower bound and grows the constant tenfold until an upper bound exists.
    """
    upper = torch.where(success, torch.minimum(upper, const), upper)
    lower = torch.where(success, lower, torch.maximum(lower, const))
    bounded = torch.isfinite(upper)
    new = torch.where(bounded, (lower + upper) / 2, const * 10)
    return new, lower, upper


def _to_tanh(x):
    return torch.atanh((2 * x - 1) * (1 - 1e-6))


def _from_tanh(w):
    return (torch.tanh(w) + 1) / 2


def cw_l2(
    model,
    x,
    target,
    binary_search_steps=5,
    steps=1000,
    stepsize=0.01,
    confidence=0.8,
    initial_const=0.1,
):
    """Minimise ``||delta||_2 + a * margin_loss`` with ``a`` tuned by binary search.

    The box constraint is handled in tanh space and each inner problem is
    solved with Adam. Returns ``(x_adv, success)``; failed examples are
    returned unchanged.
    """
    x = x.detach()
    n = x.shape[0]
    const = torch.full((n,), float(initial_const))
    lower = torch.zeros(n)
    upper = torch.full((n,), float("inf"))
    best_l2 = torch.full((n,), float("inf"))
    best_adv = x.clone()
    w0 = _to_tanh(x)

    for _ in range(binary_search_steps):
        w = w0.clone().requires_grad_(True)
        opt = torch.optim.Adam([w], lr=stepsize)
        round_success = torch.zeros(n, dtype=torch.bool)
        for _ in range(steps):
            with torch.enable_grad():
                x_new = _from_tanh(w)
                delta = (x_new - x).flatten(1)
                l2 = torch.sqrt((delta**2).sum(1) + 1e-12)
                z = model(x_new)
                loss = (l2 + const * margin_loss(z, target, confidence)).sum()
                opt.zero_grad()
                loss.backward()
            with torch.no_grad():
                ok = z.argmax(1) == target
                better = ok & (l2 < best_l2)
                best_l2 = torch.where(better, l2, best_l2)
                best_adv[better] = x_new[better].detach()
                round_success |= ok
            opt.step()
        const, lower, upper = update_constants(const, lower, upper, round_success)
    success = torch.isfinite(best_l2)
    return best_adv, success


def soft_threshold(z, beta):
    """Closed-form shrinkage ``sign(z) * max(|z| - beta, 0)``."""
    return torch.sign(z) * torch.clamp(z.abs() - beta, min=0.0)


def shrink_project(z, x0, beta):
    """ISTA proximal step for the l1 term around ``x0``, projected onto [0, 1]."""
    return torch.clamp(x0 + soft_threshold(z - x0, beta), 0.0, 1.0)


def ead_objective(z, target, x_tilde, x0, const, beta, confidence):
    d = (x_tilde - x0).flatten(1)
    return const * margin_loss(z, target, confidence) + beta * d.abs().sum(1) + (d**2).sum(1)


def select_best(distances, success, decision_rule="L1"):
    """Index of the successful candidate with the smallest distance, or -1."""
    d = torch.as_tensor(distances, dtype=torch.float64)
    ok = torch.as_tensor(success, dtype=torch.bool)
    if not ok.any():
        return -1
    return int(torch.where(ok, d, torch.full_like(d, float("inf"))).argmin())


def ead(
    model,
    x,
    target,
    binary_search_steps=9,
    steps=1000,
    confidence=0.8,
    initial_const=0.1,
    beta=0.01,
    initial_stepsize=0.01,
    decision_rule="L1",
):
    """Elastic-net attack solved with FISTA and soft-thresholding at ``beta``.

    ``decision_rule`` picks, among successful iterates, the one with the
    smallest l1 distance (``"L1"``) or elastic-net distance (``"EN"``).
    Returns ``(x_adv, success)``.
    """
    if decision_rule not in ("L1", "EN"):
        raise ValueError("decision_rule must be 'L1' or 'EN'")
    x = x.detach()
    n = x.shape[0]
    const = torch.full((n,), float(initial_const))
    lower = torch.zeros(n)
    upper = torch.full((n,), float("inf"))
    best_dist = torch.full((n,), float("inf"))
    best_adv = x.clone()

    for _ in range(binary_search_steps):
        x_k = x.clone()
        y_k = x.clone()
        round_success = torch.zeros(n, dtype=torch.bool)
        for k in range(steps):
            lr = initial_stepsize * (1 - k / steps) ** 0.5
            y_var = y_k.detach().requires_grad_(True)
            with torch.enable_grad():
                z = model(y_var)
                smooth = const * margin_loss(z, target, confidence) + ((y_var - x).flatten(1) ** 2).sum(1)
                (g,) = torch.autograd.grad(smooth.sum(), [y_var])
            x_next = shrink_project(y_k - lr * g, x, beta)
            y_k = x_next + k / (k + 3.0) * (x_next - x_k)
            x_k = x_next
            with torch.no_grad():
                ok = model(x_k).argmax(1) == target
                d = (x_k - x).flatten(1)
                l1 = d.abs().sum(1)
                dist = l1 if decision_rule == "L1" else beta * l1 + (d**2).sum(1)
                better = ok & (dist < best_dist)
                best_dist = torch.where(better, dist, best_dist)
                best_adv[better] = x_k[better]
                round_success |= ok
        const, lower, upper = update_constants(const, lower, upper, round_success)
    return best_adv, torch.isfinite(best_dist)
