"""Central finite-difference oracle shared by the gradient tests."""

import torch


def rel_error(a: float, n: float, floor: float = 1e-5) -> float:
    # gradients below ``floor`` (e.g. biases annihilated by a following norm) compare absolutely
    return abs(a - n) / max(abs(a), abs(n), floor)


def fd_param_check(module, loss_fn, samples_per_tensor=2, h=1e-6, seed=0, names=None):
    """Compare autograd parameter gradients of ``loss_fn()`` with central differences.

    Returns ``{param name: worst relative error}`` over sampled entries of every tensor.
    """
    gen = torch.Generator().manual_seed(seed)
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    worst = {}
    with torch.no_grad():
        for name, p in module.named_parameters():
            if names is not None and not any(name.startswith(n) for n in names):
                continue
            grad = torch.zeros_like(p) if p.grad is None else p.grad.clone()
            flat = p.view(-1)
            idx = torch.randperm(flat.numel(), generator=gen)[:samples_per_tensor]
            # always include the entry with the largest analytic gradient
            idx = torch.cat([idx, grad.view(-1).abs().argmax().view(1)])
            errs = []
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                errs.append(rel_error(grad.view(-1)[i].item(), (up - down) / (2 * h)))
            worst[name] = max(errs)
    return worst


def fd_input_check(fn, inputs, h=1e-6):
    """Worst relative error between autograd and central differences for every input element."""
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(inputs, grads):
            g = torch.zeros_like(x) if g is None else g
            flat = x.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn(*inputs).item()
                flat[i] = orig - h
                down = fn(*inputs).item()
                flat[i] = orig
                worst = max(worst, rel_error(g.view(-1)[i].item(), (up - down) / (2 * h)))
    return worst
