import torch


def gen(seed: int = 0) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def central_diff_grads(fn, tensors, h: float = 1e-6):
    """Central-difference gradient of the scalar ``fn()`` w.r.t. each tensor.

    Perturbs tensor data in place and restores it; ``fn`` must recompute
    the forward pass from the tensors on every call.
    """
    grads = []
    for t in tensors:
        g = torch.zeros_like(t)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(fn().detach())
            flat[i] = orig - h
            fm = float(fn().detach())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def autograd_grads(fn, tensors):
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    out = fn()
    out.backward()
    return [torch.zeros_like(t) if t.grad is None else t.grad.detach().clone() for t in tensors]


def relative_error(approx: torch.Tensor, exact: torch.Tensor) -> float:
    # floor the denominator so genuinely-zero gradients compare by absolute error
    denom = max(float(exact.norm()), float(approx.norm()), 1e-6)
    return float((approx - exact).norm()) / denom


def check_gradients(build_fn, tensors, tol: float = 1e-3, h: float = 1e-6) -> float:
    """Compare autograd and central-difference gradients; returns the worst
    relative error over all tensors."""
    analytic = autograd_grads(build_fn, tensors)
    numeric = central_diff_grads(build_fn, tensors, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, relative_error(n, a))
    assert worst < tol, f"gradient mismatch: relative error {worst:.3e} >= {tol}"
    return worst
