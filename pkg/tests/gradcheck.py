"""Central-difference gradient oracle shared by the gradient tests."""

import numpy as np
import torch


def numeric_grad(fn, tensor: torch.Tensor, eps: float) -> torch.Tensor:
    """d fn() / d tensor by central differences, perturbing entries in place."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = float(fn())
            flat[i] = orig - eps
            minus = float(fn())
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * eps)
    return grad


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    a = analytic.detach().double().flatten().numpy()
    n = numeric.detach().double().flatten().numpy()
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
    return float(np.abs(a - n).max() / scale)


def check(fn, tensors, eps=1e-6, tol=1e-5) -> float:
    """Compare autograd against central differences for every tensor; returns worst error."""
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.clone() if t.grad is not None else torch.zeros_like(t)
        worst = max(worst, rel_error(analytic, numeric_grad(fn, t, eps)))
    assert worst <= tol, f"gradient relative error {worst:.3g} > {tol}"
    return worst


def check_single(build, eps=1e-6, tol=1e-3) -> float:
    """Float32 autograd against a float64 central-difference oracle.

    ``build(dtype)`` must return (loss_fn, tensors) with identical values for
    both dtypes; float32 differencing is too noisy to serve as the oracle.
    """
    fn32, ts32 = build(torch.float32)
    for t in ts32:
        t.grad = None
    fn32().backward()
    fn64, ts64 = build(torch.float64)
    worst = 0.0
    for t32, t64 in zip(ts32, ts64):
        analytic = t32.grad if t32.grad is not None else torch.zeros_like(t32)
        worst = max(worst, rel_error(analytic, numeric_grad(fn64, t64, eps)))
    assert worst <= tol, f"gradient relative error {worst:.3g} > {tol}"
    return worst
