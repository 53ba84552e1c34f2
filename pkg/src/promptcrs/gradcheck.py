"""Central finite-difference gradient checking for scalar losses."""

from __future__ import annotations

import torch


def finite_difference_grad(loss_fn, param: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of loss_fn() w.r.t. every element of param."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(loss_fn())
            flat[i] = orig - eps
            down = float(loss_fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    diff = (analytic - numeric).norm().item()
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return diff / scale


def check_gradients(
    loss_fn,
    named_params: dict[str, torch.Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> dict[str, float]:
    """Compare autograd gradients against central differences for every tensor.

    Returns the per-tensor relative errors; raises AssertionError past tol.
    """
    for p in named_params.values():
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    errors = {}
    for name, p in named_params.items():
        analytic = p.grad.clone() if p.grad is not None else torch.zeros_like(p)
        numeric = finite_difference_grad(loss_fn, p, eps)
        errors[name] = relative_error(analytic, numeric)
        if errors[name] > tol:
            raise AssertionError(
                f"gradient mismatch on {name}: rel err {errors[name]:.3e} > {tol}"
            )
    return errors
