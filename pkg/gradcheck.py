# gradcheck.py

"""Central finite-difference gradient checks for torch modules."""

import logging
from typing import Callable, Dict, Iterable, Optional

import torch
from torch import nn

logger = logging.getLogger(__name__)


@torch.no_grad()
def finite_difference_gradients(
    loss_fn: Callable[[], torch.Tensor],
    module: nn.Module,
    names: Optional[Iterable[str]] = None,
    eps: float = 1e-6,
) -> Dict[str, torch.Tensor]:
    """Numerical gradient of ``loss_fn()`` w.r.t. named parameters.

    Each coordinate is perturbed by +eps and -eps and restored exactly
    afterwards. Run in float64; the loss must be deterministic.
    """
    params = dict(module.named_parameters())
    wanted = list(names) if names is not None else list(params)
    grads: Dict[str, torch.Tensor] = {}
    for name in wanted:
        param = params[name]
        flat = param.data.view(-1)
        grad = torch.zeros_like(flat)
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + eps
            up = float(loss_fn())
            flat[i] = original - eps
            down = float(loss_fn())
            flat[i] = original
            grad[i] = (up - down) / (2.0 * eps)
        grads[name] = grad.view_as(param)
    return grads


def autograd_gradients(
    loss_fn: Callable[[], torch.Tensor],
    module: nn.Module,
    names: Optional[Iterable[str]] = None,
) -> Dict[str, torch.Tensor]:
    params = dict(module.named_parameters())
    wanted = list(names) if names is not None else list(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [params[n] for n in wanted], allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(params[n])).detach()
        for n, g in zip(wanted, grads)
    }


def compare_gradients(
    loss_fn: Callable[[], torch.Tensor],
    module: nn.Module,
    names: Optional[Iterable[str]] = None,
    eps: float = 1e-6,
    floor: float = 1e-4,
) -> Dict[str, float]:
    """Relative error between autograd and finite differences per parameter.

    Norms below ``floor`` are treated as ``floor`` so round-off on tiny
    gradients does not read as a mismatch.
    """
    wanted = list(names) if names is not None else [
        n for n, p in module.named_parameters() if p.requires_grad
    ]
    analytic = autograd_gradients(loss_fn, module, wanted)
    numeric = finite_difference_gradients(loss_fn, module, wanted, eps)
    errors = {}
    for name in wanted:
        a, n = analytic[name], numeric[name]
        scale = max(a.norm().item(), n.norm().item(), floor)
        errors[name] = (a - n).norm().item() / scale
    worst = max(errors, key=errors.get) if errors else None
    if worst is not None:
        logger.debug("Worst gradient relative error %.2e at %s", errors[worst], worst)
    return errors
