"""Central-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch


@dataclass
class GradCheckReport:
    name: str
    rel_error: float
    analytic_norm: float
    numeric_norm: float
    tolerance: float

    @property
    def passed(self) -> bool:
        # both gradients vanish: nothing to compare
        if max(self.analytic_norm, self.numeric_norm) < 1e-9:
            return True
        return self.rel_error < self.tolerance


def central_differences(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], eps: float = 1e-6):
    grads = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + eps
                hi = float(fn(*inputs))
                flat[k] = orig - eps
                lo = float(fn(*inputs))
                flat[k] = orig
                gflat[k] = (hi - lo) / (2 * eps)
            grads.append(g)
    return grads


def check_gradient(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], name: str = "",
                   eps: float = 1e-6, tolerance: float = 1e-3) -> GradCheckReport:
    """Compare autograd against central differences of a scalar ``fn``.

    ``inputs`` should be float64 leaf tensors. The relative error is
    ||g_autograd - g_fd|| / max(||g_autograd||, ||g_fd||).
    """
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(fn(*leaves), leaves, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(leaves, analytic)]
    numeric = central_differences(fn, [x.detach().clone() for x in inputs], eps)
    a = torch.cat([g.flatten() for g in analytic])
    n = torch.cat([g.flatten() for g in numeric])
    scale = max(a.norm().item(), n.norm().item())
    rel = (a - n).norm().item() / scale if scale > 0 else 0.0
    return GradCheckReport(name, rel, a.norm().item(), n.norm().item(), tolerance)
