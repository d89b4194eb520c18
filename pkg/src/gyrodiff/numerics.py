"""Dense tensor substrate: precision control, checked primitives, gradients.

Reverse-mode differentiation is delegated to torch autograd; the recorded
autograd graph plays the role of the gradient tape. The finite-difference
checker below is independent of autograd and is what every learnable path
is validated against.
"""

from __future__ import annotations

from typing import Callable, Iterable

import torch

__all__ = [
    "DimensionError",
    "DomainError",
    "set_precision",
    "get_dtype",
    "precision",
    "tensor",
    "matmul",
    "softmax",
    "backward",
    "gradcheck",
]


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain."""


_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_state = {"dtype": torch.float32}


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]
    torch.set_default_dtype(_DTYPES[name])


def get_dtype() -> torch.dtype:
    return _state["dtype"]


class precision:
    """Context manager that temporarily switches the working precision."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        self._prev = {v: k for k, v in _DTYPES.items()}[_state["dtype"]]
        set_precision(self.name)
        return self

    def __exit__(self, *exc):
        set_precision(self._prev)
        return False


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=get_dtype()).clone()
    _check_finite(t, "tensor")
    return t.requires_grad_(requires_grad)


def _check_finite(t: torch.Tensor, op: str) -> None:
    if not torch.isfinite(t).all():
        raise DomainError(f"{op}: non-finite entries")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {tuple(a.shape)} @ {tuple(b.shape)}")
    out = a @ b
    _check_finite(out, "matmul")
    return out


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if torch.isnan(x).any():
        raise DomainError("softmax: NaN input")
    # masked entries may be -inf; a row that is entirely -inf is a caller bug
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    out = e / e.sum(dim=axis, keepdim=True)
    _check_finite(out, "softmax")
    return out


def backward(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> dict[torch.Tensor, torch.Tensor]:
    """Gradients of a scalar loss with respect to ``params``.

    Parameters that did not participate in the forward pass get zero gradients.
    """
    if loss.numel() != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    params = list(params)
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    return {p: (torch.zeros_like(p) if g is None else g) for p, g in zip(params, grads)}


def gradcheck(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-4) -> float:
    """Max relative error between the autograd gradient and central differences.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|), with
    numeric = (f(x + h e_i) - f(x - h e_i)) / (2h).
    """
    x0 = x.detach().clone()
    xg = x0.clone().requires_grad_(True)
    val = f(xg)
    if val.numel() != 1:
        raise DimensionError("gradcheck: f must return a scalar")
    if not torch.isfinite(val).all():
        raise DomainError("gradcheck: f is non-finite at x")
    (analytic,) = torch.autograd.grad(val.reshape(()), xg, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)
    analytic = analytic.reshape(-1)

    flat = x0.reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += h
            xm[i] -= h
            fp = f(xp.reshape(x0.shape))
            fm = f(xm.reshape(x0.shape))
            if not (torch.isfinite(fp).all() and torch.isfinite(fm).all()):
                raise DomainError(f"gradcheck: f is non-finite near coordinate {i}")
            numeric = (fp - fm).item() / (2 * h)
            a = analytic[i].item()
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
