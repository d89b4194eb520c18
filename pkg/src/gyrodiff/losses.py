from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .numerics import DimensionError

DEFAULT_BETA = 1e-3


@dataclass
class LossReport:
    total: float
    l_tgt: float
    l_reg: float
    beta: float = DEFAULT_BETA


def kl_reg(mu: torch.Tensor, logvar: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims, averaged over rows.

    ``mask`` selects the valid rows (shape = mu.shape[:-1]).
    """
    per_row = 0.5 * (mu**2 + torch.exp(logvar) - 1.0 - logvar).sum(-1)
    if mask is None:
        return per_row.mean()
    m = mask.to(per_row.dtype)
    return (per_row * m).sum() / m.sum().clamp_min(1.0)


def _masked_ce(logits, labels, mask):
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), reduction="none")
    m = mask.reshape(-1).to(ce.dtype)
    return (ce * m).sum() / m.sum().clamp_min(1.0)


def reconstruction_loss(node_logits, edge_logits, node_type, edge_type, mask=None) -> torch.Tensor:
    """Mean node cross-entropy plus mean edge cross-entropy over unordered pairs i < j.

    Inputs are batched: node_logits (B, N, K_n), edge_logits (B, N, N, K_e),
    labels (B, N) and (B, N, N), ``mask`` (B, N) marking real nodes.
    """
    K_n, K_e = node_logits.shape[-1], edge_logits.shape[-1]
    if int(node_type.max()) >= K_n or int(edge_type.max()) >= K_e or int(node_type.min()) < 0:
        raise ValueError("reconstruction_loss: label out of range")
    B, N = node_type.shape
    if mask is None:
        mask = torch.ones(B, N, dtype=torch.bool)
    upper = torch.triu(torch.ones(N, N, dtype=torch.bool), diagonal=1)
    pair_mask = mask[:, :, None] & mask[:, None, :] & upper
    l_nodes = _masked_ce(node_logits, node_type, mask)
    if bool(pair_mask.any()):
        l_edges = _masked_ce(edge_logits, edge_type, pair_mask)
    else:
        l_edges = node_logits.new_zeros(())
    return l_nodes + l_edges


def target_loss(task: str, prediction, truth) -> torch.Tensor:
    if task == "regression":
        if prediction.shape != truth.shape:
            raise DimensionError("target_loss: prediction and truth shapes differ")
        return ((prediction - truth) ** 2).mean()
    if task == "classification":
        if prediction.shape[:-1] != truth.shape:
            raise DimensionError("target_loss: logits and labels shapes disagree")
        return F.cross_entropy(prediction.reshape(-1, prediction.shape[-1]), truth.reshape(-1))
    if task == "reconstruction":
        node_logits, edge_logits = prediction
        return reconstruction_loss(node_logits, edge_logits, *truth)
    raise ValueError(f"unknown task {task!r}")


def total_loss(l_tgt: torch.Tensor, l_reg: torch.Tensor, beta: float = DEFAULT_BETA):
    total = l_tgt + beta * l_reg
    return total, LossReport(float(total.detach()), float(l_tgt.detach()), float(l_reg.detach()), beta)
