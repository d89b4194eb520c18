"""Per-manifold decoupling of the geometrized latent and task heads."""

from __future__ import annotations

import csv
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .numerics import DimensionError, softmax


def decouple(Z, widths: Sequence[int]) -> list:
    """Split the last axis of ``Z`` into contiguous blocks of the given widths."""
    if sum(widths) != Z.shape[-1]:
        raise DimensionError(f"decouple: widths sum to {sum(widths)}, latent is {Z.shape[-1]} wide")
    if isinstance(Z, torch.Tensor):
        return list(torch.split(Z, list(widths), dim=-1))
    cuts = np.cumsum(widths)[:-1]
    return np.split(np.asarray(Z), cuts, axis=-1)


class TaskHead(nn.Module):
    """Block projections mixed by a learned softmax weight per block, then an output map."""

    def __init__(self, widths: Sequence[int], out_dim: int, hidden: int = 64):
        super().__init__()
        self.widths = list(widths)
        self.projs = nn.ModuleList(nn.Linear(w, hidden, bias=False) for w in self.widths)
        self.block_logits = nn.Parameter(torch.zeros(len(self.widths)))
        self.out = nn.Linear(hidden, out_dim)

    def block_weights(self) -> torch.Tensor:
        return softmax(self.block_logits, axis=0)

    def forward(self, blocks) -> torch.Tensor:
        return head_forward(self, blocks)


def head_forward(head: TaskHead, blocks) -> torch.Tensor:
    if len(blocks) != len(head.widths) or any(b.shape[-1] != w for b, w in zip(blocks, head.widths)):
        raise DimensionError("head_forward: blocks do not match the head's widths")
    w = head.block_weights()
    combined = sum(w[i] * proj(b) for i, (proj, b) in enumerate(zip(head.projs, blocks)))
    return head.out(torch.relu(combined))


class Decoder(nn.Module):
    """Reconstruction heads for nodes and edges plus optional prediction heads.

    ``tasks`` maps head name to output arity, e.g. {"node_class": 3} or
    {"graph_regress": 1}.
    """

    def __init__(
        self,
        widths: Sequence[int],
        num_node_types: int,
        num_edge_types: int,
        hidden: int = 64,
        tasks: Optional[dict] = None,
        reconstruct: bool = True,
    ):
        super().__init__()
        self.widths = list(widths)
        self.reconstruct = reconstruct
        if reconstruct:
            self.node_head = TaskHead(widths, num_node_types, hidden)
            self.edge_head = TaskHead(widths, num_edge_types, hidden)
        self.task_heads = nn.ModuleDict({k: TaskHead(widths, v, hidden) for k, v in (tasks or {}).items()})

    def node_logits(self, z_x):
        return self.node_head(decouple(z_x, self.widths))

    def edge_logits(self, z_e):
        logits = self.edge_head(decouple(z_e, self.widths))
        return 0.5 * (logits + logits.transpose(1, 2))

    def task(self, name: str, z):
        return self.task_heads[name](decouple(z, self.widths))

    def heads(self) -> dict:
        out = {}
        if self.reconstruct:
            out["reconstruct_nodes"] = self.node_head
            out["reconstruct_edges"] = self.edge_head
        out.update(self.task_heads)
        return out


def manifold_weight_rows(decoder: Decoder, signs: Sequence[int]) -> list[tuple]:
    rows = []
    for name, head in decoder.heads().items():
        w = head.block_weights().detach().cpu().numpy()
        for s, wi in zip(signs, w):
            rows.append((name, int(s), float(wi)))
    return rows


def write_manifold_weights(path, decoder: Decoder, signs: Sequence[int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["task", "curvature_sign", "weight"])
        for task, s, w in manifold_weight_rows(decoder, signs):
            wr.writerow([task, s, repr(w)])


def verify_product_eigen(k1: int, k2: int, grid: int = 256) -> tuple[float, float]:
    """Finite-difference check that eigenvalues add for products of eigenfunctions.

    On the flat torus [0, 2pi)^2, g_i = cos(k_i theta_i) are eigenfunctions of
    -Laplacian with eigenvalue k_i^2. The product is fed through a periodic
    5-point Laplacian and its eigenvalue is fitted by least squares; the
    factors are measured the same way and additivity is asserted.
    Returns (measured eigenvalue of the product, k1^2 + k2^2).
    """
    if grid < 64:
        raise ValueError("grid must be >= 64")
    h = 2 * np.pi / grid
    theta = np.arange(grid) * h
    t1, t2 = np.meshgrid(theta, theta, indexing="ij")
    g1 = np.cos(k1 * t1)
    g2 = np.cos(k2 * t2)

    def neg_laplacian(f):
        lap = (
            np.roll(f, 1, 0) + np.roll(f, -1, 0) + np.roll(f, 1, 1) + np.roll(f, -1, 1) - 4 * f
        ) / h**2
        return -lap

    def fit(f):
        return float(np.sum(neg_laplacian(f) * f) / np.sum(f * f))

    lam1, lam2 = fit(g1), fit(g2)
    g = g1 * g2
    lam = fit(g)
    resid = np.max(np.abs(neg_laplacian(g) - (lam1 + lam2) * g))
    assert resid < 1e-6 * max(1.0, lam1 + lam2), f"eigenvalue additivity violated (residual {resid:.3g})"
    return lam, float(k1 * k1 + k2 * k2)
