"""Edge-enhanced graph transformer encoder producing node, edge and graph latents.

All tensors are dense and padded: nodes (B, N, h), edges (B, N, N, h) and a
boolean node mask (B, N). Attention runs over every ordered pair of valid
nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .graph import Graph
from .gyrokernel import geometrize
from .numerics import softmax

DEGREE_CAP = 16


def rho(x: torch.Tensor) -> torch.Tensor:
    """Signed square root, sqrt(relu(x)) - sqrt(relu(-x)).

    Written as sign(x) * sqrt(|x|) with the magnitude clamped away from zero so
    the gradient is finite (and zero) at the origin.
    """
    return torch.sign(x) * torch.sqrt(x.abs().clamp_min(1e-30))


@dataclass
class GraphBatch:
    node_type: torch.Tensor  # (B, N) long
    edge_type: torch.Tensor  # (B, N, N) long
    mask: torch.Tensor  # (B, N) bool
    pe: torch.Tensor  # (B, N, P)

    @property
    def edge_mask(self) -> torch.Tensor:
        return self.mask[:, :, None] & self.mask[:, None, :]


@lru_cache(maxsize=None)
def laplacian_eigvecs(G: Graph, k: int) -> np.ndarray:
    """The ``k`` lowest eigenvectors of the symmetric normalized Laplacian, zero-padded."""
    A = G.adjacency.astype(np.float64)
    deg = A.sum(1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-12)), 0.0)
    L = np.eye(G.n) - inv_sqrt[:, None] * A * inv_sqrt[None, :]
    _, vecs = np.linalg.eigh(L)
    out = np.zeros((G.n, k))
    kk = min(k, G.n)
    out[:, :kk] = vecs[:, :kk]
    return out


def positional_features(G: Graph, pe_eig: int = 8, flip: Optional[np.ndarray] = None) -> np.ndarray:
    deg = np.minimum(G.adjacency.sum(1), DEGREE_CAP)
    onehot = np.eye(DEGREE_CAP + 1)[deg]
    if pe_eig == 0:
        return onehot
    vecs = laplacian_eigvecs(G, pe_eig)
    if flip is not None:
        vecs = vecs * flip[None, :]
    return np.concatenate([onehot, vecs], axis=1)


def collate(
    graphs: Sequence[Graph],
    pe_eig: int = 8,
    rng: Optional[np.random.Generator] = None,
    pad_to: Optional[int] = None,
) -> GraphBatch:
    """Pad graphs into a dense batch. ``rng`` draws one eigenvector sign flip for the batch."""
    B = len(graphs)
    N = max(g.n for g in graphs) if pad_to is None else pad_to
    P = DEGREE_CAP + 1 + pe_eig
    nt = np.zeros((B, N), dtype=np.int64)
    et = np.zeros((B, N, N), dtype=np.int64)
    mask = np.zeros((B, N), dtype=bool)
    pe = np.zeros((B, N, P))
    flip = None
    if rng is not None and pe_eig > 0:
        flip = rng.choice([-1.0, 1.0], size=pe_eig)
    for b, g in enumerate(graphs):
        nt[b, : g.n] = g.nodes
        et[b, : g.n, : g.n] = g.edge_type
        mask[b, : g.n] = True
        pe[b, : g.n] = positional_features(g, pe_eig, flip)
    return GraphBatch(
        torch.as_tensor(nt),
        torch.as_tensor(et),
        torch.as_tensor(mask),
        torch.as_tensor(pe, dtype=torch.get_default_dtype()),
    )


class GraphTransformerLayer(nn.Module):
    def __init__(self, hidden: int, heads: int = 4):
        super().__init__()
        if hidden % heads:
            raise ValueError("hidden must be divisible by heads")
        self.hidden = hidden
        self.heads = heads
        self.Q = nn.Linear(hidden, hidden, bias=False)
        self.K = nn.Linear(hidden, hidden, bias=False)
        self.V = nn.Linear(hidden, hidden, bias=False)
        self.W = nn.Linear(hidden, heads, bias=False)
        self.E_w = nn.Linear(hidden, hidden, bias=False)
        self.E_b = nn.Linear(hidden, hidden, bias=False)
        self.E_v = nn.Linear(hidden, hidden, bias=False)

    def forward(self, z_x, z_e, mask=None):
        return layer_forward(self, z_x, z_e, mask)


def layer_forward(params: GraphTransformerLayer, z_x, z_e, mask=None):
    """One attention layer over nodes (B, N, h) and edges (B, N, N, h).

    e'_ij = relu(rho((Q x_i * K x_j) * E_w e_ij) + E_b e_ij)
    a_ij  = softmax_j(W e'_ij)                        (one score per head)
    x'_i  = sum_j a_ij (V x_j + E_v e'_ij)
    """
    if z_x.shape[-1] != params.hidden or z_e.shape[-1] != params.hidden:
        raise ValueError("layer_forward: feature width does not match the layer")
    B, N, h = z_x.shape
    H = params.heads
    qk = params.Q(z_x)[:, :, None, :] * params.K(z_x)[:, None, :, :]
    e_new = torch.relu(rho(qk * params.E_w(z_e)) + params.E_b(z_e))
    scores = params.W(e_new)  # (B, N, N, H)
    if mask is not None:
        scores = scores.masked_fill(~mask[:, None, :, None], float("-inf"))
    alpha = softmax(scores, axis=2)
    msg = params.V(z_x)[:, None, :, :] + params.E_v(e_new)
    msg = msg.view(B, N, N, H, h // H)
    x_new = torch.einsum("bijk,bijkd->bikd", alpha, msg).reshape(B, N, h)
    return x_new, e_new


class TransformerBlock(nn.Module):
    """Attention layer wrapped in residual connections, layer norm and a node MLP."""

    def __init__(self, hidden: int, heads: int = 4):
        super().__init__()
        self.attn = GraphTransformerLayer(hidden, heads)
        self.norm_x = nn.LayerNorm(hidden)
        self.norm_e = nn.LayerNorm(hidden)
        self.mlp = nn.Sequential(nn.Linear(hidden, 2 * hidden), nn.ReLU(), nn.Linear(2 * hidden, hidden))
        self.norm_mlp = nn.LayerNorm(hidden)

    def forward(self, x, e, mask=None):
        dx, de = self.attn(x, e, mask)
        x = self.norm_x(x + dx)
        e = self.norm_e(e + de)
        x = self.norm_mlp(x + self.mlp(x))
        return x, e


@dataclass
class LatentState:
    z_x: torch.Tensor  # (B, N, d)
    z_e: torch.Tensor  # (B, N, N, d)
    z_g: torch.Tensor  # (B, d)
    mask: torch.Tensor  # (B, N)
    mu_x: Optional[torch.Tensor] = None
    logvar_x: Optional[torch.Tensor] = None
    mu_e: Optional[torch.Tensor] = None
    logvar_e: Optional[torch.Tensor] = None


def masked_means(z_x, z_e, mask):
    m = mask.to(z_x.dtype)
    n = m.sum(1).clamp_min(1.0)
    mean_x = (z_x * m[..., None]).sum(1) / n[:, None]
    em = m[:, :, None] * m[:, None, :]
    mean_e = (z_e * em[..., None]).sum((1, 2)) / (n * n)[:, None]
    return mean_x, mean_e


class GraphPool(nn.Module):
    """Z_G = P [mean(Z_X) || mean(Z_E)] over valid rows."""

    def __init__(self, d: int, d_out: Optional[int] = None):
        super().__init__()
        self.P = nn.Linear(2 * d, d if d_out is None else d_out, bias=False)

    def forward(self, z_x, z_e, mask):
        mean_x, mean_e = masked_means(z_x, z_e, mask)
        return self.P(torch.cat([mean_x, mean_e], dim=-1))


def pool_graph(pool: GraphPool, z_x, z_e, mask=None):
    if mask is None:
        mask = torch.ones(z_x.shape[:2], dtype=torch.bool)
    return pool(z_x, z_e, mask)


class Encoder(nn.Module):
    def __init__(
        self,
        num_node_types: int,
        num_edge_types: int,
        hidden: int = 64,
        d_latent: int = 16,
        layers: int = 5,
        heads: int = 4,
        pe_eig: int = 8,
    ):
        super().__init__()
        self.pe_eig = pe_eig
        self.node_emb = nn.Embedding(num_node_types, hidden)
        self.edge_emb = nn.Embedding(num_edge_types, hidden)
        self.pe_proj = nn.Linear(DEGREE_CAP + 1 + pe_eig, hidden)
        self.blocks = nn.ModuleList(TransformerBlock(hidden, heads) for _ in range(layers))
        self.mu_x = nn.Linear(hidden, d_latent)
        self.logvar_x = nn.Linear(hidden, d_latent)
        self.mu_e = nn.Linear(hidden, d_latent)
        self.logvar_e = nn.Linear(hidden, d_latent)
        for head in (self.logvar_x, self.logvar_e):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        self.pool = GraphPool(d_latent)

    def hidden_states(self, batch: GraphBatch):
        x = self.node_emb(batch.node_type) + self.pe_proj(batch.pe)
        e = self.edge_emb(batch.edge_type)
        for blk in self.blocks:
            x, e = blk(x, e, batch.mask)
        return x, e

    def forward(self, batch: GraphBatch, sample: bool = False, generator: Optional[torch.Generator] = None) -> LatentState:
        x, e = self.hidden_states(batch)
        mu_x, lv_x = self.mu_x(x), self.logvar_x(x)
        mu_e, lv_e = self.mu_e(e), self.logvar_e(e)
        if sample:
            z_x = mu_x + torch.exp(0.5 * lv_x) * torch.randn(mu_x.shape, generator=generator, dtype=mu_x.dtype)
            z_e = mu_e + torch.exp(0.5 * lv_e) * torch.randn(mu_e.shape, generator=generator, dtype=mu_e.dtype)
        else:
            z_x, z_e = mu_x, mu_e
        z_g = self.pool(z_x, z_e, batch.mask)
        return LatentState(z_x, z_e, z_g, batch.mask, mu_x, lv_x, mu_e, lv_e)


def encode(G: Graph, encoder: Encoder, sample: bool = False, generator=None) -> LatentState:
    return encoder(collate([G], encoder.pe_eig), sample=sample, generator=generator)


def geometrize_latent(Z: LatentState, Vbar: torch.Tensor) -> LatentState:
    return replace(Z, z_x=geometrize(Z.z_x, Vbar), z_e=geometrize(Z.z_e, Vbar), z_g=geometrize(Z.z_g, Vbar))
