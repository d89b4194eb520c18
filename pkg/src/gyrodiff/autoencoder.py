from __future__ import annotations

from typing import Optional, Sequence

import torch
from torch import nn

from .decoder import Decoder
from .encoder import Encoder, GraphBatch, LatentState, geometrize_latent
from .gyrokernel import ProductManifoldBasis


class AutoEncoder(nn.Module):
    """Encoder -> product-manifold geometrization -> decoupled decoder heads."""

    def __init__(
        self,
        num_node_types: int,
        num_edge_types: int,
        hidden: int = 64,
        d_latent: int = 16,
        layers: int = 5,
        heads: int = 4,
        pe_eig: int = 8,
        signs: Sequence[int] = (-1, 0, 1),
        ball_dim: int = 4,
        m: int = 64,
        scale: float = 1.0,
        bank_seed: int = 0,
        tasks: Optional[dict] = None,
        reconstruct: bool = True,
    ):
        super().__init__()
        self.encoder = Encoder(num_node_types, num_edge_types, hidden, d_latent, layers, heads, pe_eig)
        self.basis = ProductManifoldBasis(d_latent, signs, ball_dim, m, scale, bank_seed)
        self.decoder = Decoder(self.basis.widths, num_node_types, num_edge_types, hidden, tasks, reconstruct)

    @property
    def latent_width(self) -> int:
        return sum(self.basis.widths)

    def latents(self, batch: GraphBatch, sample: bool = False, generator=None) -> tuple[LatentState, LatentState]:
        Z = self.encoder(batch, sample=sample, generator=generator)
        return Z, geometrize_latent(Z, self.basis.project())

    def reconstruct_logits(self, Zbar: LatentState):
        return self.decoder.node_logits(Zbar.z_x), self.decoder.edge_logits(Zbar.z_e)

    @torch.no_grad()
    def decode_types(self, z_x: torch.Tensor, z_e: torch.Tensor):
        """Argmax node and edge types from geometrized latents."""
        return self.decoder.node_logits(z_x).argmax(-1), self.decoder.edge_logits(z_e).argmax(-1)
