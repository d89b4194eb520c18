"""Latent DDPM: schedule, corruption, conditional denoiser, guided samplers, self-guidance.

Latents are packed per graph into one tensor of rows (B, R, D): the N node
rows first, then the N*N edge rows in row-major (i, j) order. Prediction
tasks use node rows only (R = N). A boolean node mask (B, N) marks real
nodes; padded rows are kept at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .encoder import GraphTransformerLayer
from .numerics import DimensionError, softmax


@dataclass
class NoiseSchedule:
    """Index 0 is the clean state: alpha_bar[0] = 1, beta[0] = 0."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T < 1 or not (0 < beta_1 <= beta_T < 1):
        raise ValueError(f"invalid schedule: T={T}, beta_1={beta_1}, beta_T={beta_T}")
    beta = np.concatenate([[0.0], np.linspace(beta_1, beta_T, T)])
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha))


def _check_t(t, sched: NoiseSchedule):
    tt = torch.as_tensor(t)
    if bool((tt < 1).any()) or bool((tt > sched.T).any()):
        raise ValueError(f"timestep out of range [1, {sched.T}]")


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    c = torch.as_tensor(values, dtype=like.dtype)[torch.as_tensor(t)]
    return c.reshape(c.shape + (1,) * (like.dim() - c.dim()))


def forward_sample(Z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Z_t = sqrt(alpha_bar_t) Z0 + sqrt(1 - alpha_bar_t) eps; ``t`` is an int or a (B,) tensor."""
    _check_t(t, sched)
    ab = _coef(sched.alpha_bar, t, Z0)
    return ab.sqrt() * Z0 + (1.0 - ab).sqrt() * eps


def row_mask(mask: torch.Tensor, with_edges: bool) -> torch.Tensor:
    if not with_edges:
        return mask
    em = mask[:, :, None] & mask[:, None, :]
    return torch.cat([mask, em.flatten(1)], dim=1)


def pack(z_x: torch.Tensor, z_e: Optional[torch.Tensor] = None) -> torch.Tensor:
    if z_e is None:
        return z_x
    return torch.cat([z_x, z_e.flatten(1, 2)], dim=1)


def unpack(z: torch.Tensor, n: int, with_edges: bool = True):
    if not with_edges:
        return z, None
    return z[:, :n], z[:, n:].reshape(z.shape[0], n, n, z.shape[-1])


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.get_default_dtype()) / half)
    args = t.to(freqs.dtype)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ConditionEmbedder(nn.Module):
    """Maps a condition to one token of width ``hidden``.

    kinds: "none" (null token only), "class" (embedding table), "scalar"
    (MLP on (v, v^2, sin v)), "latent" (linear projection of a vector).
    """

    def __init__(self, kind: str, hidden: int, num_classes: int = 0, cond_dim: int = 0):
        super().__init__()
        if kind not in ("none", "class", "scalar", "latent"):
            raise ValueError(f"unknown condition kind {kind!r}")
        self.kind = kind
        self.hidden = hidden
        self.null = nn.Parameter(0.02 * torch.randn(hidden))
        if kind == "class":
            self.table = nn.Embedding(num_classes, hidden)
        elif kind == "scalar":
            self.mlp = nn.Sequential(nn.Linear(3, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        elif kind == "latent":
            self.proj = nn.Linear(cond_dim, hidden)

    def null_tokens(self, batch: int) -> torch.Tensor:
        return self.null.expand(batch, 1, self.hidden)

    def forward(self, y) -> torch.Tensor:
        if self.kind == "none":
            raise ValueError("an unconditional embedder only has the null token")
        if self.kind == "class":
            return self.table(torch.as_tensor(y, dtype=torch.long))[:, None, :]
        y = torch.as_tensor(y, dtype=self.null.dtype)
        if self.kind == "scalar":
            y = y.reshape(-1, 1)
            return self.mlp(torch.cat([y, y * y, torch.sin(y)], dim=-1))[:, None, :]
        return self.proj(y)[:, None, :]


class CrossAttention(nn.Module):
    """softmax((Q z)(K tau)^T / sqrt(d')) V tau over the condition tokens."""

    def __init__(self, hidden: int):
        super().__init__()
        self.Q = nn.Linear(hidden, hidden, bias=False)
        self.K = nn.Linear(hidden, hidden, bias=False)
        self.V = nn.Linear(hidden, hidden, bias=False)
        self.scale = 1.0 / math.sqrt(hidden)

    def forward(self, z: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        # z (B, ..., h), tokens (B, S, h)
        B = z.shape[0]
        flat = z.reshape(B, -1, z.shape[-1])
        scores = self.Q(flat) @ self.K(tokens).transpose(1, 2) * self.scale
        out = softmax(scores, axis=-1) @ self.V(tokens)
        return out.reshape(z.shape)


class DenoiserBlock(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.attn = GraphTransformerLayer(hidden, heads)
        self.cross_x = CrossAttention(hidden)
        self.cross_e = CrossAttention(hidden)
        self.n1x, self.n1e = nn.LayerNorm(hidden), nn.LayerNorm(hidden)
        self.n2x, self.n2e = nn.LayerNorm(hidden), nn.LayerNorm(hidden)
        self.mlp_x = nn.Sequential(nn.Linear(hidden, 2 * hidden), nn.SiLU(), nn.Linear(2 * hidden, hidden))
        self.mlp_e = nn.Sequential(nn.Linear(hidden, 2 * hidden), nn.SiLU(), nn.Linear(2 * hidden, hidden))
        self.n3x, self.n3e = nn.LayerNorm(hidden), nn.LayerNorm(hidden)

    def forward(self, x, e, tokens, mask):
        dx, de = self.attn(x, e, mask)
        x = self.n1x(x + dx)
        e = self.n1e(e + de)
        x = self.n2x(x + self.cross_x(x, tokens))
        e = self.n2e(e + self.cross_e(e, tokens))
        x = self.n3x(x + self.mlp_x(x))
        e = self.n3e(e + self.mlp_e(e))
        return x, e


class Denoiser(nn.Module):
    """Noise predictor: dense graph-transformer layers with cross-attention to the condition.

    No positional encoding and no adjacency prior. The node count enters next
    to the time embedding, since attention averages cannot recover degree
    sums without it. With ``with_edges`` False
    the input holds node rows only and edge states start from the time
    embedding alone.

    Given ``alpha_bar`` the network output F is preconditioned as
    eps_hat = sqrt(1 - alpha_bar_t) z_t + sqrt(alpha_bar_t) F, which is exact
    for unit-variance Gaussian data at F = 0 and keeps high-noise steps stable.
    """

    def __init__(
        self,
        d_in: int,
        hidden: int = 64,
        layers: int = 4,
        heads: int = 4,
        cond_kind: str = "none",
        num_classes: int = 0,
        cond_dim: int = 0,
        with_edges: bool = True,
        alpha_bar: Optional[np.ndarray] = None,
    ):
        super().__init__()
        self.d_in = d_in
        self.hidden = hidden
        self.with_edges = with_edges
        self.in_x = nn.Linear(d_in, hidden)
        self.in_e = nn.Linear(d_in, hidden)
        self.time_mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.size_emb = nn.Linear(hidden, hidden)
        self.blocks = nn.ModuleList(DenoiserBlock(hidden, heads) for _ in range(layers))
        self.out_x = nn.Linear(hidden, d_in)
        self.out_e = nn.Linear(hidden, d_in)
        self.cond = ConditionEmbedder(cond_kind, hidden, num_classes, cond_dim)
        self.precondition = alpha_bar is not None
        if self.precondition:
            # rebuilt from the schedule on load, so kept out of the state dict
            self.register_buffer("alpha_bar", torch.as_tensor(np.asarray(alpha_bar), dtype=torch.get_default_dtype()), persistent=False)

    def forward(self, z: torch.Tensor, t: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.d_in:
            raise DimensionError(f"denoiser expects width {self.d_in}, got {z.shape[-1]}")
        B, N = mask.shape
        z_x, z_e = unpack(z, N, self.with_edges)
        temb = self.time_mlp(timestep_embedding(torch.as_tensor(t).reshape(B), self.hidden))
        temb = temb + self.size_emb(timestep_embedding(mask.sum(1), self.hidden))
        x = self.in_x(z_x) + temb[:, None, :]
        if z_e is None:
            e = temb[:, None, None, :].expand(B, N, N, self.hidden)
        else:
            e = self.in_e(z_e) + temb[:, None, None, :]
        for blk in self.blocks:
            x, e = blk(x, e, tokens, mask)
        out = pack(self.out_x(x), self.out_e(e) if self.with_edges else None)
        if self.precondition:
            ab = self.alpha_bar.to(out.dtype)[torch.as_tensor(t).reshape(B)][:, None, None]
            out = (1.0 - ab).sqrt() * z + ab.sqrt() * out
        return out * row_mask(mask, self.with_edges)[..., None].to(out.dtype)


@dataclass
class GuidanceConfig:
    mode: str = "cfgpp"
    lambda_g: float = 0.6
    w: float = 1.0
    p_uncond: float = 0.1
    literal_eq9: bool = False

    def __post_init__(self):
        if self.mode not in ("cfgpp", "cfg", "none", "cond"):
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if not 0.0 <= self.lambda_g <= 1.0:
            raise ValueError("lambda_g must lie in [0, 1]")
        # p_uncond = 1 is allowed: it trains a purely unconditional model
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")


def guided_noise(eps_c, eps_u, lambda_g: float, literal: bool = False):
    """eps_u + lambda (eps_c - eps_u); ``literal`` gives (1 - lambda) eps_c - lambda eps_u instead."""
    if not 0.0 <= lambda_g <= 1.0:
        raise ValueError("lambda_g must lie in [0, 1]")
    if literal:
        return (1.0 - lambda_g) * eps_c - lambda_g * eps_u
    return eps_u + lambda_g * (eps_c - eps_u)


def ddim_update(z_t, t: int, eps_clean, eps_renoise, sched: NoiseSchedule):
    """Deterministic step: estimate Z0 with ``eps_clean``, renoise to t-1 with ``eps_renoise``."""
    _check_t(t, sched)
    ab_t = float(sched.alpha_bar[t])
    ab_prev = float(sched.alpha_bar[t - 1])
    z0 = (z_t - math.sqrt(1.0 - ab_t) * eps_clean) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * z0 + math.sqrt(1.0 - ab_prev) * eps_renoise


def _tvec(t: int, B: int) -> torch.Tensor:
    return torch.full((B,), int(t), dtype=torch.long)


def eps_pair(model: Denoiser, z_t, t: int, tokens, mask):
    """Conditional and unconditional predictions from one doubled batch."""
    B = z_t.shape[0]
    null = model.cond.null_tokens(B)
    out = model(torch.cat([z_t, z_t]), _tvec(t, 2 * B), torch.cat([tokens, null]), torch.cat([mask, mask]))
    return out[:B], out[B:]


def uncond_step(model: Denoiser, z_t, t: int, mask, sched: NoiseSchedule):
    B = z_t.shape[0]
    eps_u = model(z_t, _tvec(t, B), model.cond.null_tokens(B), mask)
    return ddim_update(z_t, t, eps_u, eps_u, sched)


def cond_step(model: Denoiser, z_t, t: int, tokens, mask, sched: NoiseSchedule):
    eps_c = model(z_t, _tvec(t, z_t.shape[0]), tokens, mask)
    return ddim_update(z_t, t, eps_c, eps_c, sched)


def cfgpp_step(model: Denoiser, z_t, t: int, tokens, lambda_g: float, sched: NoiseSchedule, mask, literal=False):
    eps_c, eps_u = eps_pair(model, z_t, t, tokens, mask)
    return ddim_update(z_t, t, guided_noise(eps_c, eps_u, lambda_g, literal), eps_u, sched)


def cfg_step(model: Denoiser, z_t, t: int, tokens, w: float, sched: NoiseSchedule, mask):
    eps_c, eps_u = eps_pair(model, z_t, t, tokens, mask)
    eps = (1.0 + w) * eps_c - w * eps_u
    return ddim_update(z_t, t, eps, eps, sched)


@torch.no_grad()
def sample(
    model: Denoiser,
    mask: torch.Tensor,
    tokens: Optional[torch.Tensor],
    guidance: GuidanceConfig,
    sched: NoiseSchedule,
    seed: int = 0,
    trace: Optional[list] = None,
) -> torch.Tensor:
    """Run the reverse process from Z_T ~ N(0, I) down to Z_0.

    ``tokens`` is the (B, 1, h) condition; None forces unconditional sampling.
    """
    B, N = mask.shape
    R = N + N * N if model.with_edges else N
    gen = torch.Generator().manual_seed(int(seed))
    rm = row_mask(mask, model.with_edges)[..., None].to(torch.get_default_dtype())
    z = torch.randn((B, R, model.d_in), generator=gen) * rm
    mode = "none" if tokens is None else guidance.mode
    for t in range(sched.T, 0, -1):
        if mode == "cfgpp":
            z = cfgpp_step(model, z, t, tokens, guidance.lambda_g, sched, mask, guidance.literal_eq9)
        elif mode == "cfg":
            z = cfg_step(model, z, t, tokens, guidance.w, sched, mask)
        elif mode == "cond":
            z = cond_step(model, z, t, tokens, mask, sched)
        else:
            z = uncond_step(model, z, t, mask, sched)
        z = z * rm
        if trace is not None:
            trace.append((t, float(z.norm())))
    return z


def diffusion_loss(
    model: Callable,
    Z0: torch.Tensor,
    tokens: Optional[torch.Tensor],
    mask: torch.Tensor,
    sched: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    p_uncond: float = 0.1,
    null_tokens: Optional[torch.Tensor] = None,
    with_edges: bool = True,
    t: Optional[torch.Tensor] = None,
    eps: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Masked mean of (eps_hat - eps)^2 for uniformly drawn t and condition dropout."""
    B = Z0.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    if eps is None:
        eps = torch.randn(Z0.shape, generator=generator, dtype=Z0.dtype)
    rm = row_mask(mask, with_edges)[..., None].to(Z0.dtype)
    eps = eps * rm
    z_t = forward_sample(Z0, t, eps, sched) * rm
    if null_tokens is None and hasattr(model, "cond"):
        null_tokens = model.cond.null_tokens(B)
    if tokens is None:
        tokens = null_tokens
    elif p_uncond > 0:
        drop = torch.rand((B,), generator=generator) < p_uncond
        tokens = torch.where(drop[:, None, None], null_tokens, tokens)
    eps_hat = model(z_t, t, tokens, mask)
    sq = ((eps_hat - eps) ** 2) * rm
    return sq.sum() / (rm.sum() * Z0.shape[-1]).clamp_min(1.0)


@dataclass
class PseudoLabels:
    k: int
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    seed: int
    history: list = field(default_factory=list)


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def self_guidance_labels(ZG: np.ndarray, k: int = 10, seed: int = 0, iters: int = 100) -> PseudoLabels:
    """k-means (k-means++ seeding, Lloyd iterations) on graph-level latents."""
    X = np.asarray(ZG, dtype=np.float64)
    N = X.shape[0]
    if N < k:
        raise ValueError(f"need at least k={k} points, got {N}")
    rng = np.random.default_rng(seed)
    centroids = [X[int(rng.integers(N))]]
    d2 = ((X - centroids[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(N))
        else:
            idx = int(rng.choice(N, p=d2 / total))
        centroids.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    C = np.array(centroids)

    labels = np.full(N, -1)
    history = []
    for _ in range(iters):
        D = _sq_dists(X, C)
        new = D.argmin(1)
        history.append(float(D[np.arange(N), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = labels == j
            if members.any():
                C[j] = X[members].mean(0)
            else:
                far = int(D[np.arange(N), labels].argmax())
                C[j] = X[far]
                labels[far] = j
                D[far] = 0.0
    D = _sq_dists(X, C)
    labels = D.argmin(1)
    inertia = float(D[np.arange(N), labels].sum())
    return PseudoLabels(k, C, labels, inertia, seed, history)


class LabelCodes:
    """Latent codes for prediction targets.

    Classes map to learned unit directions scaled by sqrt(D); a scalar maps to
    its standardized value times a learned unit direction scaled by sqrt(D).
    """

    def __init__(self, directions: np.ndarray, mean: float = 0.0, std: float = 1.0):
        W = np.asarray(directions, dtype=np.float64)
        if W.ndim == 1:
            W = W[None, :]
        self.D = W.shape[1]
        self.codes = W / np.linalg.norm(W, axis=1, keepdims=True) * np.sqrt(self.D)
        self.mean = float(mean)
        self.std = float(std)

    def encode_class(self, y) -> np.ndarray:
        return self.codes[np.asarray(y, dtype=np.int64)]

    def decode_class(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return _sq_dists(z, self.codes).argmin(1)

    def encode_scalar(self, y) -> np.ndarray:
        y = (np.asarray(y, dtype=np.float64) - self.mean) / self.std
        return y[:, None] * self.codes[0][None, :]

    def decode_scalar(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return z @ self.codes[0] / self.D * self.std + self.mean
