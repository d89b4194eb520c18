"""Generalized Fourier features on the gyrovector ball and the product-manifold basis.

A feature is gF(x) = A * cos(lam * s(x) + b) with the signed distance
s(x) = log((1 + kappa |x|^2) / |x - omega|^2) and amplitude
A = exp((n - 1) / 2 * s(x)). For kappa = 0 the feature is a classical random
Fourier feature cos(lam <omega, x> + b) with unit amplitude.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .numerics import DimensionError, DomainError

EPS_GUARD = 1e-8
BALL_MARGIN = 1e-4


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.get_default_dtype()
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def signed_distance(omega, x, kappa, strict: bool = True) -> torch.Tensor:
    """Signed distance between boundary direction ``omega`` and ball point ``x``.

    Broadcasts over leading axes. With ``strict`` a point outside the domain
    raises DomainError; otherwise the numerator and denominator are clamped
    (used on the training path, where basis points are kept inside the ball).
    """
    x = _as_tensor(x)
    omega = _as_tensor(omega, x)
    kappa = _as_tensor(kappa, x)
    if omega.shape[-1] != x.shape[-1]:
        raise DimensionError(f"signed_distance: widths {omega.shape[-1]} and {x.shape[-1]} differ")
    num = 1.0 + kappa * (x * x).sum(-1)
    den = ((x - omega) ** 2).sum(-1)
    if strict:
        if bool((num <= 0).any()):
            raise DomainError("signed_distance: point is outside the ball (1 + kappa|x|^2 <= 0)")
        if bool((den < EPS_GUARD**2).any()):
            raise DomainError("signed_distance: point coincides with the phase vector")
    else:
        num = num.clamp_min(EPS_GUARD)
        den = den.clamp_min(EPS_GUARD**2)
    return torch.log(num) - torch.log(den)


def eigenfunction(omega, b, lam, kappa, x, strict: bool = True) -> torch.Tensor:
    x = _as_tensor(x)
    omega = _as_tensor(omega, x)
    b = _as_tensor(b, x)
    lam = _as_tensor(lam, x)
    if isinstance(kappa, (int, float)) and kappa == 0:
        return torch.cos(lam * (omega * x).sum(-1) + b)
    n = x.shape[-1]
    s = signed_distance(omega, x, kappa, strict=strict)
    return torch.exp(0.5 * (n - 1) * s) * torch.cos(lam * s + b)


@dataclass
class GyroFeatureBank:
    """Sampled phase directions, frequencies and biases for one component.

    ``omega`` rows are uniform on the unit sphere, ``lam`` is N(0, scale^2),
    ``b`` is uniform on [0, 2 pi). ``kappa`` is the initial curvature; models
    keep the live, learnable value separately.
    """

    kappa: float
    n: int
    m: int
    omega: np.ndarray
    lam: np.ndarray
    b: np.ndarray
    seed: int
    scale: float = 1.0

    @classmethod
    def sample(cls, n: int, m: int, kappa: float, seed: int, scale: float = 1.0) -> "GyroFeatureBank":
        rng = np.random.default_rng(seed)
        omega = rng.standard_normal((m, n))
        omega /= np.linalg.norm(omega, axis=1, keepdims=True)
        lam = scale * rng.standard_normal(m)
        b = rng.uniform(0.0, 2 * np.pi, m)
        return cls(kappa=float(kappa), n=n, m=m, omega=omega, lam=lam, b=b, seed=seed, scale=scale)


def fourier_map(bank: GyroFeatureBank, x, kappa=None, strict: bool = True) -> torch.Tensor:
    """Feature vector (1/sqrt(m)) [gF_1(x), ..., gF_m(x)] for points ``x`` of shape (..., n)."""
    x = _as_tensor(x)
    if x.shape[-1] != bank.n:
        raise DimensionError(f"fourier_map: expected points of width {bank.n}, got {x.shape[-1]}")
    k = bank.kappa if kappa is None else kappa
    omega = torch.as_tensor(bank.omega, dtype=x.dtype)
    lam = torch.as_tensor(bank.lam, dtype=x.dtype)
    b = torch.as_tensor(bank.b, dtype=x.dtype)
    return _features(omega, lam, b, k, x, strict) / np.sqrt(bank.m)


def _features(omega, lam, b, kappa, x, strict):
    # x (..., n) against m directions -> (..., m)
    return eigenfunction(omega, b, lam, kappa, x.unsqueeze(-2), strict=strict)


class ProductManifoldBasis(nn.Module):
    """Learnable basis points, one per latent dimension in each curvature component.

    Curvature of component i is sign_i * exp(theta_i); Euclidean components
    (sign 0) have no curvature parameter. ``project()`` returns the feature
    matrix with one row per latent dimension and sum(m_i) columns.
    """

    def __init__(
        self,
        d_latent: int,
        signs=(-1, 0, 1),
        ball_dim: int = 4,
        m: int = 64,
        scale: float = 1.0,
        seed: int = 0,
        init_radius: float = 0.3,
    ):
        super().__init__()
        self.d_latent = d_latent
        self.signs = tuple(int(s) for s in signs)
        self.ball_dim = ball_dim
        self.m = m
        self.scale = scale
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        child = ss.spawn(len(self.signs) + 1)
        self.banks: list[GyroFeatureBank] = []
        self.thetas = nn.ParameterList()
        self.points = nn.ParameterList()
        init_rng = np.random.default_rng(child[-1])
        for i, s in enumerate(self.signs):
            bank_seed = int(child[i].generate_state(1)[0])
            bank = GyroFeatureBank.sample(ball_dim, m, float(s), bank_seed, scale)
            self.banks.append(bank)
            self.register_buffer(f"omega_{i}", torch.as_tensor(bank.omega, dtype=torch.get_default_dtype()))
            self.register_buffer(f"lam_{i}", torch.as_tensor(bank.lam, dtype=torch.get_default_dtype()))
            self.register_buffer(f"b_{i}", torch.as_tensor(bank.b, dtype=torch.get_default_dtype()))
            self.thetas.append(nn.Parameter(torch.zeros(()), requires_grad=(s != 0)))
            v = init_rng.standard_normal((d_latent, ball_dim))
            v *= init_radius / np.sqrt(ball_dim)
            self.points.append(nn.Parameter(torch.as_tensor(v, dtype=torch.get_default_dtype())))

    @property
    def widths(self) -> list[int]:
        return [self.m] * len(self.signs)

    def curvatures(self) -> list:
        out = []
        for s, th in zip(self.signs, self.thetas):
            out.append(0 if s == 0 else s * torch.exp(th))
        return out

    def component_features(self, i: int, x: torch.Tensor, strict: bool = False) -> torch.Tensor:
        kappa = self.curvatures()[i]
        omega = getattr(self, f"omega_{i}")
        lam = getattr(self, f"lam_{i}")
        b = getattr(self, f"b_{i}")
        return _features(omega, lam, b, kappa, x, strict) / np.sqrt(self.m)

    def project(self) -> torch.Tensor:
        if self._violations():
            warnings.warn("basis point outside its ball; clamping", RuntimeWarning, stacklevel=2)
            self.enforce_ball()
        blocks = [self.component_features(i, self.points[i]) for i in range(len(self.signs))]
        return torch.cat(blocks, dim=-1)

    def _violations(self) -> bool:
        with torch.no_grad():
            for s, th, v in zip(self.signs, self.thetas, self.points):
                if s < 0:
                    limit = (1 - BALL_MARGIN) / torch.exp(th).sqrt()
                    if bool((v.norm(dim=-1) > limit).any()):
                        return True
        return False

    @torch.no_grad()
    def enforce_ball(self) -> None:
        """Radially rescale basis points that left their ball (negative curvature only)."""
        for s, th, v in zip(self.signs, self.thetas, self.points):
            if s >= 0:
                continue
            limit = (1 - BALL_MARGIN) / torch.exp(th).sqrt()
            norms = v.norm(dim=-1, keepdim=True)
            factor = torch.where(norms > limit, limit / norms.clamp_min(1e-30), torch.ones_like(norms))
            v.mul_(factor)


def project_basis(P: ProductManifoldBasis) -> torch.Tensor:
    return P.project()


def geometrize(Z: torch.Tensor, Vbar: torch.Tensor) -> torch.Tensor:
    if Z.shape[-1] != Vbar.shape[0]:
        raise DimensionError(f"geometrize: latent width {Z.shape[-1]} vs basis rows {Vbar.shape[0]}")
    return Z @ Vbar
