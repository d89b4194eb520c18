"""Numerical checks and exports: stability sweep, gradient suite, eigenvalue additivity, embeddings."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch.func import functional_call

from .config import RunConfig
from .decoder import Decoder, verify_product_eigen, write_manifold_weights
from .diffusion import CrossAttention, Denoiser, diffusion_loss, make_schedule
from .encoder import GraphTransformerLayer
from .graph import Graph
from .gyrokernel import GyroFeatureBank, ProductManifoldBasis, _features, fourier_map
from .losses import kl_reg, reconstruction_loss, target_loss
from .manifolds import exp_log_roundtrip
from .numerics import gradcheck, precision

EXP_LOG_NORMS = tuple(float(v) for v in range(0, 55, 5))
BOUNDARY_FRACTIONS = (0.0, 0.5, 0.9, 0.99, 0.999, 1 - 1e-4, 1 - 1e-5, 1 - 1e-6)
STABILITY_FIELDS = ["path", "curvature", "sweep_value", "evaluations", "failures", "nonfinite"]


def _gyro_sweep_row(kappa: float, frac: float, m: int, n: int, points: int, seed: int) -> dict:
    """Features at radius sqrt(frac / |kappa|) in float32: random directions plus directions aligned with omega."""
    bank = GyroFeatureBank.sample(n, m, kappa, seed)
    rng = np.random.default_rng(seed + 1)
    r = np.sqrt(frac / abs(kappa))
    dirs = rng.standard_normal((points, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # worst case for the denominator: x on the ray towards a boundary direction
    aligned = bank.omega[: min(points, m)]
    x = np.concatenate([dirs, aligned]) * r
    with precision("float32"):
        feats = fourier_map(bank, torch.as_tensor(x, dtype=torch.float32), kappa, strict=False)
    bad = int((~torch.isfinite(feats)).sum())
    return {
        "path": "gyrokernel",
        "curvature": kappa,
        "sweep_value": frac,
        "evaluations": int(feats.numel()),
        "failures": bad,
        "nonfinite": bad,
    }


def stability_rows(seed: int = 0, trials: int = 64, m: int = 64, n: int = 4, points: int = 64) -> list[dict]:
    rows = []
    for r in exp_log_roundtrip(EXP_LOG_NORMS, c=-1.0, d=n, trials=trials, dtype=np.float32, seed=seed):
        rows.append(
            {
                "path": "exp_log_float32",
                "curvature": -1.0,
                "sweep_value": r["norm"],
                "evaluations": r["trials"],
                "failures": r["failures"],
                "nonfinite": r["nonfinite"],
            }
        )
    for kappa in (-1.0, 1.0):
        for frac in BOUNDARY_FRACTIONS:
            rows.append(_gyro_sweep_row(kappa, frac, m, n, points, seed))
    return rows


def bench_stability(cfg: RunConfig) -> list[dict]:
    rows = stability_rows(seed=cfg.seed, m=cfg.m, n=cfg.ball_dim)
    write_rows(Path(cfg.out_dir) / "stability_report.csv", rows, STABILITY_FIELDS)
    return rows


def write_rows(path, rows: Sequence[dict], fields: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(fields)
        for r in rows:
            wr.writerow([repr(r[f]) if isinstance(r[f], float) else r[f] for f in fields])


# ---------------------------------------------------------------- gradients


def _param_check(module: torch.nn.Module, name: str, loss_fn, h: float) -> float:
    params = dict(module.named_parameters())
    base = {k: v.detach() for k, v in params.items()}

    def f(p):
        return loss_fn(lambda *a, **kw: functional_call(module, {**base, name: p}, a, kw))

    return gradcheck(f, base[name], h=h)


def gradient_suite(h: float = 1e-4, seed: int = 0) -> list[tuple[str, float]]:
    """Central-difference checks of every learnable path in 64-bit. Returns (path, max rel. error)."""
    results = []
    with precision("float64"):
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        hid, N, B = 8, 4, 2
        mask = torch.tensor([[True] * 4, [True, True, True, False]])

        # the signed square root has a kink at 0; evaluate where its argument keeps one sign
        for sign in (1.0, -1.0):
            layer = GraphTransformerLayer(hid, heads=2)
            with torch.no_grad():
                for lin in (layer.Q, layer.K):
                    lin.weight.abs_().add_(0.1)
                layer.E_w.weight.abs_().add_(0.1).mul_(sign)
                # keep the relu open when the signed root is negative
                layer.E_b.weight.abs_().add_(0.1).mul_(1.0 if sign > 0 else 4.0)
            zx = torch.rand(B, N, hid, generator=gen) + 0.5
            ze = torch.rand(B, N, N, hid, generator=gen) + 0.5

            def layer_loss(call, zx=zx, ze=ze):
                x, e = call(zx, ze, mask)
                return (x[mask] ** 2).sum() * 0.1 + (e.sin()).sum() * 0.01

            tag = "pos" if sign > 0 else "neg"
            for pname in ("Q.weight", "K.weight", "V.weight", "W.weight", "E_w.weight", "E_b.weight", "E_v.weight"):
                results.append((f"encoder_layer[{tag}].{pname}", _param_check(layer, pname, layer_loss, h)))
            results.append((f"encoder_layer[{tag}].nodes", gradcheck(lambda x, layer=layer, ze=ze, f=layer_loss: f(lambda *_: layer(x, ze, mask)), zx, h)))

        basis = ProductManifoldBasis(3, signs=(-1, 0, 1), ball_dim=2, m=6, seed=seed)
        basis.thetas[0].data.fill_(0.2)
        basis.thetas[2].data.fill_(-0.3)
        Zlat = torch.randn(5, 3, generator=gen)

        for pname in ("points.0", "points.1", "points.2", "thetas.0", "thetas.2"):

            def f(p, pname=pname):
                state = {k: v.detach() for k, v in basis.named_parameters()}
                state[pname] = p
                return ((Zlat @ _project_with(basis, state)) ** 2).sum()

            results.append((f"gyrokernel.{pname}", gradcheck(f, dict(basis.named_parameters())[pname].detach(), h)))

        widths = basis.widths
        dec = Decoder(widths, 3, 2, hidden=8, tasks={"graph_regress": 1, "node_class": 3})
        zbx = torch.randn(B, N, sum(widths), generator=gen)
        zbe = torch.randn(B, N, N, sum(widths), generator=gen)
        nt = torch.randint(0, 3, (B, N), generator=gen)
        et = torch.randint(0, 2, (B, N, N), generator=gen)
        et = torch.triu(et, 1) + torch.triu(et, 1).transpose(1, 2)

        def dec_loss(call):
            nl = call(zbx, zbe)
            return reconstruction_loss(nl[0], nl[1], nt, et, mask) + (nl[2] ** 2).mean() + nl[3].logsumexp(-1).mean()

        def dec_forward(zx_, ze_):
            return dec.node_logits(zx_), dec.edge_logits(ze_), dec.task("graph_regress", zx_.mean(1)), dec.task("node_class", zx_)

        class _Wrap(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.dec = dec

            def forward(self, zx_, ze_):
                return dec_forward(zx_, ze_)

        wrap = _Wrap()
        for pname in ("dec.node_head.projs.0.weight", "dec.edge_head.block_logits", "dec.task_heads.graph_regress.out.weight", "dec.task_heads.node_class.block_logits"):
            results.append((f"decoder.{pname[4:]}", _param_check(wrap, pname, dec_loss, h)))

        mu = torch.randn(B, N, 3, generator=gen)
        lv = 0.3 * torch.randn(B, N, 3, generator=gen)
        results.append(("loss.kl_mu", gradcheck(lambda p: kl_reg(p, lv, mask), mu, h)))
        results.append(("loss.kl_logvar", gradcheck(lambda p: kl_reg(mu, p, mask), lv, h)))
        logits_n = torch.randn(B, N, 3, generator=gen)
        logits_e = torch.randn(B, N, N, 2, generator=gen)
        results.append(("loss.reconstruction", gradcheck(lambda p: reconstruction_loss(p, logits_e, nt, et, mask), logits_n, h)))
        pred = torch.randn(5, generator=gen)
        truth = torch.randn(5, generator=gen)
        results.append(("loss.regression", gradcheck(lambda p: target_loss("regression", p, truth), pred, h)))
        results.append(("loss.classification", gradcheck(lambda p: target_loss("classification", p, nt[0]), logits_n[0], h)))

        cross = CrossAttention(hid)
        zq = torch.randn(B, N, hid, generator=gen)
        toks = torch.randn(B, 3, hid, generator=gen)

        def cross_loss(call):
            return (call(zq, toks).tanh()).sum()

        for pname in ("Q.weight", "K.weight", "V.weight"):
            results.append((f"cross_attention.{pname}", _param_check(cross, pname, cross_loss, h)))
        results.append(("cross_attention.tokens", gradcheck(lambda tk: cross(zq, tk).tanh().sum(), toks, h)))

        sched = make_schedule(50)
        den = Denoiser(d_in=3, hidden=8, layers=1, heads=2, cond_kind="class", num_classes=3, alpha_bar=sched.alpha_bar)
        z0 = torch.randn(B, N + N * N, 3, generator=gen)
        t = torch.tensor([7, 31])
        eps = torch.randn(z0.shape, generator=gen)
        labels = torch.tensor([0, 2])
        tokens = den.cond(labels).detach()

        def den_loss(call):
            return diffusion_loss(call, z0, tokens, mask, sched, p_uncond=0.0, t=t, eps=eps)

        # parameters feeding the signed-square-root argument are covered by the layer checks above
        for pname in (
            "in_x.weight",
            "in_e.weight",
            "time_mlp.0.weight",
            "size_emb.weight",
            "blocks.0.attn.V.weight",
            "blocks.0.attn.E_v.weight",
            "blocks.0.cross_x.V.weight",
            "blocks.0.cross_e.V.weight",
            "blocks.0.mlp_e.0.weight",
            "out_x.weight",
            "out_e.bias",
        ):
            results.append((f"denoiser.{pname}", _param_check(den, pname, den_loss, h)))
        results.append(("denoiser.condition_tokens", gradcheck(lambda tok: diffusion_loss(den, z0, tok, mask, sched, p_uncond=0.0, t=t, eps=eps), tokens, h)))
    return results


def _project_with(basis: ProductManifoldBasis, state: dict) -> torch.Tensor:
    """``basis.project()`` with substituted parameters and without the in-place ball clamp."""
    blocks = []
    for i, s in enumerate(basis.signs):
        kappa = 0 if s == 0 else s * torch.exp(state[f"thetas.{i}"])
        omega, lam, b = (getattr(basis, f"{k}_{i}") for k in ("omega", "lam", "b"))
        blocks.append(_features(omega, lam, b, kappa, state[f"points.{i}"], False) / np.sqrt(basis.m))
    return torch.cat(blocks, dim=-1)


def write_gradcheck(path, results) -> None:
    write_rows(path, [{"path": p, "max_rel_error": e} for p, e in results], ["path", "max_rel_error"])


# ---------------------------------------------------------------- eigenvalue additivity


def prop31_rows(grid: int = 256, kmax: int = 4) -> list[dict]:
    rows = []
    for k1 in range(kmax + 1):
        for k2 in range(kmax + 1):
            measured, expected = verify_product_eigen(k1, k2, grid)
            rel = abs(measured - expected) / expected if expected else abs(measured)
            rows.append({"k1": k1, "k2": k2, "measured": measured, "expected": expected, "rel_error": rel})
    return rows


# ---------------------------------------------------------------- embeddings


@torch.no_grad()
def export_embeddings(cfg: RunConfig, ae, graphs: Sequence[Graph], labels: Optional[np.ndarray] = None) -> Path:
    from .training import graph_latents, out_path

    lat = graph_latents(ae, graphs, cfg)
    path = out_path(cfg, "embeddings.csv")
    D = lat[0][2].shape[0] if lat else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index"] + [f"z{j}" for j in range(D)] + ["pseudo_label"])
        for i, (_, _, zg) in enumerate(lat):
            lab = "" if labels is None else int(labels[i])
            wr.writerow([i] + [repr(float(v)) for v in zg] + [lab])
    write_manifold_weights(out_path(cfg, "manifold_weights.csv"), ae.decoder, cfg.components)
    return path
