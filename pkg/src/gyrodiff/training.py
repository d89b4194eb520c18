"""Training loops and runs: autoencoder stage, diffusion stage, generation and prediction.

Every run is driven by a RunConfig and writes its artifacts under
``cfg.out_dir``. All randomness flows from explicit seeds so two runs with
the same config produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .autoencoder import AutoEncoder
from .config import RunConfig
from .datasets import (
    GrammarSpec,
    gen_sbm,
    gen_valence_graphs,
    load_jsonl,
    save_jsonl,
    split_indices,
    with_regression_targets,
)
from .diffusion import (
    Denoiser,
    GuidanceConfig,
    LabelCodes,
    diffusion_loss,
    make_schedule,
    pack,
    row_mask,
    sample,
    self_guidance_labels,
    unpack,
)
from .encoder import GraphBatch, collate
from .graph import Graph
from .losses import kl_reg, reconstruction_loss, target_loss, total_loss
from .metrics import accuracy, gen_report, mae
from .numerics import set_precision

SBM_GRAPHS = 40


class TrainingError(RuntimeError):
    pass


def setup(cfg: RunConfig) -> None:
    set_precision(cfg.precision)
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def out_path(cfg: RunConfig, name: str) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p / name


# ---------------------------------------------------------------- data


def load_graphs(cfg: RunConfig) -> list[Graph]:
    if cfg.dataset == "grammar":
        graphs = gen_valence_graphs(cfg.data_count, GrammarSpec(), seed=cfg.data_seed)
        if cfg.task == "graph_regress":
            graphs = with_regression_targets(graphs)
        return graphs
    if cfg.dataset == "sbm":
        return [
            gen_sbm(cfg.sbm_n_per_block, cfg.sbm_blocks, cfg.sbm_p_in, cfg.sbm_p_out, seed=cfg.data_seed * 1000 + i)
            for i in range(SBM_GRAPHS)
        ]
    return load_jsonl(cfg.dataset)


def type_counts(cfg: RunConfig, graphs: Sequence[Graph]) -> tuple[int, int]:
    if cfg.dataset == "grammar":
        spec = GrammarSpec()
        return spec.num_node_types, spec.num_edge_types
    if cfg.dataset == "sbm":
        return cfg.sbm_blocks, 2
    k_n = 1 + max(max(g.nodes) for g in graphs)
    k_e = 1 + max([t for g in graphs for *_, t in g.edges] or [1])
    return k_n, max(k_e, 2)


def splits(cfg: RunConfig, graphs: Sequence[Graph]) -> dict[str, list[Graph]]:
    s = split_indices(len(graphs), seed=cfg.split_seed)
    return {name: [graphs[i] for i in getattr(s, name)] for name in ("train", "val", "test")}


def batches(items: Sequence, size: int, rng: Optional[np.random.Generator] = None):
    order = np.arange(len(items)) if rng is None else rng.permutation(len(items))
    for start in range(0, len(items), size):
        yield [items[i] for i in order[start : start + size]]


# ---------------------------------------------------------------- autoencoder


def task_heads(cfg: RunConfig) -> dict:
    if cfg.task == "graph_regress":
        return {"graph_regress": 1}
    if cfg.task == "node_class":
        return {"node_class": cfg.sbm_blocks}
    return {}


def build_autoencoder(cfg: RunConfig, k_n: int, k_e: int) -> AutoEncoder:
    torch.manual_seed(cfg.seed)
    return AutoEncoder(
        k_n,
        k_e,
        hidden=cfg.hidden,
        d_latent=cfg.d_latent,
        layers=cfg.L_enc,
        heads=cfg.heads,
        pe_eig=cfg.pe_eig,
        signs=cfg.components,
        ball_dim=cfg.ball_dim,
        m=cfg.m,
        scale=cfg.s,
        bank_seed=cfg.bank_seed,
        tasks=task_heads(cfg),
    )


@dataclass
class TargetStats:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def of(cls, graphs: Sequence[Graph]) -> "TargetStats":
        y = np.array([g.y_graph for g in graphs if g.y_graph is not None], dtype=np.float64)
        if y.size == 0:
            return cls()
        return cls(float(y.mean()), float(y.std()) or 1.0)


def _y_graph(graphs, stats: TargetStats) -> torch.Tensor:
    return torch.tensor([(g.y_graph - stats.mean) / stats.std for g in graphs], dtype=torch.get_default_dtype())


def _y_nodes(graphs, N: int) -> torch.Tensor:
    y = np.zeros((len(graphs), N), dtype=np.int64)
    for b, g in enumerate(graphs):
        y[b, : g.n] = g.y_nodes
    return torch.as_tensor(y)


def ae_objective(model: AutoEncoder, graphs, batch: GraphBatch, cfg: RunConfig, stats: TargetStats, sample_latent: bool, generator=None):
    _, Zbar = model.latents(batch, sample=sample_latent, generator=generator)
    node_logits, edge_logits = model.reconstruct_logits(Zbar)
    l_tgt = reconstruction_loss(node_logits, edge_logits, batch.node_type, batch.edge_type, batch.mask)
    info = {}
    if cfg.task == "graph_regress":
        pred = model.decoder.task("graph_regress", Zbar.z_g)[:, 0]
        l_tgt = l_tgt + target_loss("regression", pred, _y_graph(graphs, stats))
        info["pred"] = pred.detach() * stats.std + stats.mean
    elif cfg.task == "node_class":
        logits = model.decoder.task("node_class", Zbar.z_x)
        y = _y_nodes(graphs, batch.mask.shape[1])
        l_tgt = l_tgt + target_loss("classification", logits[batch.mask], y[batch.mask])
        info["node_pred"] = logits.detach().argmax(-1)
    Z = Zbar
    l_reg = kl_reg(Z.mu_x, Z.logvar_x, batch.mask) + kl_reg(Z.mu_e, Z.logvar_e, batch.edge_mask)
    total, report = total_loss(l_tgt, l_reg, cfg.beta_kl)
    info["node_logits"] = node_logits.detach()
    info["edge_logits"] = edge_logits.detach()
    return total, report, info


def recon_accuracy(info: dict, batch: GraphBatch) -> tuple[float, float]:
    node_ok = (info["node_logits"].argmax(-1) == batch.node_type)[batch.mask]
    N = batch.mask.shape[1]
    pairs = batch.edge_mask & torch.triu(torch.ones(N, N, dtype=torch.bool), diagonal=1)
    edge_ok = (info["edge_logits"].argmax(-1) == batch.edge_type)[pairs]
    edge_acc = float(edge_ok.double().mean()) if edge_ok.numel() else 1.0
    return float(node_ok.double().mean()), edge_acc


@torch.no_grad()
def evaluate_ae(model: AutoEncoder, graphs, cfg: RunConfig, stats: TargetStats) -> dict:
    model.eval()
    tot, n_nodes, n_edges, node_hits, edge_hits, err, cls_hits, cls_n = 0.0, 0, 0, 0.0, 0.0, 0.0, 0, 0
    for chunk in batches(graphs, cfg.batch):
        b = collate(chunk, cfg.pe_eig)
        total, _, info = ae_objective(model, chunk, b, cfg, stats, sample_latent=False)
        tot += float(total) * len(chunk)
        na, ea = recon_accuracy(info, b)
        nn_ = int(b.mask.sum())
        N = b.mask.shape[1]
        ne = int((b.edge_mask & torch.triu(torch.ones(N, N, dtype=torch.bool), diagonal=1)).sum())
        node_hits += na * nn_
        edge_hits += ea * ne
        n_nodes += nn_
        n_edges += ne
        if "pred" in info:
            err += float((info["pred"].double() - torch.tensor([g.y_graph for g in chunk], dtype=torch.float64)).abs().sum())
        if "node_pred" in info:
            y = _y_nodes(chunk, N)
            cls_hits += int((info["node_pred"] == y)[b.mask].sum())
            cls_n += nn_
    model.train()
    out = {
        "val_total": tot / len(graphs),
        "val_node_acc": node_hits / max(n_nodes, 1),
        "val_edge_acc": edge_hits / max(n_edges, 1),
    }
    if cfg.task == "graph_regress":
        out["val_mae"] = err / len(graphs)
    if cfg.task == "node_class":
        out["val_acc"] = cls_hits / max(cls_n, 1)
    return out


def _optimizer(params, lr, wd):
    return torch.optim.AdamW([p for p in params if p.requires_grad], lr=lr, weight_decay=wd)


def _check_finite(total, epoch, step, report):
    if not math.isfinite(float(total.detach())):
        raise TrainingError(
            f"non-finite loss at epoch {epoch} step {step}: l_tgt={report.l_tgt!r} l_reg={report.l_reg!r}"
        )


def ae_entries(model: AutoEncoder, stats: TargetStats) -> dict:
    entries = ckpt.module_entries(model, "ae.")
    entries["meta.target_stats"] = np.array([stats.mean, stats.std])
    return entries


def load_autoencoder(cfg: RunConfig, path, k_n: int, k_e: int) -> tuple[AutoEncoder, TargetStats]:
    entries = ckpt.load(path)
    model = build_autoencoder(cfg, k_n, k_e)
    ckpt.load_module(model, entries, "ae.")
    if "meta.target_stats" not in entries:
        raise ckpt.CheckpointError("autoencoder checkpoint lacks target statistics")
    m, s = entries["meta.target_stats"].astype(np.float64)
    model.eval()
    return model, TargetStats(float(m), float(s))


@dataclass
class AEResult:
    model: AutoEncoder
    stats: TargetStats
    checkpoint: Path
    sha256: str
    log: list


def train_ae(cfg: RunConfig, graphs: Optional[Sequence[Graph]] = None) -> AEResult:
    setup(cfg)
    graphs = list(graphs) if graphs is not None else load_graphs(cfg)
    k_n, k_e = type_counts(cfg, graphs)
    parts = splits(cfg, graphs)
    train, val = parts["train"], parts["val"] or parts["train"]
    stats = TargetStats.of(train)
    model = build_autoencoder(cfg, k_n, k_e)
    opt = _optimizer(model.parameters(), cfg.ae_lr, cfg.ae_wd)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    path = out_path(cfg, "ae.ckpt")
    sha = ckpt.save(path, ae_entries(model, stats))
    best = math.inf
    log = []
    step = 0
    for epoch in range(1, cfg.ae_epochs + 1):
        sums = np.zeros(3)
        count = 0
        for chunk in batches(train, cfg.batch, rng):
            b = collate(chunk, cfg.pe_eig, rng=rng)
            total, report, _ = ae_objective(model, chunk, b, cfg, stats, sample_latent=True, generator=gen)
            step += 1
            _check_finite(total, epoch, step, report)
            opt.zero_grad()
            total.backward()
            opt.step()
            model.basis.enforce_ball()
            sums += (report.total, report.l_tgt, report.l_reg)
            count += 1
        val_metrics = evaluate_ae(model, val, cfg, stats)
        row = {"epoch": epoch, "step": step}
        row.update(zip(("total", "l_tgt", "l_reg"), (sums / max(count, 1)).tolist()))
        row.update(val_metrics)
        log.append(row)
        if val_metrics["val_total"] < best:
            best = val_metrics["val_total"]
            sha = ckpt.save(path, ae_entries(model, stats))
    write_csv(out_path(cfg, "train_log.csv"), log, ["epoch", "step", "total", "l_tgt", "l_reg"])
    model, stats = load_autoencoder(cfg, path, k_n, k_e)
    update_manifest(cfg, "train-ae", {"ae.ckpt": sha})
    return AEResult(model, stats, path, sha, log)


def overfit_single_graph(G: Graph, cfg: Optional[RunConfig] = None, steps: int = 500, lr: float = 3e-3, check_every: int = 5):
    """Train on one graph until mean-latent reconstruction is exact.

    Returns (steps used, node accuracy, edge accuracy); steps is None when the
    budget ran out first.
    """
    cfg = cfg or RunConfig()
    setup(cfg)
    k_n, k_e = 1 + max(max(G.nodes), GrammarSpec().num_node_types - 1), GrammarSpec().num_edge_types
    model = build_autoencoder(cfg, k_n, k_e)
    opt = _optimizer(model.parameters(), lr, cfg.ae_wd)
    gen = torch.Generator().manual_seed(cfg.seed)
    b = collate([G], cfg.pe_eig)
    acc = (0.0, 0.0)
    stats = TargetStats()
    for step in range(1, steps + 1):
        total, report, _ = ae_objective(model, [G], b, cfg, stats, sample_latent=True, generator=gen)
        _check_finite(total, 0, step, report)
        opt.zero_grad()
        total.backward()
        opt.step()
        model.basis.enforce_ball()
        if step % check_every == 0 or step == steps:
            with torch.no_grad():
                _, _, info = ae_objective(model, [G], b, cfg, stats, sample_latent=False)
            acc = recon_accuracy(info, b)
            if acc == (1.0, 1.0):
                return step, *acc
    return None, *acc


# ---------------------------------------------------------------- diffusion


@torch.no_grad()
def graph_latents(model: AutoEncoder, graphs: Sequence[Graph], cfg: RunConfig):
    """Mean geometrized latents per graph: (z_x (n, D), z_e (n, n, D), z_g (D,))."""
    model.eval()
    out = []
    for chunk in batches(graphs, cfg.batch):
        b = collate(chunk, cfg.pe_eig)
        _, Zbar = model.latents(b, sample=False)
        for i, g in enumerate(chunk):
            out.append((Zbar.z_x[i, : g.n].clone(), Zbar.z_e[i, : g.n, : g.n].clone(), Zbar.z_g[i].clone()))
    return out


@torch.no_grad()
def posterior_stds(model: AutoEncoder, graphs: Sequence[Graph], cfg: RunConfig):
    """Per-row posterior standard deviations before geometrization: (s_x (n, d), s_e (n, n, d))."""
    model.eval()
    out = []
    for chunk in batches(graphs, cfg.batch):
        Z = model.encoder(collate(chunk, cfg.pe_eig))
        sx, se = torch.exp(0.5 * Z.logvar_x), torch.exp(0.5 * Z.logvar_e)
        for i, g in enumerate(chunk):
            out.append((sx[i, : g.n].clone(), se[i, : g.n, : g.n].clone()))
    return out


def pad_latents(items) -> tuple[torch.Tensor, torch.Tensor]:
    """Pack variable-size (z_x, z_e) pairs into (B, N + N*N, D) rows plus a node mask."""
    N = max(zx.shape[0] for zx, _ in items)
    D = items[0][0].shape[-1]
    B = len(items)
    zx = torch.zeros(B, N, D)
    ze = torch.zeros(B, N, N, D)
    mask = torch.zeros(B, N, dtype=torch.bool)
    for b, (x, e) in enumerate(items):
        n = x.shape[0]
        zx[b, :n] = x
        ze[b, :n, :n] = e
        mask[b, :n] = True
    return pack(zx, ze), mask


def _rms(rows: Sequence[torch.Tensor]) -> float:
    sq = sum(float((r.double() ** 2).sum()) for r in rows)
    cnt = sum(r.numel() for r in rows)
    return math.sqrt(sq / max(cnt, 1)) or 1.0


class LatentCoords:
    """Whitened principal coordinates of geometrized latent rows.

    Z-bar = Z V-bar spans at most ``d_latent`` directions of the wide feature
    space, so diffusion runs on the leading ``r`` of them; node and edge rows
    get separate maps. With r = d_latent ``decode`` is the exact inverse on
    the data subspace; smaller r drops low-variance directions.
    """

    def __init__(self, mu_x, Q_x, s_x, mu_e, Q_e, s_e):
        self.parts = {
            "x": tuple(torch.as_tensor(np.asarray(a), dtype=torch.float64) for a in (mu_x, Q_x, s_x)),
            "e": tuple(torch.as_tensor(np.asarray(a), dtype=torch.float64) for a in (mu_e, Q_e, s_e)),
        }

    @property
    def width(self) -> int:
        return self.parts["x"][1].shape[1]

    @staticmethod
    def _fit(rows: torch.Tensor, r: int):
        X = rows.double()
        mu = X.mean(0)
        _, _, Vh = torch.linalg.svd(X - mu, full_matrices=False)
        Q = Vh[:r].T
        s = ((X - mu) @ Q).std(0)
        return mu, Q, s.clamp_min(1e-6 * float(s.max()) + 1e-12)

    @classmethod
    def fit(cls, latents, r: int) -> "LatentCoords":
        rx = torch.cat([zx for zx, _, _ in latents])
        re_ = torch.cat([ze.reshape(-1, ze.shape[-1]) for _, ze, _ in latents])
        r = min(r, rx.shape[1])
        return cls(*cls._fit(rx, r), *cls._fit(re_, r))

    def encode(self, z: torch.Tensor, part: str) -> torch.Tensor:
        mu, Q, s = self.parts[part]
        return (((z.double() - mu) @ Q) / s).to(torch.get_default_dtype())

    def decode(self, c: torch.Tensor, part: str) -> torch.Tensor:
        mu, Q, s = self.parts[part]
        return ((c.double() * s) @ Q.T + mu).to(torch.get_default_dtype())

    def noise_map(self, Vbar: torch.Tensor, part: str) -> torch.Tensor:
        """Linear map taking latent-space noise (before geometrization) to coordinates."""
        _, Q, s = self.parts[part]
        return ((Vbar.double() @ Q) / s).to(torch.get_default_dtype())

    def entries(self) -> dict:
        out = {}
        for part, (mu, Q, s) in self.parts.items():
            out[f"meta.coords_{part}.mu"] = mu.numpy()
            out[f"meta.coords_{part}.Q"] = Q.numpy()
            out[f"meta.coords_{part}.s"] = s.numpy()
        return out

    @classmethod
    def from_entries(cls, entries: dict) -> "LatentCoords":
        vals = [entries[f"meta.coords_{p}.{k}"].astype(np.float64) for p in ("x", "e") for k in ("mu", "Q", "s")]
        return cls(*vals)


@dataclass
class DiffusionBundle:
    """A trained denoiser plus everything needed to turn its samples into outputs."""

    model: Denoiser
    coords: Optional[LatentCoords]  # generation only
    size_probs: np.ndarray  # (num conditions, max nodes + 1); generation only
    codes: Optional[LabelCodes] = None  # prediction only
    cond_scale: float = 1.0

    def entries(self) -> dict:
        e = ckpt.module_entries(self.model, "denoiser.")
        if self.coords is not None:
            e.update(self.coords.entries())
        e["meta.cond_scale"] = np.array([self.cond_scale])
        e["meta.size_probs"] = self.size_probs
        if self.codes is not None:
            e["meta.codes"] = self.codes.codes
            e["meta.code_stats"] = np.array([self.codes.mean, self.codes.std])
        return e


def diffusion_rank(cfg: RunConfig, width: int) -> int:
    r = cfg.latent_rank if cfg.latent_rank > 0 else cfg.d_latent
    return min(r, cfg.d_latent, width)


def diffusion_layout(cfg: RunConfig, ae: AutoEncoder) -> dict:
    """Denoiser constructor arguments implied by the task."""
    D = ae.latent_width
    r = diffusion_rank(cfg, D)
    if cfg.task == "gen_uncond":
        if cfg.self_guidance:
            return dict(d_in=r, cond_kind="class", num_classes=cfg.k, with_edges=True)
        return dict(d_in=r, cond_kind="none", with_edges=True)
    if cfg.task == "gen_cond":
        return dict(d_in=r, cond_kind="scalar", with_edges=True)
    # prediction: one label row per sample, conditioned on the known latent
    return dict(d_in=cfg.hidden, cond_kind="latent", cond_dim=D, with_edges=False)


def build_denoiser(cfg: RunConfig, ae: AutoEncoder) -> Denoiser:
    torch.manual_seed(cfg.seed + 1)
    sched = make_schedule(cfg.T, cfg.beta_1, cfg.beta_T)
    return Denoiser(hidden=cfg.hidden_denoise or cfg.hidden, layers=cfg.L_denoise, heads=cfg.heads, alpha_bar=sched.alpha_bar, **diffusion_layout(cfg, ae))


def load_diffusion(cfg: RunConfig, path, ae: AutoEncoder) -> DiffusionBundle:
    entries = ckpt.load(path)
    model = build_denoiser(cfg, ae)
    ckpt.load_module(model, entries, "denoiser.")
    model.eval()
    codes = None
    if "meta.codes" in entries:
        mean, std = entries["meta.code_stats"].astype(np.float64)
        codes = LabelCodes(entries["meta.codes"].astype(np.float64), float(mean), float(std))
    return DiffusionBundle(
        model,
        LatentCoords.from_entries(entries) if "meta.coords_x.mu" in entries else None,
        entries["meta.size_probs"].astype(np.float64),
        codes,
        float(entries["meta.cond_scale"][0]),
    )


def size_histograms(graphs: Sequence[Graph], labels: np.ndarray, k: int, max_n: int) -> np.ndarray:
    H = np.zeros((k, max_n + 1))
    for g, c in zip(graphs, labels):
        H[int(c), g.n] += 1
    total = H.sum(1, keepdims=True)
    fallback = H.sum(0) / H.sum()
    return np.where(total > 0, H / np.maximum(total, 1), fallback[None, :])


@dataclass
class DiffusionData:
    """Training examples for the denoiser: packed rows, masks and conditions."""

    Z0: list  # per example: (R, D) tensor
    masks: list  # per example: (n,) bool
    cond: Optional[np.ndarray]  # (num examples,) labels / scalars, or (num examples, C) vectors


def _gen_examples(latents, coords: LatentCoords):
    return [(coords.encode(zx, "x"), coords.encode(ze, "e")) for zx, ze, _ in latents]


def prediction_examples(cfg: RunConfig, ae: AutoEncoder, graphs, latents, codes: LabelCodes, cond_scale: float):
    """(label code rows, condition vectors, truths) for the prediction tasks."""
    if cfg.task == "graph_regress":
        y = np.array([g.y_graph for g in graphs], dtype=np.float64)
        Z0 = codes.encode_scalar(y)
        cond = torch.stack([zg for _, _, zg in latents]).double().numpy() / cond_scale
        return Z0, cond, y
    y = np.concatenate([np.asarray(g.y_nodes) for g in graphs])
    Z0 = codes.encode_class(y)
    cond = torch.cat([zx for zx, _, _ in latents]).double().numpy() / cond_scale
    return Z0, cond, y


def label_codes(cfg: RunConfig, ae: AutoEncoder, stats: TargetStats) -> LabelCodes:
    head = ae.decoder.task_heads[cfg.task]
    W = head.out.weight.detach().double().numpy()
    return LabelCodes(W, stats.mean, stats.std)


@dataclass
class DiffResult:
    bundle: DiffusionBundle
    checkpoint: Path
    sha256: str
    log: list


def train_diffusion(cfg: RunConfig, ae: Optional[AEResult] = None, graphs: Optional[Sequence[Graph]] = None) -> DiffResult:
    setup(cfg)
    graphs = list(graphs) if graphs is not None else load_graphs(cfg)
    k_n, k_e = type_counts(cfg, graphs)
    if ae is None:
        model, stats = load_autoencoder(cfg, out_path(cfg, "ae.ckpt"), k_n, k_e)
    else:
        model, stats = ae.model, ae.stats
    for p in model.parameters():
        p.requires_grad_(False)
    parts = splits(cfg, graphs)
    train, held = parts["train"], parts["val"] or parts["train"]
    lat_train = graph_latents(model, train, cfg)
    lat_held = graph_latents(model, held, cfg)
    denoiser = build_denoiser(cfg, model)
    max_n = max(g.n for g in graphs)
    gen_task = cfg.task in ("gen_uncond", "gen_cond")

    if gen_task:
        coords = LatentCoords.fit(lat_train, diffusion_rank(cfg, model.latent_width))
        if cfg.task == "gen_uncond" and cfg.self_guidance:
            ZG = torch.stack([zg for _, _, zg in lat_train]).double().numpy()
            pl = self_guidance_labels(ZG, k=cfg.k, seed=cfg.seed, iters=cfg.kmeans_iters)
            cond_train = pl.labels
            size_probs = size_histograms(train, cond_train, cfg.k, max_n)
            held_cond = np.argmin(((torch.stack([zg for _, _, zg in lat_held]).double().numpy()[:, None] - pl.centroids[None]) ** 2).sum(-1), 1)
            np.savetxt(out_path(cfg, "centroids.csv"), pl.centroids, delimiter=",", fmt="%.9g")
        elif cfg.task == "gen_cond":
            cond_train = np.array([g.y_graph for g in train], dtype=np.float64)
            held_cond = np.array([g.y_graph for g in held], dtype=np.float64)
            size_probs = size_histograms(train, np.zeros(len(train), dtype=int), 1, max_n)
        else:
            cond_train = held_cond = None
            size_probs = size_histograms(train, np.zeros(len(train), dtype=int), 1, max_n)
        ex_train = _gen_examples(lat_train, coords)
        ex_held = _gen_examples(lat_held, coords)
        bundle = DiffusionBundle(denoiser, coords, size_probs)
        if cfg.latent_sample:
            with torch.no_grad():
                Vbar = model.basis.project()
            maps = (coords.noise_map(Vbar, "x"), coords.noise_map(Vbar, "e"))
            std_train = posterior_stds(model, train, cfg)
    else:
        codes = label_codes(cfg, model, stats)
        cond_scale = _rms([zg for _, _, zg in lat_train]) if cfg.task == "graph_regress" else _rms([zx for zx, _, _ in lat_train])
        Z0_tr, cond_train, _ = prediction_examples(cfg, model, train, lat_train, codes, cond_scale)
        Z0_he, held_cond, _ = prediction_examples(cfg, model, held, lat_held, codes, cond_scale)
        ex_train = [torch.as_tensor(z, dtype=torch.get_default_dtype())[None, :] for z in Z0_tr]
        ex_held = [torch.as_tensor(z, dtype=torch.get_default_dtype())[None, :] for z in Z0_he]
        bundle = DiffusionBundle(denoiser, None, np.zeros((1, 1)), codes, cond_scale)

    sched = make_schedule(cfg.T, cfg.beta_1, cfg.beta_T)
    opt = _optimizer(denoiser.parameters(), cfg.diff_lr, cfg.diff_wd)
    rng = np.random.default_rng(cfg.seed + 2)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    held_idx = np.arange(min(len(ex_held), cfg.batch))
    held_batch = _diff_batch(ex_held, held_cond, held_idx, gen_task)
    held_gen = torch.Generator().manual_seed(cfg.seed + 3)
    held_t = torch.randint(1, sched.T + 1, (len(held_idx),), generator=held_gen)
    held_eps = torch.randn(held_batch[0].shape, generator=held_gen)

    def held_loss():
        z0, mask, c = held_batch
        with torch.no_grad():
            tokens = None if c is None else denoiser.cond(c)
            return float(diffusion_loss(denoiser, z0, tokens, mask, sched, p_uncond=0.0, with_edges=denoiser.with_edges, t=held_t, eps=held_eps))

    post_gen = torch.Generator().manual_seed(cfg.seed + 4)
    steps_total = max(1, cfg.diff_epochs * math.ceil(len(ex_train) / cfg.batch))
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps_total)
    log = []
    step = 0
    path = out_path(cfg, "diff.ckpt")
    for epoch in range(1, cfg.diff_epochs + 1):
        acc, cnt = 0.0, 0
        for idx in batches(np.arange(len(ex_train)), cfg.batch, rng):
            z0, mask, c = _diff_batch(ex_train, cond_train, idx, gen_task)
            if gen_task and cfg.latent_sample:
                z0 = z0 + _posterior_noise([std_train[i] for i in idx], maps, post_gen)
            tokens = None if c is None else denoiser.cond(c)
            loss = diffusion_loss(denoiser, z0, tokens, mask, sched, generator=gen, p_uncond=cfg.p_uncond, with_edges=denoiser.with_edges)
            step += 1
            lv = float(loss.detach())
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite diffusion loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_sched.step()
            acc += lv
            cnt += 1
        log.append({"epoch": epoch, "step": step, "train_loss": acc / max(cnt, 1), "heldout_loss": held_loss()})
    denoiser.eval()
    sha = ckpt.save(path, bundle.entries())
    write_csv(out_path(cfg, "diff_log.csv"), log, ["epoch", "step", "train_loss", "heldout_loss"])
    update_manifest(cfg, "train-diff", {"diff.ckpt": sha})
    return DiffResult(bundle, path, sha, log)


def _posterior_noise(stds, maps, generator) -> torch.Tensor:
    """Posterior draw minus posterior mean, in diffusion coordinates, packed like the examples."""
    S, mask = pad_latents(stds)
    N = mask.shape[1]
    xi = S * torch.randn(S.shape, generator=generator, dtype=S.dtype)
    return torch.cat([xi[:, :N] @ maps[0], xi[:, N:] @ maps[1]], dim=1)


def _diff_batch(examples, cond, idx, gen_task: bool):
    idx = np.asarray(idx)
    if gen_task:
        z0, mask = pad_latents([examples[i] for i in idx])
    else:
        z0 = torch.stack([examples[i] for i in idx])
        mask = torch.ones(len(idx), 1, dtype=torch.bool)
    if cond is None:
        return z0, mask, None
    c = cond[idx]
    if c.ndim == 1 and c.dtype.kind in "iu":
        c = torch.as_tensor(c, dtype=torch.long)
    else:
        c = torch.as_tensor(c, dtype=torch.get_default_dtype())
    return z0, mask, c


# ---------------------------------------------------------------- sampling


def guidance_of(cfg: RunConfig) -> GuidanceConfig:
    return GuidanceConfig(cfg.guidance_mode, cfg.lambda_g, cfg.w, cfg.p_uncond, cfg.literal_eq9)


@torch.no_grad()
def decode_graphs(ae: AutoEncoder, z: torch.Tensor, mask: torch.Tensor, coords: LatentCoords) -> list[Graph]:
    """Argmax node and edge types; edge type 0 means no edge. No validity repair."""
    N = mask.shape[1]
    cx, ce = unpack(z, N, True)
    zx, ze = coords.decode(cx, "x"), coords.decode(ce, "e")
    nt, et = ae.decode_types(zx, ze)
    out = []
    for b in range(z.shape[0]):
        n = int(mask[b].sum())
        nodes = tuple(int(t) for t in nt[b, :n])
        iu = np.triu_indices(n, 1)
        E = et[b, :n, :n].numpy()
        edges = tuple((int(i), int(j), int(E[i, j])) for i, j in zip(*iu) if E[i, j] > 0)
        out.append(Graph(nodes, edges))
    return out


def sample_graphs(cfg: RunConfig, ae: AutoEncoder, bundle: DiffusionBundle, count: int, seed: int, condition=None) -> list[Graph]:
    """Draw ``count`` graphs. Self-guided runs pick a pseudo-label uniformly per graph."""
    if count == 0:
        return []
    rng = np.random.default_rng(seed)
    model = bundle.model
    kind = model.cond.kind
    if kind == "class":
        conds = rng.integers(bundle.size_probs.shape[0], size=count)
        probs = bundle.size_probs[conds]
    else:
        conds = np.full(count, float(condition) if condition not in (None, "") else 0.0)
        probs = np.repeat(bundle.size_probs[:1], count, axis=0)
    sizes = np.array([rng.choice(probs.shape[1], p=p / p.sum()) for p in probs])
    sched = make_schedule(cfg.T, cfg.beta_1, cfg.beta_T)
    guidance = guidance_of(cfg)
    graphs = []
    for bi, start in enumerate(range(0, count, cfg.gen_batch)):
        sl = slice(start, start + cfg.gen_batch)
        n_b = sizes[sl]
        N = int(n_b.max())
        mask = torch.as_tensor(np.arange(N)[None, :] < n_b[:, None])
        if kind == "none":
            tokens = None
        elif kind == "class":
            tokens = model.cond(torch.as_tensor(conds[sl], dtype=torch.long))
        else:
            tokens = model.cond(torch.as_tensor(conds[sl], dtype=torch.get_default_dtype()))
        z = sample(model, mask, tokens, guidance, sched, seed=seed * 100003 + bi)
        graphs.extend(decode_graphs(ae, z, mask, bundle.coords))
    return graphs


def generate(cfg: RunConfig, count: Optional[int] = None, ae: Optional[AutoEncoder] = None, bundle: Optional[DiffusionBundle] = None, graphs=None, prefix: str = ""):
    setup(cfg)
    graphs = list(graphs) if graphs is not None else load_graphs(cfg)
    k_n, k_e = type_counts(cfg, graphs)
    if ae is None:
        ae, _ = load_autoencoder(cfg, out_path(cfg, "ae.ckpt"), k_n, k_e)
    if bundle is None:
        bundle = load_diffusion(cfg, out_path(cfg, "diff.ckpt"), ae)
    count = cfg.gen_count if count is None else count
    out = sample_graphs(cfg, ae, bundle, count, cfg.seed, cfg.condition)
    jsonl = out_path(cfg, prefix + "generated.jsonl")
    save_jsonl(out, jsonl)
    report = None
    rep_path = out_path(cfg, prefix + "gen_report.csv")
    if out:
        report = gen_report(out, splits(cfg, graphs)["train"])
        report.to_csv(rep_path)
    else:
        rep_path.write_text("", encoding="utf-8")
    update_manifest(cfg, "generate", {"generated.jsonl": _sha(jsonl)})
    return out, report


@torch.no_grad()
def predict(cfg: RunConfig, split: Optional[str] = None, ae: Optional[AutoEncoder] = None, bundle: Optional[DiffusionBundle] = None, graphs=None):
    """Prediction as conditional generation of the label latent. Returns (predictions, truths, metric)."""
    if cfg.task not in ("graph_regress", "node_class"):
        raise ValueError(f"predict needs task graph_regress or node_class, got {cfg.task!r}")
    setup(cfg)
    graphs = list(graphs) if graphs is not None else load_graphs(cfg)
    k_n, k_e = type_counts(cfg, graphs)
    if ae is None:
        ae, _ = load_autoencoder(cfg, out_path(cfg, "ae.ckpt"), k_n, k_e)
    if bundle is None:
        bundle = load_diffusion(cfg, out_path(cfg, "diff.ckpt"), ae)
    if bundle.codes is None or bundle.model.cond.kind != "latent":
        raise ValueError("diffusion checkpoint was not trained for a prediction task")
    target = splits(cfg, graphs)[split or cfg.predict_split]
    lat = graph_latents(ae, target, cfg)
    _, cond, truth = prediction_examples(cfg, ae, target, lat, bundle.codes, bundle.cond_scale)
    sched = make_schedule(cfg.T, cfg.beta_1, cfg.beta_T)
    guidance = guidance_of(cfg)
    rows = []
    for bi, start in enumerate(range(0, len(cond), cfg.gen_batch)):
        c = torch.as_tensor(cond[start : start + cfg.gen_batch], dtype=torch.get_default_dtype())
        mask = torch.ones(len(c), 1, dtype=torch.bool)
        z = sample(bundle.model, mask, bundle.model.cond(c), guidance, sched, seed=cfg.seed * 100003 + bi)
        rows.append(z[:, 0].double().numpy())
    Z = np.concatenate(rows) if rows else np.zeros((0, bundle.model.d_in))
    if cfg.task == "graph_regress":
        preds = bundle.codes.decode_scalar(Z)
        metric = ("mae", mae(preds, truth))
    else:
        preds = bundle.codes.decode_class(Z)
        metric = ("accuracy", accuracy(preds, truth))
    path = out_path(cfg, "predictions.csv")
    write_csv(path, [{"index": i, "target": t, "prediction": p} for i, (t, p) in enumerate(zip(truth.tolist(), preds.tolist()))], ["index", "target", "prediction"])
    write_csv(out_path(cfg, "predict_metric.csv"), [{"metric": metric[0], "value": metric[1]}], ["metric", "value"])
    update_manifest(cfg, "predict", {"predictions.csv": _sha(path)})
    return preds, truth, metric[1]


def untrained_bundle(cfg: RunConfig, ae: AutoEncoder, trained: DiffusionBundle) -> DiffusionBundle:
    """Freshly initialised denoiser sharing the trained run's coordinates and size histograms."""
    return DiffusionBundle(build_denoiser(cfg, ae), trained.coords, trained.size_probs, trained.codes, trained.cond_scale)


ABLATION_FIELDS = ["variant", "validity", "uniqueness", "novelty", "mmd_degree", "mmd_clustering", "count"]


def ablate_self_guidance(cfg: RunConfig, ae: Optional[AEResult] = None, graphs=None) -> list[dict]:
    """Paired runs with and without self-guidance: same autoencoder, budget and seeds.

    Writes ablation_self_guidance.csv with one row per variant plus the
    difference row (self_guided minus no_guidance).
    """
    if cfg.task != "gen_uncond":
        raise ValueError("the self-guidance ablation needs task gen_uncond")
    graphs = list(graphs) if graphs is not None else load_graphs(cfg)
    if ae is None:
        ae = train_ae(cfg, graphs)
    rows = []
    for variant, flag in (("self_guided", True), ("no_guidance", False)):
        sub = cfg.with_overrides({"self_guidance": flag, "out_dir": str(Path(cfg.out_dir) / variant)})
        d = train_diffusion(sub, ae, graphs)
        _, rep = generate(sub, ae=ae.model, bundle=d.bundle, graphs=graphs)
        rows.append({"variant": variant, **{f: getattr(rep, f) for f in ABLATION_FIELDS[1:]}})
    diff = {"variant": "difference"}
    for f in ABLATION_FIELDS[1:-1]:
        diff[f] = rows[0][f] - rows[1][f]
    diff["count"] = rows[0]["count"]
    rows.append(diff)
    path = out_path(cfg, "ablation_self_guidance.csv")
    write_csv(path, rows, ABLATION_FIELDS)
    update_manifest(cfg, "ablation", {"ablation_self_guidance.csv": _sha(path)})
    return rows


# ---------------------------------------------------------------- artifacts


def write_csv(path, rows: list, leading: Sequence[str]) -> None:
    keys = list(leading)
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(keys)
        for r in rows:
            wr.writerow([_cell(r.get(k, "")) for k in keys])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _sha(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def update_manifest(cfg: RunConfig, command: str, hashes: dict) -> None:
    """Merge one command's record (config, seeds, artifact hashes) into manifest.json."""
    path = out_path(cfg, "manifest.json")
    data = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    data[command] = {
        "config": cfg.to_text().splitlines(),
        "seeds": {"seed": cfg.seed, "data_seed": cfg.data_seed, "split_seed": cfg.split_seed, "bank_seed": cfg.bank_seed},
        "sha256": hashes,
    }
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
