"""Acceptance criteria 1-11. Each test prints one PASS/FAIL line.

The desk-scale runs (7, 8, 9) train real models and take most of the
suite's wall time.
"""

import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from gyrodiff import checks
from gyrodiff import training as tr
from gyrodiff.cli import main
from gyrodiff.config import RunConfig
from gyrodiff.datasets import GrammarSpec, gen_valence_graphs, uniform_random_graphs
from gyrodiff.diffusion import (
    Denoiser,
    cfg_step,
    cfgpp_step,
    cond_step,
    forward_sample,
    make_schedule,
    row_mask,
    uncond_step,
)
from gyrodiff.gyrokernel import GyroFeatureBank, fourier_map
from gyrodiff.metrics import canonical_key, mmd_stats, novelty, uniqueness
from gyrodiff.numerics import precision

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def verdict(capsys):
    def emit(n, name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"criterion {n} ({name}) failed: {detail}"

    return emit


def desk(name, out_dir, **kw):
    cfg = RunConfig.load(CONFIGS / name)
    return cfg.with_overrides({"out_dir": str(out_dir), **kw})


# ---------------------------------------------------------------- 1


def test_c01_gradient_integrity(verdict):
    t0 = time.time()
    results = checks.gradient_suite(h=1e-4)
    dt = time.time() - t0
    worst_name, worst = max(results, key=lambda r: r[1])
    paths = {n.split(".")[0].split("[")[0] for n, _ in results}
    covered = paths == {"encoder_layer", "gyrokernel", "decoder", "loss", "cross_attention", "denoiser"}
    verdict(1, "gradient integrity", worst < 1e-4 and dt < 120 and covered, f"{len(results)} checks, worst {worst:.2e} ({worst_name}), {dt:.1f}s")


# ---------------------------------------------------------------- 2


def test_c02_prop31_oracle(verdict):
    t0 = time.time()
    rows = checks.prop31_rows(grid=256)
    dt = time.time() - t0
    pairs = {(r["k1"], r["k2"]) for r in rows}
    worst = max(r["rel_error"] for r in rows)
    ok = pairs == {(a, b) for a in range(5) for b in range(5)} and worst < 0.01 and dt < 30
    verdict(2, "eigenvalue additivity", ok, f"{len(rows)} pairs, worst rel error {worst:.2e}, {dt:.1f}s")


# ---------------------------------------------------------------- 3


def _hyla(omega, lam, b, x):
    n = x.shape[-1]
    P = (1.0 - (x * x).sum(-1))[:, None] / ((x[:, None, :] - omega[None]) ** 2).sum(-1)
    return P ** ((n - 1) / 2) * np.cos(lam[None] * np.log(P) + b[None]) / math.sqrt(len(omega))


def _mobius_add(a, x):
    ax, a2, x2 = a @ x, a @ a, x @ x
    return ((1 + 2 * ax + x2) * a + (1 - a2) * x) / (1 + 2 * ax + a2 * x2)


def test_c03_gyrokernel_correctness(verdict):
    rng = np.random.default_rng(0)
    with precision("float64"):
        bank = GyroFeatureBank.sample(3, 32, -1.0, seed=1)
        d = rng.standard_normal((1000, 3))
        x = d / np.linalg.norm(d, axis=1, keepdims=True) * 0.95 * rng.uniform(0, 1, (1000, 1)) ** (1 / 3)
        ours = fourier_map(bank, torch.as_tensor(x)).numpy()
        err_a = float((np.abs(ours - _hyla(bank.omega, bank.lam, bank.b, x)) / np.maximum(1, np.abs(ours))).max())

        R, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        rot = GyroFeatureBank(-1.0, 3, bank.m, bank.omega @ R.T, bank.lam, bank.b, bank.seed)
        err_b = float(np.abs(fourier_map(rot, torch.as_tensor(x @ R.T)).numpy() - ours).max())

        m = 4096
        x1, y1 = np.array([0.1, -0.2, 0.05]), np.array([0.3, 0.1, -0.2])
        a = np.array([-0.25, 0.15, 0.2])
        x2, y2 = _mobius_add(a, x1 @ R.T), _mobius_add(a, y1 @ R.T)
        gaps = []
        for seed in (10, 11):
            bk = GyroFeatureBank.sample(3, m, -1.0, seed=seed)
            k = [float((fourier_map(bk, torch.as_tensor(p[None])) * fourier_map(bk, torch.as_tensor(q[None]))).sum()) for p, q in ((x1, y1), (x2, y2))]
            gaps.append(abs(k[0] - k[1]))
    tol = 5 / math.sqrt(m)
    ok = err_a < 1e-12 and err_b < 1e-12 and max(gaps) < tol
    verdict(3, "gyrokernel correctness", ok, f"HyLa {err_a:.1e}, rotation {err_b:.1e}, MC gap {max(gaps):.4f} < {tol:.4f}")


# ---------------------------------------------------------------- 4


def test_c04_stability(verdict, tmp_path):
    t0 = time.time()
    rows = checks.bench_stability(RunConfig(out_dir=str(tmp_path)))
    dt = time.time() - t0
    gyro = sum(r["nonfinite"] for r in rows if r["path"] == "gyrokernel")
    fails = sum(r["failures"] for r in rows if r["path"] != "gyrokernel" and r["sweep_value"] >= 30)
    ok = gyro == 0 and fails >= 1 and dt < 60 and (tmp_path / "stability_report.csv").exists()
    verdict(4, "stability sweep", ok, f"gyrokernel non-finite {gyro}, exp/log failures at norm>=30 {fails}, {dt:.1f}s")


# ---------------------------------------------------------------- 5


def test_c05_diffusion_invariants(verdict):
    d = make_schedule()
    mono = bool(np.all(np.diff(d.alpha_bar) < 0))
    s = make_schedule(100, 1e-3, 0.05)
    g = torch.Generator().manual_seed(0)
    n = 100_000
    z0 = 1.0 + 0.5 * torch.randn(n, generator=g, dtype=torch.float64)
    z = z0.clone()
    for k in range(1, 61):
        z = math.sqrt(s.alpha[k]) * z + math.sqrt(s.beta[k]) * torch.randn(n, generator=g, dtype=torch.float64)
    marg = forward_sample(z0, 60, torch.randn(n, generator=g, dtype=torch.float64), s)
    mom = max(abs(float(z.mean() / marg.mean()) - 1), abs(float(z.var() / marg.var()) - 1))

    torch.manual_seed(0)
    sched = make_schedule(100, 1e-3, 0.1)
    model = Denoiser(d_in=6, hidden=16, layers=2, heads=2, cond_kind="class", num_classes=3, alpha_bar=sched.alpha_bar).eval()
    mask = torch.tensor([[True, True, True], [True, True, False]])
    rm = row_mask(mask, True)[..., None].float()
    tok = model.cond(torch.tensor([0, 2])).detach()

    def run(step):
        z = torch.randn(2, 12, 6, generator=torch.Generator().manual_seed(1)) * rm
        with torch.no_grad():
            for t in range(100, 0, -1):
                z = step(z, t) * rm
        return z

    gap_pp = float((run(lambda z, t: cfgpp_step(model, z, t, tok, 0.0, sched, mask)) - run(lambda z, t: uncond_step(model, z, t, mask, sched))).abs().max())
    gap_cfg = float((run(lambda z, t: cfg_step(model, z, t, tok, 0.0, sched, mask)) - run(lambda z, t: cond_step(model, z, t, tok, mask, sched))).abs().max())
    ok = mono and mom < 0.02 and gap_pp < 1e-6 and gap_cfg < 1e-6
    verdict(5, "diffusion invariants", ok, f"monotone {mono}, moment gap {mom:.4f}, cfg++(0) {gap_pp:.1e}, cfg(0) {gap_cfg:.1e}")


# ---------------------------------------------------------------- 6


def test_c06_autoencoder_memorization(verdict):
    t0 = time.time()
    g = gen_valence_graphs(1, seed=0)[0]
    steps, na, ea = tr.overfit_single_graph(g, RunConfig(seed=0), steps=500)
    dt = time.time() - t0
    ok = steps is not None and na == 1.0 and ea == 1.0 and dt < 60
    verdict(6, "single-graph memorization", ok, f"steps {steps}, node acc {na}, edge acc {ea}, {dt:.1f}s")


# ---------------------------------------------------------------- 7, 8


@pytest.fixture(scope="module")
def generation_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_gen")
    cfg = desk("desk_gen.cfg", out)
    graphs = tr.load_graphs(cfg)
    t0 = time.time()
    ae = tr.train_ae(cfg, graphs)
    t_ae = time.time() - t0
    sub = cfg.with_overrides({"out_dir": str(out / "self_guided")})
    t0 = time.time()
    d = tr.train_diffusion(sub, ae, graphs)
    t_diff = time.time() - t0
    gen, rep = tr.generate(sub, ae=ae.model, bundle=d.bundle, graphs=graphs)
    _, rep0 = tr.generate(sub, ae=ae.model, bundle=tr.untrained_bundle(sub, ae.model, d.bundle), graphs=graphs, prefix="untrained_")
    train = tr.splits(cfg, graphs)["train"]
    sizes = np.random.default_rng(0).choice([g.n for g in train], len(gen))
    spec = GrammarSpec()
    uniform = uniform_random_graphs(sizes, spec.num_node_types, spec.num_edge_types, seed=cfg.seed)
    mmd_uniform = mmd_stats(train, uniform)[0]
    return dict(cfg=cfg, ae=ae, graphs=graphs, diff=d, report=rep, untrained=rep0, mmd_uniform=mmd_uniform, t_train=t_ae + t_diff, out=out)


def test_c07_unconditional_generation(verdict, generation_runs):
    r = generation_runs
    rep, rep0 = r["report"], r["untrained"]
    ok = (
        r["t_train"] <= 30 * 60
        and rep.validity >= 0.5
        and rep.validity >= 3 * rep0.validity
        and rep.mmd_degree < r["mmd_uniform"]
    )
    detail = (
        f"validity {rep.validity:.3f} (untrained {rep0.validity:.3f}), uniqueness {rep.uniqueness:.3f}, "
        f"novelty {rep.novelty:.3f}, mmd_degree {rep.mmd_degree:.4f} vs uniform {r['mmd_uniform']:.4f}, "
        f"training {r['t_train'] / 60:.1f} min"
    )
    verdict(7, "unconditional generation", ok, detail)


def test_c08_self_guidance_ablation(verdict, generation_runs):
    r = generation_runs
    cfg = r["cfg"]
    sub = cfg.with_overrides({"self_guidance": False, "out_dir": str(r["out"] / "no_guidance")})
    d = tr.train_diffusion(sub, r["ae"], r["graphs"])
    _, rep_ng = tr.generate(sub, ae=r["ae"].model, bundle=d.bundle, graphs=r["graphs"])
    rep_sg = r["report"]
    rows = []
    for variant, rep in (("self_guided", rep_sg), ("no_guidance", rep_ng)):
        rows.append({"variant": variant, **{f: getattr(rep, f) for f in tr.ABLATION_FIELDS[1:]}})
    rows.append({"variant": "difference", **{f: rows[0][f] - rows[1][f] for f in tr.ABLATION_FIELDS[1:-1]}, "count": rep_sg.count})
    path = r["out"] / "ablation_self_guidance.csv"
    tr.write_csv(path, rows, tr.ABLATION_FIELDS)
    lines = path.read_text().splitlines()
    direction = "higher" if rep_sg.validity > rep_ng.validity else "not higher"
    ok = rep_sg.validity >= rep_ng.validity - 0.02 and len(lines) == 4
    verdict(8, "self-guidance ablation", ok, f"self-guided {rep_sg.validity:.3f} vs none {rep_ng.validity:.3f} ({direction}); csv {path.name}")


# ---------------------------------------------------------------- 9


def _degree_profile(g, blocks=3):
    feats = np.asarray(g.nodes)
    prof = np.zeros((g.n, 2 * blocks))
    for i, j, _ in g.edges:
        prof[i, feats[j]] += 1
        prof[j, feats[i]] += 1
    prof[:, :blocks] /= np.maximum(prof[:, :blocks].sum(1, keepdims=True), 1)
    prof[np.arange(g.n), blocks + feats] = 1
    return prof


def test_c09_prediction_as_generation(verdict, tmp_path):
    from sklearn.linear_model import LogisticRegression

    cfg = desk("desk_sbm.cfg", tmp_path / "sbm")
    graphs = tr.load_graphs(cfg)
    parts = tr.splits(cfg, graphs)
    X = lambda gs: np.concatenate([_degree_profile(g, cfg.sbm_blocks) for g in gs])
    y = lambda gs: np.concatenate([g.y_nodes for g in gs])
    oracle = LogisticRegression(max_iter=2000).fit(X(parts["train"]), y(parts["train"])).score(X(parts["test"]), y(parts["test"]))

    t0 = time.time()
    ae = tr.train_ae(cfg, graphs)
    d = tr.train_diffusion(cfg, ae, graphs)
    _, _, acc = tr.predict(cfg, split="test", ae=ae.model, bundle=d.bundle, graphs=graphs)
    t_sbm = time.time() - t0

    rcfg = desk("desk_regress.cfg", tmp_path / "reg")
    rgraphs = tr.load_graphs(rcfg)
    rparts = tr.splits(rcfg, rgraphs)
    t0 = time.time()
    rae = tr.train_ae(rcfg, rgraphs)
    rd = tr.train_diffusion(rcfg, rae, rgraphs)
    _, truth, mae = tr.predict(rcfg, split="test", ae=rae.model, bundle=rd.bundle, graphs=rgraphs)
    t_reg = time.time() - t0
    mean_pred = np.mean([g.y_graph for g in rparts["train"]])
    base = float(np.mean(np.abs(truth - mean_pred)))

    ok = oracle >= 0.9 and acc >= 0.9 and mae <= 0.5 * base and t_sbm < 900 and t_reg < 900
    detail = f"oracle {oracle:.3f}, SBM acc {acc:.3f} ({t_sbm / 60:.1f} min), MAE {mae:.3f} vs mean baseline {base:.3f} ({t_reg / 60:.1f} min)"
    verdict(9, "prediction as generation", ok, detail)


# ---------------------------------------------------------------- 10


def test_c10_metrics_self_consistency(verdict):
    train = gen_valence_graphs(200, seed=0)
    nov = novelty(train, train)
    g = train[0]
    uni = [uniqueness([g] * k) for k in (1, 2, 5, 9)]
    rng = np.random.default_rng(0)
    mismatches = 0
    for i in range(10_000):
        h = train[i % len(train)]
        mismatches += canonical_key(h) != canonical_key(h.permute(rng.permutation(h.n)))
    ok = nov == 0 and np.allclose(uni, [1, 1 / 2, 1 / 5, 1 / 9]) and mismatches == 0
    verdict(10, "metrics self-consistency", ok, f"novelty(train,train) {nov}, uniqueness {np.round(uni, 4).tolist()}, key mismatches {mismatches}/10000")


# ---------------------------------------------------------------- 11

TINY = ["data_count=40", "ae_epochs=1", "diff_epochs=1", "T=8", "hidden=16", "heads=2", "L_enc=1", "L_denoise=1", "m=8", "d_latent=4", "pe_eig=2", "k=3", "gen_count=6", "batch=16"]
SUBCOMMANDS = ["make-data", "train-ae", "train-diff", "generate", "evaluate", "export-embeddings", "verify-prop31", "bench-stability", "gradcheck", "ablate-self-guidance"]


def _snapshot(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def _run_all(out: Path, extra=()):
    for cmd in SUBCOMMANDS:
        args = [cmd, "--out", str(out)]
        for s in TINY + list(extra):
            args += ["--set", s]
        assert main(args) == 0, cmd


def test_c11_reproducibility(verdict, tmp_path):
    out = tmp_path / "run"
    _run_all(out)
    first = _snapshot(out)
    shutil.rmtree(out)
    _run_all(out)
    second = _snapshot(out)
    reg = tmp_path / "reg"
    pred = ["task=graph_regress"]
    snaps = []
    for _ in range(2):
        for cmd in ("train-ae", "train-diff", "predict"):
            args = [cmd, "--out", str(reg)]
            for s in TINY + pred:
                args += ["--set", s]
            main(args)
        snaps.append(_snapshot(reg))
        shutil.rmtree(reg)
    differing = [k for k in first if first[k] != second.get(k)] + [k for k in snaps[0] if snaps[0][k] != snaps[1].get(k)]
    names = sorted(set(first) | set(snaps[0]))
    ok = not differing and set(first) == set(second) and {"generated.jsonl", "ae.ckpt", "diff.ckpt", "predictions.csv", "manifest.json"} <= set(names)
    verdict(11, "reproducibility", ok, f"{len(names)} artifacts compared across {len(SUBCOMMANDS) + 3} subcommands; differing: {differing or 'none'}")
