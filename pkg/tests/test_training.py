import numpy as np
import pytest
import torch

from gyrodiff import checkpoint as ck
from gyrodiff import training as tr
from gyrodiff.config import RunConfig
from gyrodiff.datasets import gen_valence_graphs, load_jsonl
from gyrodiff.numerics import precision

SMALL = dict(data_count=40, hidden=16, heads=2, L_enc=1, L_denoise=1, m=8, d_latent=4, pe_eig=2, k=3, T=8, batch=16, gen_count=5)


def small(tmp_path, **kw):
    return RunConfig(out_dir=str(tmp_path), **{**SMALL, **kw})


def test_overfit_single_graph_within_500_steps():
    g = gen_valence_graphs(1, seed=0)[0]
    steps, node_acc, edge_acc = tr.overfit_single_graph(g, RunConfig(seed=0), steps=500)
    assert steps is not None and steps <= 500
    assert node_acc == 1.0 and edge_acc == 1.0


def test_zero_epochs_checkpoint_is_initialization(tmp_path):
    cfg = small(tmp_path, ae_epochs=0)
    res = tr.train_ae(cfg)
    tr.setup(cfg)
    init = tr.build_autoencoder(cfg, 4, 3)
    saved = ck.load(res.checkpoint)
    for name, p in init.state_dict().items():
        assert np.array_equal(saved["ae." + name], p.float().numpy()), name


def test_train_log_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    tr.train_ae(small(a, ae_epochs=2))
    tr.train_ae(small(b, ae_epochs=2))
    assert (a / "train_log.csv").read_bytes() == (b / "train_log.csv").read_bytes()
    assert (a / "ae.ckpt").read_bytes() == (b / "ae.ckpt").read_bytes()


def test_diffusion_training_and_empty_generation(tmp_path):
    cfg = small(tmp_path, ae_epochs=1, diff_epochs=2)
    ae = tr.train_ae(cfg)
    d = tr.train_diffusion(cfg, ae)
    assert [r["epoch"] for r in d.log] == [1, 2]
    assert all(np.isfinite(r["heldout_loss"]) for r in d.log)
    out, rep = tr.generate(cfg, count=0, ae=ae.model, bundle=d.bundle)
    assert out == [] and rep is None
    assert load_jsonl(tmp_path / "generated.jsonl") == []
    assert (tmp_path / "gen_report.csv").read_text() == ""
    out, rep = tr.generate(cfg, ae=ae.model, bundle=d.bundle)
    assert len(out) == 5 and all(1 <= g.n <= 12 for g in out)
    again, _ = tr.generate(cfg, ae=ae.model, bundle=d.bundle)
    assert again == out


def test_latent_coords_exact_bijection_on_data():
    with precision("float64"):
        _coords_roundtrip()


def _coords_roundtrip():
    torch.manual_seed(0)
    basis = torch.randn(3, 10, dtype=torch.float64)
    rows = lambda n: torch.randn(n, 3, dtype=torch.float64) @ basis + 2.0
    lat = [(rows(5), rows(25).reshape(5, 5, 10), None) for _ in range(8)]
    coords = tr.LatentCoords.fit(lat, r=3)
    zx = lat[0][0]
    c = coords.encode(zx, "x")
    assert c.shape == (5, 3)
    assert torch.allclose(coords.decode(c, "x"), zx, atol=1e-10)
    allx = torch.cat([z for z, _, _ in lat])
    cx = coords.encode(allx, "x")
    assert torch.allclose(cx.mean(0), torch.zeros(3, dtype=torch.float64), atol=1e-10)
    assert torch.allclose(cx.std(0), torch.ones(3, dtype=torch.float64), atol=1e-10)
    back = tr.LatentCoords.from_entries(ck.loads(ck.dumps(coords.entries())))
    assert torch.allclose(back.decode(back.encode(zx, "x"), "x"), zx, atol=1e-4)


def test_checkpoint_config_mismatch_rejected(tmp_path):
    cfg = small(tmp_path, ae_epochs=0)
    tr.train_ae(cfg)
    with pytest.raises(Exception):
        tr.load_autoencoder(small(tmp_path, d_latent=6), tmp_path / "ae.ckpt", 4, 3)


def test_non_finite_loss_aborts(tmp_path, monkeypatch):
    build = tr.build_autoencoder

    def poisoned(*a, **kw):
        model = build(*a, **kw)
        with torch.no_grad():
            model.decoder.edge_head.out.bias.fill_(float("nan"))
        return model

    monkeypatch.setattr(tr, "build_autoencoder", poisoned)
    with pytest.raises(tr.TrainingError, match="step 1"):
        tr.train_ae(small(tmp_path, ae_epochs=1))


def test_self_guidance_ablation_csv(tmp_path):
    cfg = small(tmp_path, ae_epochs=1, diff_epochs=1)
    rows = tr.ablate_self_guidance(cfg)
    assert [r["variant"] for r in rows] == ["self_guided", "no_guidance", "difference"]
    assert rows[2]["validity"] == pytest.approx(rows[0]["validity"] - rows[1]["validity"])
    lines = (tmp_path / "ablation_self_guidance.csv").read_text().splitlines()
    assert lines[0] == ",".join(tr.ABLATION_FIELDS) and len(lines) == 4
    assert (tmp_path / "self_guided" / "centroids.csv").exists()
    assert not (tmp_path / "no_guidance" / "centroids.csv").exists()


def test_untrained_bundle_matches_fresh_initialisation(tmp_path):
    cfg = small(tmp_path, ae_epochs=1, diff_epochs=1)
    ae = tr.train_ae(cfg)
    d = tr.train_diffusion(cfg, ae)
    base = tr.untrained_bundle(cfg, ae.model, d.bundle)
    fresh = tr.build_denoiser(cfg, ae.model)
    for (n, a), b in zip(base.model.state_dict().items(), fresh.state_dict().values()):
        assert torch.equal(a, b), n
    assert base.coords is d.bundle.coords


def test_posterior_noise_map_is_exact():
    with precision("float64"):
        torch.manual_seed(0)
        d, D = 4, 12
        V = torch.randn(d, D, dtype=torch.float64)
        lat = [((torch.randn(5, d, dtype=torch.float64) @ V), (torch.randn(5, 5, d, dtype=torch.float64) @ V), None) for _ in range(6)]
        coords = tr.LatentCoords.fit(lat, r=3)
        mu = torch.randn(5, d, dtype=torch.float64)
        noise = 0.3 * torch.randn(5, d, dtype=torch.float64)
        direct = coords.encode((mu + noise) @ V, "x") - coords.encode(mu @ V, "x")
        assert torch.allclose(direct, noise @ coords.noise_map(V, "x"), atol=1e-12)


def test_latent_sample_training_runs_and_is_deterministic(tmp_path):
    a = small(tmp_path / "a", ae_epochs=1, diff_epochs=2, latent_sample=True, latent_rank=2)
    ae = tr.train_ae(a)
    d1 = tr.train_diffusion(a, ae)
    d2 = tr.train_diffusion(a, ae)
    assert d1.log == d2.log and d1.bundle.model.d_in == 2
    plain = tr.train_diffusion(a.with_overrides({"latent_sample": False}), ae)
    assert plain.log != d1.log
