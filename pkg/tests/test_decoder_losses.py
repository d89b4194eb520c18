import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gyrodiff.decoder import (
    Decoder,
    TaskHead,
    decouple,
    head_forward,
    manifold_weight_rows,
    verify_product_eigen,
    write_manifold_weights,
)
from gyrodiff.losses import kl_reg, reconstruction_loss, target_loss, total_loss
from gyrodiff.numerics import DimensionError, precision


@pytest.fixture(autouse=True)
def f64():
    with precision("float64"):
        yield


def test_decouple_examples():
    Z = torch.arange(10.0).reshape(2, 5)
    assert torch.equal(decouple(Z, [5])[0], Z)
    a, b = decouple(Z, [2, 3])
    assert torch.equal(a, Z[:, :2]) and torch.equal(b, Z[:, 2:])
    with pytest.raises(DimensionError):
        decouple(Z, [2, 2])
    na, nb = decouple(Z.numpy(), [2, 3])
    assert np.array_equal(np.concatenate([na, nb], -1), Z.numpy())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.integers(1, 5))
def test_decouple_roundtrip_exact(widths, rows):
    Z = torch.randn(rows, sum(widths), dtype=torch.float64)
    assert torch.equal(torch.cat(decouple(Z, widths), -1), Z)


def _head():
    torch.manual_seed(0)
    return TaskHead([2, 3, 4], 5, hidden=8).double()


def test_head_zero_blocks_give_bias():
    head = _head()
    blocks = [torch.zeros(1, w, dtype=torch.float64) for w in head.widths]
    assert torch.allclose(head_forward(head, blocks)[0], head.out.bias, atol=1e-15)


def test_head_collapsed_attention_uses_one_block():
    head = _head()
    with torch.no_grad():
        head.block_logits.copy_(torch.tensor([-1e9, 0.0, -1e9]))
    blocks = [torch.randn(2, w, dtype=torch.float64) for w in head.widths]
    out = head_forward(head, blocks)
    blocks[0] = torch.randn(2, 2, dtype=torch.float64) * 100
    blocks[2] = torch.randn(2, 4, dtype=torch.float64) * 100
    assert torch.allclose(head_forward(head, blocks), out, atol=1e-12)


def test_head_uniform_weights_identical_blocks():
    torch.manual_seed(1)
    head = TaskHead([3, 3], 2, hidden=4).double()
    single = TaskHead([3], 2, hidden=4).double()
    with torch.no_grad():
        head.projs[1].weight.copy_(head.projs[0].weight)
        single.projs[0].weight.copy_(head.projs[0].weight)
        single.out.load_state_dict(head.out.state_dict())
    b = torch.randn(4, 3, dtype=torch.float64)
    assert torch.allclose(head_forward(head, [b, b]), head_forward(single, [b]), atol=1e-14)


def test_head_weights_are_probabilities_and_shape_errors():
    head = _head()
    with torch.no_grad():
        head.block_logits.copy_(torch.tensor([3.0, -2.0, 0.5]))
    w = head.block_weights().detach()
    assert abs(float(w.sum()) - 1) < 1e-12 and bool((w >= 0).all())
    with pytest.raises(DimensionError):
        head_forward(head, [torch.zeros(1, 2)])
    with pytest.raises(DimensionError):
        head_forward(head, [torch.zeros(1, 2), torch.zeros(1, 4), torch.zeros(1, 4)])


def test_edge_logits_symmetric_and_weights_csv(tmp_path):
    torch.manual_seed(2)
    dec = Decoder([2, 3], 4, 3, hidden=8, tasks={"graph_regress": 1}).double()
    ze = torch.randn(2, 5, 5, 5, dtype=torch.float64)
    lg = dec.edge_logits(ze)
    assert torch.allclose(lg, lg.transpose(1, 2))
    rows = manifold_weight_rows(dec, [-1, 1])
    assert {r[0] for r in rows} == {"reconstruct_nodes", "reconstruct_edges", "graph_regress"}
    p = tmp_path / "manifold_weights.csv"
    write_manifold_weights(p, dec, [-1, 1])
    lines = p.read_text().splitlines()
    assert lines[0] == "task,curvature_sign,weight" and len(lines) == 7


@pytest.mark.parametrize("k1,k2,expected", [(0, 0, 0.0), (1, 2, 5.0), (3, 4, 25.0)])
def test_product_eigen_examples(k1, k2, expected):
    lam, exp = verify_product_eigen(k1, k2, grid=256)
    assert exp == expected
    if expected == 0:
        assert abs(lam) < 1e-9
    else:
        assert abs(lam - expected) / expected < 0.01


def test_product_eigen_fd_oracle():
    # periodic 5-point stencil on cos(k t) has the closed-form symbol (2 - 2 cos(k h)) / h^2
    h = 2 * np.pi / 256
    sym = lambda k: (2 - 2 * np.cos(k * h)) / h**2
    lam, _ = verify_product_eigen(3, 4, 256)
    assert lam == pytest.approx(sym(3) + sym(4), rel=1e-10)
    with pytest.raises(ValueError):
        verify_product_eigen(1, 1, grid=32)


# ---------------------------------------------------------------- losses


def test_kl_examples():
    assert float(kl_reg(torch.zeros(3, 4), torch.zeros(3, 4))) == 0.0
    assert float(kl_reg(torch.ones(1, 1), torch.zeros(1, 1))) == pytest.approx(0.5, abs=1e-15)
    mask = torch.tensor([True, False])
    mu = torch.tensor([[1.0], [100.0]])
    assert float(kl_reg(mu, torch.zeros(2, 1), mask)) == pytest.approx(0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_kl_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    mu = torch.randn(5, 3, generator=g, dtype=torch.float64) * 3
    lv = torch.randn(5, 3, generator=g, dtype=torch.float64) * 3
    assert float(kl_reg(mu, lv)) >= 0


def test_kl_closed_form_matches_torch_distributions():
    g = torch.Generator().manual_seed(0)
    mu = torch.randn(6, 4, generator=g, dtype=torch.float64)
    lv = torch.randn(6, 4, generator=g, dtype=torch.float64)
    q = torch.distributions.Normal(mu, torch.exp(0.5 * lv))
    p = torch.distributions.Normal(torch.zeros_like(mu), torch.ones_like(mu))
    ref = torch.distributions.kl_divergence(q, p).sum(-1).mean()
    assert float(kl_reg(mu, lv)) == pytest.approx(float(ref), rel=1e-12)


def _one_hot_logits(labels, K, big=20.0):
    return (torch.nn.functional.one_hot(labels, K).double() * 2 - 1) * big


def test_reconstruction_examples():
    nt = torch.tensor([[0, 2, 1]])
    et = torch.tensor([[[0, 1, 0], [1, 0, 2], [0, 2, 0]]])
    loss = reconstruction_loss(_one_hot_logits(nt, 3), _one_hot_logits(et, 3), nt, et)
    assert float(loss) < 1e-8
    K_n, K_e = 4, 3
    uni = reconstruction_loss(torch.zeros(1, 3, K_n), torch.zeros(1, 3, 3, K_e), nt, et)
    assert float(uni) == pytest.approx(math.log(K_n) + math.log(K_e), abs=1e-12)
    two = reconstruction_loss(torch.zeros(1, 3, 2), torch.zeros(1, 3, 3, 3), torch.tensor([[0, 1, 1]]), et)
    assert float(two) == pytest.approx(math.log(2) + math.log(3), abs=1e-12)
    with pytest.raises(ValueError):
        reconstruction_loss(torch.zeros(1, 3, 2), torch.zeros(1, 3, 3, 3), nt, et)


def test_reconstruction_ignores_diagonal_lower_triangle_and_padding():
    nt = torch.tensor([[0, 1, 0]])
    et = torch.tensor([[[0, 1, 0], [1, 0, 0], [0, 0, 0]]])
    good = reconstruction_loss(_one_hot_logits(nt, 2), _one_hot_logits(et, 2), nt, et)
    el = _one_hot_logits(et, 2)
    el[0, 1, 0] = torch.tensor([50.0, -50.0])  # lower triangle
    el[0, 2, 2] = torch.tensor([-50.0, 50.0])  # diagonal
    assert float(reconstruction_loss(_one_hot_logits(nt, 2), el, nt, et)) == pytest.approx(float(good), abs=1e-15)
    mask = torch.tensor([[True, True, False]])
    nl = _one_hot_logits(nt, 2)
    nl[0, 2] = torch.tensor([-50.0, 50.0])  # padded node wrong
    assert float(reconstruction_loss(nl, _one_hot_logits(et, 2), nt, et, mask)) < 1e-8


def test_target_loss_examples():
    y = torch.tensor([1.0, 2.0])
    assert float(target_loss("regression", y, y)) == 0.0
    assert float(target_loss("regression", torch.tensor([3.0]), torch.tensor([1.0]))) == 4.0
    lg = torch.zeros(5, 7)
    assert float(target_loss("classification", lg, torch.arange(5))) == pytest.approx(math.log(7))
    with pytest.raises(DimensionError):
        target_loss("regression", torch.zeros(2), torch.zeros(3))
    with pytest.raises(ValueError):
        target_loss("ranking", y, y)


def test_total_loss_beta_linearity():
    l_tgt, l_reg = torch.tensor(0.7), torch.tensor(3.0)
    t1, r1 = total_loss(l_tgt, l_reg, beta=0.1)
    t2, r2 = total_loss(l_tgt, l_reg, beta=0.2)
    assert abs(r1.total - (r1.l_tgt + 0.1 * r1.l_reg)) < 1e-10
    assert float(t2 - t1) == pytest.approx(0.1 * 3.0, abs=1e-12)
