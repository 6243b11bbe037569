import math

import numpy as np
import pytest
import torch

from occloff import losses as L
from occloff.gradcheck import check_proxy_autograd, check_proxy_gradient

t64 = lambda x: torch.as_tensor(x, dtype=torch.float64)  # noqa: E731


# -- distributions and the Hellinger distance --------------------------------------

def test_to_distribution_uniform():
    assert torch.allclose(L.to_distribution(torch.full((9,), 3.7, dtype=torch.float64)), t64([1 / 9] * 9))


def test_to_distribution_shift_invariant():
    v = torch.randn(9, dtype=torch.float64)
    assert torch.allclose(L.to_distribution(v), L.to_distribution(v + 12.5), atol=1e-15)


def test_to_distribution_ln3():
    assert torch.allclose(L.to_distribution(t64([0.0, math.log(3)])), t64([0.25, 0.75]), atol=1e-15)


def test_hellinger_examples():
    assert float(L.hellinger(t64([0.3, 0.7]), t64([0.3, 0.7]))) == 0.0
    assert float(L.hellinger(t64([1.0, 0.0]), t64([0.0, 1.0]))) == pytest.approx(1.0, abs=1e-15)
    assert abs(float(L.hellinger(t64([0.5, 0.5]), t64([1.0, 0.0]))) - math.sqrt(1 - math.sqrt(2) / 2)) < 1e-9


def test_hellinger_rejects_non_distributions():
    with pytest.raises(ValueError):
        L.hellinger(t64([0.5, 0.6]), t64([0.5, 0.5]))


def test_hellinger_metric_properties():
    rng = np.random.default_rng(0)
    p, q, r = (t64(rng.dirichlet(np.full(9, 0.5), size=1000)) for _ in range(3))
    dpq, dqp = L.hellinger(p, q), L.hellinger(q, p)
    assert ((dpq >= 0) & (dpq <= 1)).all()
    assert torch.equal(dpq, dqp)
    assert float(L.hellinger(p, p).abs().max()) <= 1e-12
    assert (dpq <= L.hellinger(p, r) + L.hellinger(r, q) + 1e-12).all()


def test_hellinger_gradient_finite_at_identity():
    p = t64([0.2, 0.8]).requires_grad_(True)
    L.hellinger(p, t64([0.2, 0.8])).backward()
    assert torch.isfinite(p.grad).all()


def test_proxy_distance_gradient_finite_when_softmax_underflows():
    # float32 softmax of this row is exactly one-hot
    x = torch.tensor([[120.0] + [0.0] * 8], requires_grad=True)
    assert (torch.softmax(x, -1)[0, 1:] == 0).all()
    L.proxy_distances(x, torch.zeros(9, 9)).sum().backward()
    assert torch.isfinite(x.grad).all()


def test_proxy_distances_match_hellinger_on_distributions():
    g = torch.Generator().manual_seed(0)
    x, pr = torch.randn(5, 9, generator=g, dtype=torch.float64), torch.randn(9, 9, generator=g, dtype=torch.float64)
    ref = L.hellinger(torch.softmax(x, -1)[:, None], torch.softmax(pr, -1)[None])
    torch.testing.assert_close(L.proxy_distances(x, pr), ref, rtol=0, atol=1e-14)


# -- proxy loss ------------------------------------------------------------------

S = 9


def test_one_voxel_hand_value():
    d = torch.ones(1, S, dtype=torch.float64)
    d[0, 3] = 0.0
    loss = L.proxy_loss_from_distances(d, torch.tensor([3]), 1.0, 1.0)
    assert float(loss) == pytest.approx(-(S - 1) / S, abs=1e-15)


def test_exponent_collapse_limit():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, size=20)
    d = t64(rng.random((20, 4)))
    loss = float(L.proxy_loss_from_distances(d, torch.as_tensor(labels), 1e-12, 1e-12))
    counts = np.bincount(labels, minlength=4)
    expected = sum(math.log(c) for c in counts if c) + sum(math.log(20 - c) for c in counts if 20 - c)
    assert loss == pytest.approx(expected / 4, abs=1e-9)


def test_duplicating_voxels_adds_log2_per_term():
    rng = np.random.default_rng(1)
    labels = torch.as_tensor(rng.integers(0, 3, size=15))
    d = t64(rng.random((15, 5)))
    base = float(L.proxy_loss_from_distances(d, labels, 6, 12))
    dup = float(L.proxy_loss_from_distances(torch.cat([d, d]), torch.cat([labels, labels]), 6, 12))
    present = len(torch.unique(labels))
    n_terms = present + 5  # positive terms of present categories, every category has negatives
    assert dup - base == pytest.approx(n_terms * math.log(2) / 5, abs=1e-12)


def test_grad_single_positive_and_single_negative():
    d = np.random.default_rng(2).random((4, 3))
    labels = np.array([0, 1, 1, 1])
    g = L.proxy_loss_grad_wrt_distance(d, labels, 6.0, 12.0)
    assert g[0, 0] == pytest.approx(6.0 / 3)  # only positive of category 0
    assert g[0, 1] == pytest.approx(-12.0 / 3)  # only negative of category 1


def test_grad_branch_sums():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 4, size=30)
    g = L.proxy_loss_grad_wrt_distance(rng.random((30, 4)), labels, 6.0, 12.0)
    for s in range(4):
        pos = labels == s
        if pos.any():
            assert g[pos, s].sum() == pytest.approx(6.0 / 4, abs=1e-12)
        assert g[~pos, s].sum() == pytest.approx(-12.0 / 4, abs=1e-12)


def test_minority_proxy_gets_every_negative():
    rng = np.random.default_rng(4)
    labels = np.zeros(200, dtype=np.int64)
    labels[:3] = 7
    g = L.proxy_loss_grad_wrt_distance(rng.random((200, 9)), labels, 6.0, 12.0)
    assert np.count_nonzero(g[labels != 7, 7]) == int((labels != 7).sum())


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    logits = t64(rng.normal(size=(40, S)))
    labels = torch.as_tensor(rng.integers(0, S, size=40))
    bank = L.ProxyBank(S).double()
    perm = torch.as_tensor(rng.permutation(40))
    with torch.no_grad():
        a = float(L.proxy_loss(logits, labels, bank))
        b = float(L.proxy_loss(logits[perm], labels[perm], bank))
    assert a == pytest.approx(b, abs=1e-12)


def test_analytic_gradient_quick():
    assert check_proxy_gradient(10, seed=1).passed
    assert check_proxy_autograd(10, seed=1).passed


def test_stratified_subsample_keeps_categories():
    rng = np.random.default_rng(6)
    labels = np.zeros(10_000, dtype=np.int64)
    labels[rng.choice(10_000, 5, replace=False)] = 8
    idx = L.stratified_subsample(labels, 500, rng)
    assert len(idx) == 500 and len(np.unique(idx)) == 500
    assert (labels[idx] == 8).sum() == 5


# -- segmentation terms ----------------------------------------------------------

def test_perfect_predictions():
    labels = torch.tensor([0, 3, 3, 8, 1])
    logits = torch.full((5, S), -1e4, dtype=torch.float64)
    logits[torch.arange(5), labels] = 0.0
    assert float(L.ce_loss(logits, labels)) == pytest.approx(0, abs=1e-12)
    assert float(L.lovasz_loss(torch.softmax(logits, -1), labels)) == pytest.approx(0, abs=1e-12)


def test_uniform_ce_is_ln9():
    assert float(L.ce_loss(torch.zeros(7, S, dtype=torch.float64), torch.arange(7))) == pytest.approx(math.log(9))


def test_scal_two_voxel_hand_case():
    probs = t64([[0.2, 0.8], [0.6, 0.4]])
    labels = torch.tensor([1, 0])
    geo = -math.log(0.8 / 1.2) - math.log(0.8) - math.log(0.6)
    sem0 = -math.log(0.6 / 0.8) - math.log(0.6) - math.log(0.8)
    sem1 = -math.log(0.8 / 1.2) - math.log(0.8) - math.log(0.6)
    assert float(L.scal_geo(probs, labels)) == pytest.approx(geo, abs=1e-12)
    assert float(L.scal_sem(probs, labels)) == pytest.approx((sem0 + sem1) / 2, abs=1e-12)


def test_total_loss_examples():
    assert float(L.total_loss({k: torch.tensor(0.0) for k in L.TERMS})) == 0.0
    terms = {k: torch.tensor(float(i + 1)) for i, k in enumerate(L.TERMS)}
    assert float(L.total_loss(terms)) == 15.0
    assert float(L.total_loss(terms, use_proxy=False)) == 14.0


def test_total_loss_names_non_finite_term():
    terms = {k: torch.tensor(1.0) for k in L.TERMS}
    terms["lovasz"] = torch.tensor(float("nan"))
    with pytest.raises(L.NonFiniteLossError, match="lovasz"):
        L.total_loss(terms)


def test_proxy_loss_lower_bound():
    # recorded sample losses are shifted by beta on the strength of this bound
    rng = np.random.default_rng(7)
    for _ in range(200):
        n, s = int(rng.integers(1, 30)), int(rng.integers(2, 10))
        labels = torch.as_tensor(rng.integers(0, s, size=n))
        d = t64(rng.random((n, s)))
        d[labels[:, None] != torch.arange(s)[None]] = 1.0  # worst case for every negative term
        beta = float(rng.uniform(0.5, 16))
        assert float(L.proxy_loss_from_distances(d, labels, 6.0, beta)) >= -beta
