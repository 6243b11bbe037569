"""Occupancy proxy loss and the segmentation losses of the total objective."""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term


# ---------------------------------------------------------------------------
# Hellinger distance between softmax distributions
# ---------------------------------------------------------------------------


def to_distribution(vec: torch.Tensor) -> torch.Tensor:
    return torch.softmax(vec, dim=-1)


def _check_distribution(p: torch.Tensor, name: str):
    total = p.sum(dim=-1)
    if (p < 0).any() or not torch.allclose(total, torch.ones_like(total), atol=1e-6):
        raise ValueError(f"{name} is not a probability distribution")


def hellinger(p, q, validate: bool = True) -> torch.Tensor:
    """(1/sqrt 2) * || sqrt p - sqrt q ||_2 along the last axis (broadcasting)."""
    p = torch.as_tensor(p)
    q = torch.as_tensor(q, dtype=p.dtype)
    if validate:
        _check_distribution(p, "p")
        _check_distribution(q, "q")
    return _hellinger_from_roots(p.sqrt(), q.sqrt())


def _hellinger_from_roots(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    sq = ((a - b) ** 2).sum(dim=-1)
    # keep the gradient finite at p == q
    positive = sq > 0
    safe = torch.where(positive, sq, torch.ones_like(sq))
    return torch.where(positive, safe.sqrt(), torch.zeros_like(sq)) / math.sqrt(2.0)


def _sqrt_softmax(vec: torch.Tensor) -> torch.Tensor:
    # sqrt(softmax) in log space: sqrt has an infinite slope where a float32
    # probability underflows to 0, exp does not
    return torch.exp(0.5 * torch.log_softmax(vec, dim=-1))


def proxy_distances(logits: torch.Tensor, proxies: torch.Tensor) -> torch.Tensor:
    """(N, C) voxel logits and (S, C) proxies -> (N, S) Hellinger distances."""
    return _hellinger_from_roots(_sqrt_softmax(logits)[:, None, :], _sqrt_softmax(proxies)[None, :, :])


# ---------------------------------------------------------------------------
# Proxy loss
# ---------------------------------------------------------------------------


class ProxyBank(nn.Module):
    """One learnable vector per category (empty included)."""

    def __init__(self, n_categories: int, alpha: float = 6.0, beta: float = 12.0, init_std: float = 0.1):
        super().__init__()
        if alpha <= 0 or beta <= 0:
            raise ValueError("alpha and beta must be positive")
        self.alpha, self.beta = float(alpha), float(beta)
        self.vectors = nn.Parameter(torch.randn(n_categories, n_categories) * init_std)

    def __len__(self):
        return self.vectors.shape[0]


def proxy_loss_from_distances(d: torch.Tensor, labels: torch.Tensor, alpha: float, beta: float) -> torch.Tensor:
    """Loss from a (N, S) distance matrix; S = |H| is the number of proxies."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    S = d.shape[1]
    pos = labels[:, None] == torch.arange(S)[None, :]
    neg = ~pos
    neg_inf = torch.tensor(-math.inf, dtype=d.dtype)
    pos_lse = torch.logsumexp(torch.where(pos, alpha * d, neg_inf), dim=0)
    neg_lse = torch.logsumexp(torch.where(neg, -beta * d, neg_inf), dim=0)
    has_pos = pos.any(dim=0)
    has_neg = neg.any(dim=0)
    total = torch.where(has_pos, pos_lse, 0.0).sum() + torch.where(has_neg, neg_lse, 0.0).sum()
    return total / S


def proxy_loss(logits: torch.Tensor, labels: torch.Tensor, bank: ProxyBank) -> torch.Tensor:
    return proxy_loss_from_distances(proxy_distances(logits, bank.vectors), labels, bank.alpha, bank.beta)


def proxy_loss_grad_wrt_distance(d, labels, alpha: float, beta: float) -> np.ndarray:
    """Closed-form derivative of the proxy loss w.r.t. each distance d[v, s]."""
    d = np.asarray(torch.as_tensor(d).detach(), dtype=np.float64)
    labels = np.asarray(labels)
    N, S = d.shape
    grad = np.zeros_like(d)
    for s in range(S):
        pos = labels == s
        for mask, sign, coef in ((pos, 1.0, alpha), (~pos, -1.0, beta)):
            if not mask.any():
                continue
            z = sign * coef * d[mask, s]
            w = np.exp(z - z.max())
            grad[mask, s] = sign * coef * w / w.sum() / S
    return grad


def stratified_subsample(labels: np.ndarray, max_voxels: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of at most ``max_voxels`` voxels, every present category kept.

    Each present category keeps at least ``min(count, max_voxels // n_present)``
    voxels; the remaining budget is filled uniformly from the rest.
    """
    labels = np.asarray(labels).ravel()
    n = len(labels)
    if n <= max_voxels:
        return np.arange(n)
    cats = np.unique(labels)
    quota = max(1, max_voxels // len(cats))
    chosen = []
    for c in cats:
        idx = np.nonzero(labels == c)[0]
        chosen.append(idx if len(idx) <= quota else rng.choice(idx, quota, replace=False))
    chosen = np.concatenate(chosen)
    rest = np.setdiff1d(np.arange(n), chosen, assume_unique=True)
    budget = max_voxels - len(chosen)
    if budget > 0:
        chosen = np.concatenate([chosen, rng.choice(rest, budget, replace=False)])
    return np.sort(chosen)


# ---------------------------------------------------------------------------
# Segmentation terms
# ---------------------------------------------------------------------------


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.long))


def _lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1.0 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1].clone()
    return jaccard


def lovasz_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Lovasz-softmax over the categories present in ``labels`` (mean over them)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    losses = []
    for c in torch.unique(labels).tolist():
        fg = (labels == c).to(probs.dtype)
        errors = (fg - probs[:, c]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True, stable=True)
        losses.append(torch.dot(errors_sorted, _lovasz_grad(fg[perm])))
    return torch.stack(losses).mean()


def _neg_log(x: torch.Tensor) -> torch.Tensor:
    return -torch.log(x.clamp(min=1e-12))


def scal_sem(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Scene-class affinity per category (precision, recall, specificity), averaged
    over categories present in ``labels``."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    terms = []
    for c in range(probs.shape[1]):
        target = (labels == c).to(probs.dtype)
        if target.sum() == 0:
            continue
        p = probs[:, c]
        nominator = (p * target).sum()
        loss = p.new_zeros(())
        if p.sum() > 0:
            loss = loss + _neg_log(nominator / p.sum())
        loss = loss + _neg_log(nominator / target.sum())
        n_neg = (1 - target).sum()
        if n_neg > 0:
            loss = loss + _neg_log(((1 - p) * (1 - target)).sum() / n_neg)
        terms.append(loss)
    return torch.stack(terms).mean() if terms else probs.sum() * 0


def scal_geo(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Scene-class affinity on the occupied / empty split (category 0 = empty)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    empty = probs[:, 0]
    occ = 1 - empty
    occ_t = (labels != 0).to(probs.dtype)
    inter = (occ * occ_t).sum()
    loss = probs.new_zeros(())
    if occ.sum() > 0:
        loss = loss + _neg_log(inter / occ.sum())
    if occ_t.sum() > 0:
        loss = loss + _neg_log(inter / occ_t.sum())
    if (1 - occ_t).sum() > 0:
        loss = loss + _neg_log(((1 - occ_t) * empty).sum() / (1 - occ_t).sum())
    return loss


TERMS = ("proxy", "ce", "lovasz", "scal_geo", "scal_sem")


def total_loss(terms: Mapping[str, torch.Tensor], use_proxy: bool = True) -> torch.Tensor:
    """Unweighted sum of the terms; raises NonFiniteLossError naming the bad term."""
    total = None
    for name, value in terms.items():
        if name == "proxy" and not use_proxy:
            continue
        v = torch.as_tensor(value)
        if not torch.isfinite(v).all():
            raise NonFiniteLossError(name, float(v.detach()))
        total = v if total is None else total + v
    return total if total is not None else torch.zeros(())
