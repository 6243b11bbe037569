"""Finite-difference checks of the analytic proxy gradient and of the full pipeline."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import losses as L
from .config import RunConfig, with_overrides
from .synthdata import SequenceData, generate_sequence

TOL_PROXY_64 = 1e-6
TOL_E2E_64 = 1e-4
# 32-bit finite differences are dominated by rounding
TOL_PROXY_32 = 1e-2
TOL_E2E_32 = 1e-1


class PrecisionWarning(UserWarning):
    pass


@dataclass
class CheckResult:
    name: str  # the operation under test
    max_rel_error: float
    tolerance: float
    n_cases: int
    details: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max relative error {self.max_rel_error:.3e} "
                f"(tolerance {self.tolerance:.0e}, {self.n_cases} cases)")


# ---------------------------------------------------------------------------
# Proxy loss: analytic gradient vs central differences
# ---------------------------------------------------------------------------


def proxy_instances(n: int, seed: int = 0):
    """Random (distances, labels, alpha, beta) cases; the first two are degenerate:
    every category with exactly one positive voxel, and one category with exactly
    one negative voxel."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        S = int(rng.integers(2, 10))
        if k == 0:
            labels = rng.permutation(S)[: int(rng.integers(1, S + 1))]
        elif k == 1:
            N = int(rng.integers(2, 30))
            labels = np.zeros(N, dtype=np.int64)
            labels[rng.integers(N)] = 1
        else:
            labels = rng.integers(0, S, size=int(rng.integers(1, 60)))
        d = rng.random((len(labels), S))
        out.append((d, np.asarray(labels, dtype=np.int64), float(rng.uniform(0.5, 16)), float(rng.uniform(0.5, 16))))
    return out


def _fd_distance_grad(d: np.ndarray, labels, alpha, beta, h: float, dtype) -> np.ndarray:
    base = torch.as_tensor(d, dtype=dtype)
    lab = torch.as_tensor(labels)
    g = np.zeros_like(d)
    for idx in np.ndindex(*d.shape):
        plus, minus = base.clone(), base.clone()
        plus[idx] += h
        minus[idx] -= h
        fp = float(L.proxy_loss_from_distances(plus, lab, alpha, beta))
        fm = float(L.proxy_loss_from_distances(minus, lab, alpha, beta))
        g[idx] = (fp - fm) / (2 * h)
    return g


def check_proxy_gradient(n_instances: int = 100, seed: int = 0, float64: bool = True,
                         oracle: Callable = None) -> CheckResult:
    """Norm-wise relative error ||fd - analytic|| / ||analytic|| per instance."""
    oracle = oracle or L.proxy_loss_grad_wrt_distance
    dtype = torch.float64 if float64 else torch.float32
    h = 1e-6 if float64 else 1e-3
    tol = TOL_PROXY_64 if float64 else TOL_PROXY_32
    errors = []
    for d, labels, alpha, beta in proxy_instances(n_instances, seed):
        an = np.asarray(oracle(d, labels, alpha, beta))
        fd = _fd_distance_grad(d, labels, alpha, beta, h, dtype)
        errors.append(float(np.linalg.norm(fd - an) / max(np.linalg.norm(an), 1e-300)))
    return CheckResult("proxy_loss_grad_wrt_distance", max(errors), tol, len(errors), errors)


def check_proxy_autograd(n_instances: int = 100, seed: int = 0) -> CheckResult:
    """Automatic differentiation of the loss against the closed form."""
    errors = []
    for d, labels, alpha, beta in proxy_instances(n_instances, seed):
        dt = torch.as_tensor(d, dtype=torch.float64).requires_grad_(True)
        L.proxy_loss_from_distances(dt, torch.as_tensor(labels), alpha, beta).backward()
        an = L.proxy_loss_grad_wrt_distance(d, labels, alpha, beta)
        errors.append(float(np.linalg.norm(dt.grad.numpy() - an) / max(np.linalg.norm(an), 1e-300)))
    return CheckResult("proxy_loss (autograd)", max(errors), TOL_PROXY_64, len(errors), errors)


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------


def single_sequence(cfg: RunConfig, seed: int) -> SequenceData:
    samples = generate_sequence(cfg.scene_spec(seed))
    return SequenceData(
        name=f"gradcheck_{seed}", split="train",
        images=np.stack([s.images for s in samples]),
        points=[s.points.astype(np.float64) for s in samples],
        labels=np.stack([s.gt.labels for s in samples]),
        poses=[s.pose for s in samples],
    )


def _module_of(name: str) -> str:
    return name.split(".")[0]


def pick_parameters(model, n: int, rng: np.random.Generator, min_grad: float) -> list[tuple[str, tuple]]:
    """Round-robin over top-level modules, each pick a random entry with |grad| >= min_grad."""
    pools: dict[str, list] = {}
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        idx = np.argwhere(np.abs(p.grad.detach().numpy()) >= min_grad)
        if len(idx):
            pools.setdefault(_module_of(name), []).extend((name, tuple(int(v) for v in i)) for i in idx)
    picks, modules = [], sorted(pools)
    while len(picks) < n and any(pools.values()):
        for m in modules:
            if len(picks) == n:
                break
            pool = pools[m]
            if pool:
                picks.append(pool.pop(int(rng.integers(len(pool)))))
    return picks


def check_end_to_end(cfg: RunConfig, n_params: int = 16, seed: int = 0, float64: bool = True,
                     h: float | None = None, min_grad: float = 1e-4) -> CheckResult:
    """Central differences of the total loss on one sequence vs backpropagation.

    Per parameter the error is |fd - ad| / max(|fd|, |ad|); parameters are
    drawn among entries whose gradient magnitude is at least ``min_grad``.
    """
    from .trainer import build_model

    cfg = with_overrides(cfg, {"train.float64": float64})
    seq = single_sequence(cfg, cfg.seed + seed)
    model = build_model(cfg, cfg.rig())
    h = h if h is not None else (1e-6 if float64 else 1e-2)
    tol = TOL_E2E_64 if float64 else TOL_E2E_32

    def loss() -> torch.Tensor:
        out = model.forward_sequence(seq)
        return L.total_loss(model.loss_terms(out, seq.labels[-1], exact_proxy=True))

    model.zero_grad()
    loss().backward()
    params = dict(model.named_parameters())
    picks = pick_parameters(model, n_params, np.random.default_rng(seed), min_grad)
    details = []
    with torch.no_grad():
        for name, idx in picks:
            p = params[name]
            ad = float(p.grad[idx])
            orig = p[idx].item()
            p[idx] = orig + h
            fp = float(loss())
            p[idx] = orig - h
            fm = float(loss())
            p[idx] = orig
            fd = (fp - fm) / (2 * h)
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-300)
            details.append({"param": name, "index": list(idx), "analytic": ad, "numeric": fd, "rel": rel})
    worst = max((d["rel"] for d in details), default=float("inf"))
    return CheckResult("end_to_end total_loss", worst, tol, len(details), details)


def negated(fn: Callable) -> Callable:
    """Sign-flipped copy of ``fn`` (fault-injection fixture)."""
    def wrapper(*args, **kwargs):
        return -np.asarray(fn(*args, **kwargs))
    wrapper.__name__ = getattr(fn, "__name__", "fn")
    return wrapper


def run_gradcheck(cfg: RunConfig, float64: bool = True, n_instances: int = 100, n_params: int = 16,
                  inject_sign_error: bool = False, end_to_end: bool = True) -> list[CheckResult]:
    if not float64:
        warnings.warn("64-bit mode is off: finite differences are run at 32-bit precision and "
                      "tolerances are loosened", PrecisionWarning, stacklevel=2)
    oracle = negated(L.proxy_loss_grad_wrt_distance) if inject_sign_error else None
    results = [check_proxy_gradient(n_instances, cfg.seed, float64, oracle)]
    if float64:
        results.append(check_proxy_autograd(n_instances, cfg.seed))
    if end_to_end:
        results.append(check_end_to_end(cfg, n_params, 0, float64))
    return results


__all__ = [
    "CheckResult", "PrecisionWarning", "check_end_to_end", "check_proxy_autograd", "check_proxy_gradient",
    "negated", "pick_parameters", "proxy_instances", "run_gradcheck", "single_sequence",
]
