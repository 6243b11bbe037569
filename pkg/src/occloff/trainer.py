"""Training / evaluation driver: AHSW-weighted optimisation, metrics, checkpoints."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses as L
from .ahsw import AHSWConfig, SampleLossHistory, plan_from_history
from .config import RunConfig, config_from_dict
from .geometry import CameraModel
from .metrics import IoUReport, confusion_matrix, iou_from_confusion
from .model import N_CATEGORIES, ForwardOutput, OccLoffModel
from .synthdata import Dataset, SequenceData

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "occloff-checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Setup
# ---------------------------------------------------------------------------


def set_determinism(seed: int, threads: int = 1):
    torch.manual_seed(seed)
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True, warn_only=True)


def build_model(cfg: RunConfig, rig: Sequence[CameraModel]) -> OccLoffModel:
    """Seeded initialisation; 64-bit parameters when ``train.float64`` is set."""
    torch.manual_seed(cfg.seed)
    model = OccLoffModel(cfg, rig)
    return model.double() if cfg.train.float64 else model


def make_optimizer(model: OccLoffModel) -> torch.optim.Optimizer:
    t = model.cfg.train
    return torch.optim.AdamW(model.parameters(), lr=t.lr, weight_decay=t.weight_decay)


def _sample_rng(cfg: RunConfig, epoch: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, epoch, sample_id])


def sample_loss(model: OccLoffModel, seq: SequenceData, rng: np.random.Generator | None = None,
                exact_proxy: bool = False) -> tuple[torch.Tensor, dict[str, float], ForwardOutput]:
    out = model.forward_sequence(seq)
    terms = model.loss_terms(out, seq.labels[-1], rng, exact_proxy=exact_proxy)
    total = L.total_loss(terms)
    return total, {k: float(v.detach()) for k, v in terms.items()}, out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: OccLoffModel | None, cfg: RunConfig, rig, epoch: int,
                    optimizer: torch.optim.Optimizer | None = None,
                    history: SampleLossHistory | None = None, kind: str = "model") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "epoch": epoch,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "rig": [c.to_dict() for c in rig],
        "state_dict": model.state_dict() if model is not None else None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "histories": history.to_dict() if history is not None else {},
    }
    torch.save(payload, path)
    return path


@dataclass
class Checkpoint:
    kind: str
    epoch: int
    cfg: RunConfig
    rig: list[CameraModel]
    model: OccLoffModel | None
    optimizer_state: dict | None
    history: SampleLossHistory


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an occloff checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload['format_version']}")
    cfg = config_from_dict(payload["config"])
    rig = [CameraModel.from_dict(c) for c in payload["rig"]]
    model = None
    if payload["kind"] == "model":
        model = build_model(cfg, rig)
        model.load_state_dict(payload["state_dict"])
    return Checkpoint(payload["kind"], payload["epoch"], cfg, rig, model, payload["optimizer"],
                      SampleLossHistory.from_dict(payload["histories"]))


def write_oracle_checkpoint(path, cfg: RunConfig, rig) -> Path:
    """A checkpoint whose predictions are the ground truth itself (evaluation fixture)."""
    return save_checkpoint(path, None, cfg, rig, epoch=0, kind="oracle")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    metrics: IoUReport
    loss: float | None
    terms: dict[str, float]
    n_samples: int

    def to_dict(self) -> dict:
        d = self.metrics.to_dict()
        d.update(val_loss=self.loss, val_terms=self.terms, n_samples=self.n_samples)
        return d


def predict(model: OccLoffModel | None, seq: SequenceData) -> np.ndarray:
    """Predicted label grid for the last frame; ``None`` model = oracle."""
    if model is None:
        return np.asarray(seq.labels[-1])
    with torch.no_grad():
        out = model.forward_sequence(seq)
    return out.logits.argmax(dim=1).numpy().reshape(model.grid.dims)


def evaluate(model: OccLoffModel | None, dataset: Dataset, names: Sequence[str],
             with_loss: bool = True) -> EvalReport:
    if model is not None and tuple(dataset.grid.dims) != tuple(model.grid.dims):
        raise ValueError(f"grid mismatch: dataset {dataset.grid.dims} vs model {model.grid.dims}")
    cm = np.zeros((N_CATEGORIES, N_CATEGORIES), dtype=np.int64)
    losses, term_sums = [], {}
    for name in names:
        seq = dataset.load(name)
        if model is None:
            pred = np.asarray(seq.labels[-1])
        else:
            with torch.no_grad():
                out = model.forward_sequence(seq)
                pred = out.logits.argmax(dim=1).numpy().reshape(model.grid.dims)
                if with_loss:
                    terms = model.loss_terms(out, seq.labels[-1], exact_proxy=True)
                    losses.append(float(L.total_loss(terms)))
                    for k, v in terms.items():
                        term_sums[k] = term_sums.get(k, 0.0) + float(v)
        cm += confusion_matrix(pred, seq.labels[-1], N_CATEGORIES)
    n = len(names)
    loss = float(np.mean(losses)) if losses else None
    return EvalReport(iou_from_confusion(cm), loss, {k: v / n for k, v in term_sums.items()}, n)


def evaluate_checkpoint(path, data_dir, split: str = "val") -> EvalReport:
    ck = load_checkpoint(path)
    ds = Dataset(data_dir)
    if tuple(ds.grid.dims) != tuple(ck.cfg.grid.dims):
        raise ValueError(f"grid mismatch: dataset {ds.grid.dims} vs checkpoint {ck.cfg.grid.dims}")
    if ck.model is not None:
        ck.model.eval()
    return evaluate(ck.model, ds, ds.names(split))


def count_fusion_work(model: OccLoffModel, seq: SequenceData) -> list[dict]:
    """Exact per-layer attention-call and sparse-conv-site counts of one forward pass."""
    with torch.no_grad():
        out = model.forward_sequence(seq)
    return [
        {"layer": i, "gsca_calls": s.gsca_calls, "ssca_calls": s.ssca_calls,
         "gsca_conv_sites": s.gsca_conv_sites, "ssca_conv_sites": s.ssca_conv_sites}
        for i, s in enumerate(out.stats)
    ]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: OccLoffModel
    history: SampleLossHistory
    records: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _ahsw_config(cfg: RunConfig) -> AHSWConfig:
    a = cfg.ahsw
    return AHSWConfig(a.warmup, a.sample_percent, a.amplification, a.decay)


def train(data_dir, cfg: RunConfig, out_dir, resume=None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train on the ``train`` split, evaluating on ``val`` after every epoch.

    Writes ``ckpt_epoch_XXX.pt`` and appends one JSON record per epoch to
    ``metrics.jsonl`` in ``out_dir``.
    """
    set_determinism(cfg.seed, cfg.train.threads)
    ds = Dataset(data_dir)
    if tuple(ds.grid.dims) != tuple(cfg.grid.dims):
        raise ValueError(f"grid mismatch: dataset {ds.grid.dims} vs config {cfg.grid.dims}")
    train_names = ds.names("train")
    val_names = ds.names("val")
    if not train_names:
        raise ValueError(f"dataset {data_dir} has no training sequences")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"

    model = build_model(cfg, ds.rig)
    opt = make_optimizer(model)
    history = SampleLossHistory()
    start = 1
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.cfg.config_hash() != cfg.config_hash():
            raise ValueError("resume checkpoint was written with a different config")
        model.load_state_dict(ck.model.state_dict())
        opt.load_state_dict(ck.optimizer_state)
        history = ck.history
        start = ck.epoch + 1
    elif metrics_path.exists():
        metrics_path.unlink()

    ahsw_cfg = _ahsw_config(cfg)
    # the proxy term is bounded below by -beta; the same shift for every sample
    # keeps recorded losses nonnegative without changing any epoch plan
    history_offset = cfg.loss.beta if cfg.ablation.proxy_loss else 0.0
    ids = list(range(len(train_names)))
    result = TrainResult(model, history)
    for epoch in range(start, cfg.train.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        if cfg.ablation.ahsw:
            plan = plan_from_history(history, ids, ahsw_cfg, epoch)
            participates, weights = plan.participates, plan.weights
        else:
            participates, weights = np.ones(len(ids), dtype=bool), np.ones(len(ids))
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(ids))
        losses = np.zeros(len(ids))
        term_sums: dict[str, float] = {}

        # samples left out this epoch: evaluated, never backpropagated
        with torch.no_grad():
            for i in order[~participates[order]]:
                total, terms, _ = sample_loss(model, ds.load(train_names[i]), _sample_rng(cfg, epoch, i))
                losses[i] = float(total)
                for k, v in terms.items():
                    term_sums[k] = term_sums.get(k, 0.0) + v

        active = [int(i) for i in order if participates[i]]
        bs = cfg.train.batch_size
        work = None
        for b in range(0, len(active), bs):
            batch = active[b:b + bs]
            opt.zero_grad(set_to_none=True)
            for i in batch:
                total, terms, out = sample_loss(model, ds.load(train_names[i]), _sample_rng(cfg, epoch, i))
                (weights[i] * total / len(batch)).backward()
                losses[i] = float(total.detach())
                for k, v in terms.items():
                    term_sums[k] = term_sums.get(k, 0.0) + v
                work = out.stats
            opt.step()
        for i in ids:
            history.record(i, losses[i] + history_offset)
        train_time = time.perf_counter() - t0

        model.eval()
        rep = evaluate(model, ds, val_names) if val_names else None
        record = {
            "epoch": epoch,
            "train_loss": float(losses.mean()),
            "train_terms": {k: v / len(ids) for k, v in term_sums.items()},
            "participants": int(participates.sum()),
            "weight_min": float(weights.min()),
            "weight_max": float(weights.max()),
            "participant_ids": [int(i) for i in np.nonzero(participates)[0]],
            "attention_calls": [{"layer": j, "gsca": s.gsca_calls, "ssca": s.ssca_calls}
                                for j, s in enumerate(work or [])],
            "train_seconds": train_time,
            "epoch_seconds": time.perf_counter() - t0,
        }
        if rep is not None:
            record.update(rep.to_dict())
        ckpt = save_checkpoint(out_dir / f"ckpt_epoch_{epoch:03d}.pt", model, cfg, ds.rig, epoch, opt, history)
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        result.records.append(record)
        result.checkpoints.append(ckpt)
        log.info("epoch %d train_loss %.4f val_loss %s miou %s", epoch, record["train_loss"],
                 record.get("val_loss"), record.get("miou"))
        if on_epoch is not None:
            on_epoch(record)
    return result


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
