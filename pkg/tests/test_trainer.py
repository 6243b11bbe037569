import numpy as np
import pytest
import torch

from occloff import losses as L
from occloff.config import with_overrides
from occloff.fusion import n_selected
from occloff.gradcheck import single_sequence
from occloff.synthdata import Dataset
from occloff.trainer import (
    build_model, count_fusion_work, evaluate, load_checkpoint, read_metrics, sample_loss,
    save_checkpoint, train, write_oracle_checkpoint, evaluate_checkpoint,
)


def test_two_epochs_write_two_checkpoints(tiny_run):
    out, result = tiny_run
    assert len(result.checkpoints) == 2 and all(p.is_file() for p in result.checkpoints)
    records = read_metrics(out / "metrics.jsonl")
    assert [r["epoch"] for r in records] == [1, 2]
    for r in records:
        assert np.isfinite(r["train_loss"]) and 0 <= r["miou"] <= 1
        assert set(r["train_terms"]) == {"proxy", "ce", "lovasz", "scal_geo", "scal_sem", "aux"}


def test_warmup_uniform_participation(tiny_run, tiny_cfg):
    _, result = tiny_run
    for r in result.records:
        assert r["epoch"] <= tiny_cfg.ahsw.warmup
        assert r["participants"] == tiny_cfg.data.n_train
        assert r["weight_min"] == r["weight_max"] == 1.0


def test_same_seed_same_loss(tmp_path, tiny_cfg, tiny_data, tiny_run):
    cfg = with_overrides(tiny_cfg, {"train.epochs": 1})
    a = train(tiny_data, cfg, tmp_path / "a").records[-1]
    assert a["train_loss"] == pytest.approx(tiny_run[1].records[0]["train_loss"], abs=1e-6)
    assert a["val_loss"] == pytest.approx(tiny_run[1].records[0]["val_loss"], abs=1e-6)


def test_resume_reproduces_uninterrupted_run(tmp_path, tiny_cfg, tiny_data, tiny_run):
    out, full = tiny_run
    resumed = train(tiny_data, tiny_cfg, tmp_path / "r", resume=full.checkpoints[0])
    assert [r["epoch"] for r in resumed.records] == [2]
    assert resumed.records[0]["train_loss"] == pytest.approx(full.records[1]["train_loss"], abs=1e-6)


def test_proxy_flag_off_excludes_term(tiny_cfg):
    cfg = with_overrides(tiny_cfg, {"ablation.proxy_loss": False})
    seq = single_sequence(cfg, 3)
    model = build_model(cfg, cfg.rig())
    with torch.no_grad():
        total, terms, _ = sample_loss(model, seq)
    assert "proxy" not in terms
    assert float(total) == pytest.approx(sum(terms.values()), abs=1e-5)


def test_checkpoint_round_trip_bit_exact(tmp_path, tiny_run, tiny_data):
    _, result = tiny_run
    ds = Dataset(tiny_data)
    model = result.model.eval()
    before = evaluate(model, ds, ds.names("val"))
    path = save_checkpoint(tmp_path / "c.pt", model, model.cfg, model.rig, 2)
    ck = load_checkpoint(path)
    after = evaluate(ck.model.eval(), ds, ds.names("val"))
    assert before.metrics == after.metrics and before.loss == after.loss
    for k, v in result.model.state_dict().items():
        assert torch.equal(v, ck.model.state_dict()[k])


def test_oracle_checkpoint_scores_one(tmp_path, tiny_cfg, tiny_data):
    path = write_oracle_checkpoint(tmp_path / "oracle.pt", tiny_cfg, tiny_cfg.rig())
    rep = evaluate_checkpoint(path, tiny_data)
    assert rep.metrics.iou == 1.0 and rep.metrics.miou == 1.0


@pytest.mark.parametrize("overrides,expect", [
    ({}, "sparse"), ({"model.scale": "dense"}, "dense"), ({"ablation.ssca": False}, "no_ssca"),
])
def test_count_fusion_work(tiny_cfg, overrides, expect):
    cfg = with_overrides(tiny_cfg, overrides)
    model = build_model(cfg, cfg.rig())
    V = cfg.coarse_grid.n_voxels
    work = count_fusion_work(model, single_sequence(cfg, 0))
    assert len(work) == cfg.n_layers
    for w in work:
        calls = w["gsca_calls"] + w["ssca_calls"]
        if expect == "sparse":
            assert calls == 2 * n_selected(35, V)
        elif expect == "dense":
            assert calls == 2 * V
        else:
            assert w["ssca_calls"] == 0 and w["gsca_calls"] == n_selected(35, V)
        assert w["gsca_conv_sites"] == w["gsca_calls"]


def test_non_participants_contribute_no_gradient(tiny_cfg):
    cfg = with_overrides(tiny_cfg, {"train.float64": True})
    a, b = single_sequence(cfg, 1), single_sequence(cfg, 2)

    def grads(evaluate_skipped):
        model = build_model(cfg, cfg.rig())
        if evaluate_skipped:
            with torch.no_grad():
                sample_loss(model, b)
        total, _, _ = sample_loss(model, a)
        total.backward()
        return [p.grad.clone() if p.grad is not None else None for p in model.parameters()]

    for x, y in zip(grads(False), grads(True)):
        assert (x is None and y is None) or torch.equal(x, y)


def test_non_finite_loss_raises(tiny_cfg):
    cfg = with_overrides(tiny_cfg, {"train.float64": True})
    model = build_model(cfg, cfg.rig())
    with torch.no_grad():
        model.decoder.head.bias.fill_(float("nan"))
    with pytest.raises(L.NonFiniteLossError):
        sample_loss(model, single_sequence(cfg, 0))
