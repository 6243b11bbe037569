import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occloff.ahsw import (
    AHSWConfig, SampleLossHistory, cumulative_loss, n_participants, plan_epoch, plan_from_history,
)


def test_cumulative_single_term():
    assert cumulative_loss([2.0], 0.5, 2) == 2.0


def test_cumulative_two_terms():
    assert cumulative_loss([1.0, 2.0], 0.5, 3) == pytest.approx(2.5)


def test_cumulative_geometric():
    assert cumulative_loss([3.0, 3.0, 3.0], 0.5, 4) == pytest.approx(1.75 * 3.0)


def test_cumulative_rejects_warmup_and_bad_length():
    with pytest.raises(ValueError):
        cumulative_loss([], 0.5, 1)
    with pytest.raises(ValueError):
        cumulative_loss([1.0], 0.5, 3)


def test_warmup_everyone_weight_one():
    plan = plan_epoch([9.0, 1.0, 4.0], AHSWConfig(warmup=3), 3)
    assert plan.participates.all() and np.all(plan.weights == 1)


def test_endpoints():
    plan = plan_epoch([5.0, 1.0, 2.0], AHSWConfig(warmup=0, amplification=5), 1)
    assert plan.weights[0] == 5 and plan.weights[1] == 1


def test_four_sample_example():
    plan = plan_epoch([4.0, 3.0, 2.0, 1.0], AHSWConfig(warmup=0, sample_percent=50, amplification=5), 5)
    assert list(plan.participates) == [True, True, False, False]
    assert plan.weights[0] == pytest.approx(5)
    assert plan.weights[1] == pytest.approx(11 / 3)


def test_ties_prefer_smaller_id():
    plan = plan_epoch([1.0, 1.0, 1.0, 1.0], AHSWConfig(warmup=0, sample_percent=50), 2, sample_ids=[7, 3, 9, 1])
    assert list(plan.participates) == [False, True, False, True]
    assert np.all(plan.weights == 1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=1, max_size=40), st.floats(1, 100),
       st.floats(1.01, 10), st.sampled_from([0.25, 0.5, 2.0, 8.0]), st.integers(-50, 50))
def test_invariants(cums, k, lam, scale, shift):
    cums = [float(c) for c in cums]
    cfg = AHSWConfig(warmup=0, sample_percent=k, amplification=lam)
    plan = plan_epoch(cums, cfg, 1)
    assert plan.n_participants == n_participants(k, len(cums))
    assert np.all(plan.weights >= 1) and np.all(plan.weights <= lam)
    # power-of-two scales and integer shifts keep the rescaling exact
    other = plan_epoch([scale * c + shift for c in cums], cfg, 1)
    assert np.array_equal(plan.participates, other.participates)
    np.testing.assert_allclose(plan.weights, other.weights, rtol=1e-12)


def test_participant_count_ceil():
    assert n_participants(70, 8) == 6  # 5.6 rounds up
    assert n_participants(70, 10) == 7


def test_history_roundtrip_and_plan():
    h = SampleLossHistory()
    for epoch_losses in ([1.0, 2.0, 3.0], [1.0, 4.0, 0.5]):
        for i, l in enumerate(epoch_losses):
            h.record(i, l)
    h2 = SampleLossHistory.from_dict(h.to_dict())
    assert h2.losses == h.losses
    plan = plan_from_history(h2, [0, 1, 2], AHSWConfig(warmup=2, sample_percent=33), 3)
    # cumulatives: 0.5*1+1=1.5, 0.5*2+4=5, 0.5*3+0.5=2
    assert list(plan.participates) == [False, True, False]


def test_history_rejects_bad_loss():
    with pytest.raises(ValueError):
        SampleLossHistory().record(0, float("inf"))
    with pytest.raises(ValueError):
        SampleLossHistory().record(0, -1.0)
