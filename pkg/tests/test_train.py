from collections import OrderedDict

import numpy as np
import pytest
import torch

from src.config import NetConfig, TrainConfig
from src.errors import DataError, DuplicateSeed, NonFiniteGradient, TooFewSamples
from src.net import Params, init
from src.train import (AdamState, adam_step, ensemble_seeds, make_cv_plan, sample_batch, steps_per_epoch,
                       train_ensemble, train_model)


def scalar(value: float) -> Params:
    return Params(OrderedDict(w=torch.tensor([value], dtype=torch.float64)))


def test_adam_zero_gradient_leaves_params():
    p = scalar(1.5)
    state = AdamState.zeros(p)
    new_p, new_state = adam_step(p, scalar(0.0), state, TrainConfig())
    assert new_p.equal(p)
    assert new_state.t == 1
    assert state.t == 0


@pytest.mark.parametrize("grad", [0.3, -7.0, 1e-3])
def test_adam_first_step_is_lr_times_sign(grad):
    cfg = TrainConfig(lr=0.01)
    new_p, _ = adam_step(scalar(0.0), scalar(grad), AdamState.zeros(scalar(0.0)), cfg)
    expected = -0.01 * (1.0 if grad > 0 else -1.0)
    assert float(new_p["w"]) == pytest.approx(expected, rel=1e-4)


def test_adam_converges_on_quadratic():
    cfg = TrainConfig(lr=0.1)
    p = scalar(0.0)
    state = AdamState.zeros(p)
    for _ in range(200):
        g = scalar(2.0 * (float(p["w"]) - 3.0))
        p, state = adam_step(p, g, state, cfg)
    assert abs(float(p["w"]) - 3.0) < 0.05


def test_adam_is_invariant_to_loss_scale():
    cfg = TrainConfig(lr=0.01, eps=0.0)
    p = Params(OrderedDict(w=torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)))
    g = Params(OrderedDict(w=torch.tensor([0.2, -0.4, 1.5], dtype=torch.float64)))
    g10 = g.like([g["w"] * 10.0])
    a, _ = adam_step(p, g, AdamState.zeros(p), cfg)
    b, _ = adam_step(p, g10, AdamState.zeros(p), cfg)
    assert torch.allclose(a["w"] - p["w"], b["w"] - p["w"], rtol=1e-6, atol=0)


def test_adam_rejects_non_finite_and_mismatched_gradients():
    p = scalar(1.0)
    with pytest.raises(NonFiniteGradient):
        adam_step(p, scalar(float("nan")), AdamState.zeros(p), TrainConfig())
    other = Params(OrderedDict(v=torch.tensor([1.0], dtype=torch.float64)))
    with pytest.raises(DataError):
        adam_step(p, other, AdamState.zeros(p), TrainConfig())


def test_cv_plan_full_scale_sizes():
    ids = [f"id_{i:03d}" for i in range(60)]
    plan = make_cv_plan(ids, 11, (3, 5, 5), seed=42)
    assert len(plan.outer_holdout) == 3
    tested = []
    for fold in plan.folds:
        assert len(fold.train_ids) == 47
        assert len(fold.val_ids) == 5 and len(fold.test_ids) == 5
        assert not set(fold.train_ids) & set(fold.test_ids)
        assert not set(fold.val_ids) & set(fold.test_ids)
        assert not set(plan.outer_holdout) & (set(fold.train_ids) | set(fold.val_ids) | set(fold.test_ids))
        tested += fold.test_ids
    assert len(tested) == len(set(tested)) == 55


def test_cv_plan_is_seeded():
    ids = [f"s{i}" for i in range(20)]
    assert make_cv_plan(ids, 3, (2, 2, 3), 1).to_dict() == make_cv_plan(ids, 3, (2, 2, 3), 1).to_dict()
    assert make_cv_plan(ids, 3, (2, 2, 3), 1).to_dict() != make_cv_plan(ids, 3, (2, 2, 3), 2).to_dict()


def test_cv_plan_too_few_samples():
    with pytest.raises(TooFewSamples):
        make_cv_plan([f"s{i}" for i in range(10)], 11, (3, 5, 5), 0)


def test_held_out_ids(id_samples):
    plan = make_cv_plan([s.id for s in id_samples], 2, (1, 2, 3), 0)
    held = plan.held_out(1)
    assert len(held) == 6
    assert not set(held) & set(plan.folds[1].train_ids)


def test_sample_batch_shapes(id_samples, train_config):
    batch = sample_batch(id_samples, train_config.model_copy(update={"patch_size": [16, 16]}),
                         np.random.default_rng(0))
    assert len(batch) == 2
    assert all(p.inputs.shape == (7, 16, 16) and p.dose.shape == (16, 16) for p in batch)


def test_steps_per_epoch():
    assert steps_per_epoch(47, TrainConfig()) == 47
    assert steps_per_epoch(3, TrainConfig(batch_size=4, patches_per_patient=1)) == 1


def test_zero_epochs_returns_initial_params(id_samples, net_config, train_config):
    cfg = train_config.model_copy(update={"epochs": 0})
    params, history = train_model(id_samples[:3], cfg, net_config)
    assert params.equal(init(net_config, cfg.seed))
    assert history == []


def test_training_is_deterministic_and_records_history(id_samples, net_config, train_config):
    a, hist_a = train_model(id_samples[:4], train_config, net_config, val_samples=id_samples[4:6])
    b, hist_b = train_model(id_samples[:4], train_config, net_config, val_samples=id_samples[4:6])
    assert a.equal(b)
    assert hist_a == hist_b
    assert set(hist_a[0]) == {"epoch", "train_loss", "val_loss"}
    assert hist_a[0]["val_loss"] >= 0.0
    assert not a.equal(init(net_config, train_config.seed))


def test_train_model_requires_dose_labels(tiny_samples, net_config, train_config):
    ood = [s for s in tiny_samples if s.family == "OOD"]
    with pytest.raises(DataError):
        train_model(ood, train_config, net_config)


def test_train_model_fills_in_channels(id_samples, train_config):
    cfg = NetConfig(levels=2, base_channels=4, growth=2, convs_per_block=1)
    params, _ = train_model(id_samples[:2], train_config.model_copy(update={"epochs": 0}), cfg)
    assert params.config.in_channels == 7


def test_ensemble_members_differ(id_samples, net_config, train_config):
    members = train_ensemble(id_samples[:3], train_config, net_config, n_models=2)
    assert len(members) == 2
    assert not members[0].equal(members[1])
    assert ensemble_seeds(3, 2) == [3, 1012]


def test_parallel_ensemble_matches_serial(id_samples, net_config, train_config):
    serial = train_ensemble(id_samples[:3], train_config, net_config, n_models=2)
    parallel = train_ensemble(id_samples[:3], train_config, net_config, n_models=2, jobs=2)
    for a, b in zip(serial, parallel):
        for name in a.names():
            assert torch.allclose(a[name], b[name], atol=1e-6)


def test_single_member_ensemble(id_samples, net_config, train_config):
    cfg = train_config.model_copy(update={"epochs": 0})
    assert len(train_ensemble(id_samples[:2], cfg, net_config, n_models=1)) == 1


def test_duplicate_seeds_rejected(id_samples, net_config, train_config):
    with pytest.raises(DuplicateSeed):
        train_ensemble(id_samples[:2], train_config, net_config, n_models=2, seeds=[5, 5])
