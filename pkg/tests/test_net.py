import json

import numpy as np
import pytest
import torch

from src.config import NetConfig
from src.errors import DataError, ShapeMismatch
from src.grid import Patch, extract_patch
from src.net import (FORWARD_PASSES, dropout, forward, he_std, init, layout, load_params, loss_and_grad,
                     save_params)

from conftest import make_box_sample


def small_config(**overrides) -> NetConfig:
    fields = {"levels": 2, "base_channels": 4, "growth": 2, "convs_per_block": 2, "in_channels": 6}
    fields.update(overrides)
    return NetConfig(**fields)


def box_patch():
    s = make_box_sample()
    return extract_patch(s, (4, 4), (8, 8))


def test_he_std():
    assert he_std(8) == pytest.approx(0.5)


def test_init_is_deterministic_and_seeded():
    a, b, c = init(small_config(), 1), init(small_config(), 1), init(small_config(), 2)
    assert a.equal(b)
    assert not a.equal(c)
    assert all(torch.count_nonzero(a[n]) == 0 for n in a.names() if n.endswith(".bias"))


def test_layout_has_both_decoders_and_shared_encoder():
    names = list(layout(small_config()))
    assert names[0] == "encoder.stem.weight"
    assert any(n.startswith("dose_decoder.") for n in names)
    assert any(n.startswith("ct_decoder.") for n in names)
    single = list(layout(small_config(recon_branch=False)))
    assert not any(n.startswith("ct_decoder.") for n in single)
    assert [n for n in names if not n.startswith("ct_decoder.")] == single


def test_forward_shapes_and_determinism():
    p = init(small_config(), 0)
    patch = box_patch()
    a = forward(p, patch, mode="eval")
    b = forward(p, patch, mode="eval")
    assert tuple(a.dose_hat.shape) == (1, 1, 8, 8)
    assert tuple(a.ct_hat.shape) == (1, 1, 8, 8)
    assert torch.equal(a.dose_hat, b.dose_hat)


def test_forward_without_recon_branch_has_no_ct_head():
    out = forward(init(small_config(recon_branch=False), 0), box_patch())
    assert out.ct_hat is None


def test_mc_dropout_with_zero_probability_equals_eval():
    p = init(small_config(), 0)
    patch = box_patch()
    eval_out = forward(p, patch, mode="eval")
    mc_out = forward(p, patch, mode="mc_dropout", rng_seed=9, dropout_p=0.0)
    assert torch.equal(eval_out.dose_hat, mc_out.dose_hat)


def test_mc_dropout_depends_on_seed():
    p = init(small_config(), 0)
    patch = box_patch()
    a = forward(p, patch, mode="mc_dropout", rng_seed=1, dropout_p=0.3)
    b = forward(p, patch, mode="mc_dropout", rng_seed=1, dropout_p=0.3)
    c = forward(p, patch, mode="mc_dropout", rng_seed=2, dropout_p=0.3)
    assert torch.equal(a.dose_hat, b.dose_hat)
    assert not torch.equal(a.dose_hat, c.dose_hat)


def test_forward_rejects_wrong_channels_and_bad_mode():
    p = init(small_config(in_channels=5), 0)
    with pytest.raises(ShapeMismatch):
        forward(p, box_patch())
    with pytest.raises(ValueError):
        forward(init(small_config(), 0), box_patch(), mode="sample")


def test_forward_counts_passes():
    p = init(small_config(), 0)
    FORWARD_PASSES.reset()
    forward(p, box_patch())
    forward(p, box_patch(), mode="mc_dropout", dropout_p=0.1)
    assert FORWARD_PASSES.count == 2


def test_dropout_keeps_mean():
    t = torch.ones(200_000, dtype=torch.float64)
    out = dropout(t, 0.3, torch.Generator().manual_seed(0))
    assert float(out.mean()) == pytest.approx(1.0, abs=0.01)
    values = torch.unique(out).tolist()
    assert len(values) == 2 and values[0] == 0.0 and values[1] == pytest.approx(1.0 / 0.7)
    assert dropout(t, 0.0, torch.Generator()) is t


def random_patch(rng, channels=6, size=(8, 8)) -> Patch:
    return Patch(origin=(0, 0), size=size, inputs=rng.normal(size=(channels,) + size).astype(np.float32),
                 body=np.ones(size, dtype=np.uint8), dose=rng.random(size).astype(np.float32))


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = init(small_config(), seed)
    # nonzero biases keep ReLU inputs off their kink
    for name in p.names():
        if name.endswith(".bias"):
            p.tensors[name] = torch.from_numpy(rng.normal(0.0, 0.1, p[name].shape).astype(np.float32))
    batch = [random_patch(rng)]
    _, grads = loss_and_grad(p, batch)
    wide = p.to(torch.float64)
    h = 1e-6
    for name in p.names():
        flat = wide[name].view(-1)
        for index in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
            original = float(flat[index])
            flat[index] = original + h
            plus, _ = loss_and_grad(wide, batch)
            flat[index] = original - h
            minus, _ = loss_and_grad(wide, batch)
            flat[index] = original
            numeric = (plus - minus) / (2 * h)
            analytic = float(grads[name].view(-1)[index])
            assert analytic == pytest.approx(numeric, rel=1e-3, abs=1e-6), name


def test_gradient_check_reaches_every_tensor():
    names = init(small_config(), 0).names()
    assert {"encoder.block0.conv1.weight", "encoder.down1.weight", "dose_decoder.up0.weight",
            "ct_decoder.block0.conv0.bias"} <= set(names)
    assert len(names) == 28


def test_he_init_spread_matches_fan_in():
    cfg = NetConfig(levels=2, base_channels=16, growth=16, convs_per_block=1, in_channels=7)
    weight = init(cfg, 4)["encoder.block0.conv0.weight"]
    assert tuple(weight.shape) == (16, 16, 3, 3)
    assert float(weight.std()) == pytest.approx(he_std(16 * 3 * 3), rel=0.1)


@pytest.mark.parametrize("size", [(8, 8), (16, 16), (16, 8), (24, 32)])
def test_both_heads_keep_the_input_shape(size):
    out = forward(init(small_config(), 0), np.random.default_rng(0).normal(size=(6,) + size))
    assert tuple(out.dose_hat.shape[2:]) == size
    assert tuple(out.ct_hat.shape[2:]) == size

def test_loss_without_recon_branch_is_dose_mse_only():
    cfg = small_config(recon_branch=False)
    p = init(cfg, 0)
    patch = box_patch()
    loss, grads = loss_and_grad(p, [patch])
    out = forward(p, patch)
    expected = float(torch.mean((out.dose_hat[0, 0] - torch.as_tensor(patch.dose)) ** 2))
    assert loss == pytest.approx(expected, rel=1e-5)
    assert grads.names() == p.names()


def test_perfect_heads_give_zero_loss_and_zero_head_gradients():
    p = init(small_config(), 0)
    patch = box_patch()
    # zero heads predict 0 everywhere; with zero targets the data term is stationary
    for name in p.names():
        if ".head." in name:
            p.tensors[name].zero_()
    patch.dose = np.zeros_like(patch.dose)
    patch.inputs = np.concatenate([np.zeros_like(patch.inputs[:1]), patch.inputs[1:]])
    loss, grads = loss_and_grad(p, [patch])
    assert loss == 0.0
    for name in grads.names():
        if ".head." in name:
            assert torch.count_nonzero(grads[name]) == 0


def test_loss_and_grad_needs_dose_labels():
    patch = extract_patch(make_box_sample(with_dose=False), (4, 4), (8, 8))
    with pytest.raises(DataError):
        loss_and_grad(init(small_config(), 0), [patch])


def test_save_and_load_params(tmp_path):
    p = init(small_config(), 3)
    save_params(p, tmp_path / "model")
    back = load_params(tmp_path / "model")
    assert back.equal(p)
    assert back.config == p.config


def test_load_params_detects_shape_tampering(tmp_path):
    p = init(small_config(), 3)
    save_params(p, tmp_path / "model")
    manifest = tmp_path / "model" / "manifest.json"
    doc = json.loads(manifest.read_text())
    doc["shapes"]["encoder.stem.bias"] = [5]
    manifest.write_text(json.dumps(doc))
    with pytest.raises(DataError):
        load_params(tmp_path / "model")
