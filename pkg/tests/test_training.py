import dataclasses
import json

import numpy as np
import pytest
import torch

from dsrdiff.config import ModelConfig, TrainConfig, preset
from dsrdiff.diffusion import GRN
from dsrdiff.guidance import GuidanceVector
from dsrdiff.model import (CheckpointError, CheckpointManifest, DSRDiff, load_checkpoint,
                           save_checkpoint)
from dsrdiff.training import (TrainingDiverged, guidance_l1, iterate_batches, loss_com,
                              loss_for_epoch, loss_img, stage2_forward, to_batch,
                              train_stage1, train_stage2, write_history)


def test_loss_img_examples():
    x = torch.rand(2, 1, 8, 8)
    assert loss_img(x, x).item() == 0
    assert loss_img(x, x + 0.3).item() == pytest.approx(0.3, abs=1e-6)
    gen = np.random.default_rng(0)
    a, b = gen.random((2, 1, 5, 7)), gen.random((2, 1, 5, 7))
    brute = sum(abs(a.flat[i] - b.flat[i]) for i in range(a.size)) / a.size
    assert abs(loss_img(torch.from_numpy(a), torch.from_numpy(b)).item() - brute) < 1e-7
    with pytest.raises(ValueError):
        loss_img(x, x[..., :4])


def test_loss_com_examples():
    d = torch.rand(1, 1, 4, 4)
    g = GuidanceVector(torch.rand(1, 8), 2, 2)
    assert loss_com(g, g, d, d).item() == 0
    shifted = g.with_values(g.values + 0.1, 0)
    assert loss_com(g, shifted, d, d).item() == pytest.approx(0.1, abs=1e-6)
    d2 = torch.rand(1, 1, 4, 4)
    g2 = GuidanceVector(torch.rand(1, 8), 2, 2)
    expected = (g.values - g2.values).abs().mean() + (d - d2).abs().mean()
    assert torch.allclose(loss_com(g, g2, d, d2), expected)
    with pytest.raises(ValueError):
        loss_com(g, GuidanceVector(torch.rand(1, 4), 2, 1), d, d)


def test_guidance_target_receives_no_gradient():
    target = torch.rand(1, 8, requires_grad=True)
    pred = torch.rand(1, 8, requires_grad=True)
    guidance_l1(GuidanceVector(target, 2, 2), GuidanceVector(pred, 2, 2)).backward()
    assert target.grad is None
    assert pred.grad is not None and pred.grad.abs().sum() > 0


@pytest.mark.parametrize("epoch,lr", [(0, 2e-4), (79, 2e-4), (80, 1e-4), (159, 1e-4), (160, 5e-5),
                                      (240, 2.5e-5)])
def test_lr_table_full_preset(epoch, lr):
    _, cfg = preset("full")
    assert cfg.lr_at(epoch) == pytest.approx(lr, rel=1e-12)


def test_train_config_invariants():
    _, cfg = preset("full", stage=2)
    assert (cfg.epochs, cfg.batch_size, cfg.loss_switch_epoch) == (300, 1, 150)
    assert (cfg.adam_beta1, cfg.adam_beta2) == (0.9, 0.99)
    with pytest.raises(ValueError):
        TrainConfig(stage=2, epochs=100, loss_switch_epoch=100)
    with pytest.raises(ValueError):
        TrainConfig(stage=3)


def test_loss_switch_contract():
    _, cfg = preset("full", stage=2)
    assert loss_for_epoch(cfg, cfg.loss_switch_epoch - 1) == "com"
    assert loss_for_epoch(cfg, cfg.loss_switch_epoch) == "img"
    _, cfg1 = preset("full", stage=1)
    assert loss_for_epoch(cfg1, 0) == "img"


def test_data_order_seeded(toy_data):
    _, cfg = preset("toy", batch_size=1)
    order = lambda seed, epoch: [b.depth_hr.sum().item() for b in
                                 iterate_batches(list(toy_data), dataclasses.replace(cfg, seed=seed), epoch)]
    assert order(0, 0) == order(0, 0)
    assert any(order(0, e) != order(0, 0) for e in range(1, 6))


def test_stage1_determinism(toy_data, toy_configs):
    model_cfg, cfg = toy_configs
    cfg = dataclasses.replace(cfg, max_steps=15)
    a = train_stage1(toy_data, cfg, model_cfg)
    b = train_stage1(toy_data, cfg, model_cfg)
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
    c = train_stage1(toy_data, dataclasses.replace(cfg, seed=1), model_cfg)
    assert [r["loss"] for r in c.history] != [r["loss"] for r in a.history]


def test_stage_guards(toy_data, toy_configs, toy_stage1):
    model_cfg, cfg = toy_configs
    with pytest.raises(ValueError):
        train_stage1(toy_data, dataclasses.replace(cfg, stage=2), model_cfg)
    _, cfg2 = preset("toy", stage=2)
    with pytest.raises(ValueError):
        train_stage2(toy_data, cfg2, None)
    stripped = dataclasses.replace(toy_stage1, arrays={k: v for k, v in toy_stage1.arrays.items()
                                                       if not k.startswith("ggn.")})
    with pytest.raises(ValueError):
        train_stage2(toy_data, cfg2, stripped)


def test_divergence_guard(toy_data, toy_configs):
    model_cfg, cfg = toy_configs
    torch.manual_seed(0)
    model = DSRDiff(model_cfg)
    with torch.no_grad():
        model.dsrn.recon.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="non-finite loss at epoch 0, step 0"):
        train_stage1(toy_data, dataclasses.replace(cfg, max_steps=3), model_cfg, model=model)


def test_stage2_oracle_guidance_term_vanishes(toy_data):
    cfg = ModelConfig(channels=8, n_res=1, n_dfe=1, n_cfe=1, heads=2, T=1, beta_start=0.3, beta_end=0.3)
    torch.manual_seed(0)
    model = DSRDiff(cfg).double()
    b = to_batch(list(toy_data), dtype=torch.float64)
    eps = torch.randn(len(toy_data), cfg.guidance_dim, dtype=torch.float64)
    g, g0, _ = stage2_forward(model, b, eps=eps, noise_fn=lambda g_t, c, t: eps)
    assert guidance_l1(g, g0).item() < 1e-10


def test_stage2_gradient_partition(toy_data, toy_stage1):
    _, cfg2 = preset("toy", stage=2, max_steps=1)
    ck = train_stage2(toy_data, cfg2, toy_stage1)
    ggn = [k for k in ck.arrays if k.startswith("ggn.")]
    assert ggn and all(np.array_equal(ck.arrays[k], toy_stage1.arrays[k]) for k in ggn)
    dsrn = [k for k in ck.arrays if k.startswith("dsrn.") and k.endswith("weight")]
    assert any(not np.array_equal(ck.arrays[k], toy_stage1.arrays[k]) for k in dsrn)
    c = toy_stage1.build_model().cfg
    torch.manual_seed(cfg2.seed + 1)
    fresh = {f"grn.{k}": v.numpy() for k, v in
             GRN(c.channels, c.scale, c.K, c.T, c.n_res, c.hidden, c.compress).state_dict().items()}
    for prefix in ("grn.encoder.", "grn.denoiser."):
        keys = [k for k in fresh if k.startswith(prefix) and k.endswith("weight")]
        assert any(not np.array_equal(ck.arrays[k], fresh[k]) for k in keys), prefix


def test_stage1_loss_trend(toy_stage1):
    losses = np.array([r["loss"] for r in toy_stage1.history[:400]])
    assert len(losses) == 400
    windows = losses.reshape(4, 100).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows


def test_history_csv(tmp_path, toy_stage1):
    path = tmp_path / "h.csv"
    write_history(path, toy_stage1.history[:3])
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,step,loss,loss_guidance_term,lr,wall_time_s"
    assert len(lines) == 4


def test_checkpoint_round_trip(tmp_path, toy_data, toy_stage1):
    path = save_checkpoint(toy_stage1, tmp_path / "ck.npz")
    back = load_checkpoint(path)
    assert set(back.arrays) == set(toy_stage1.arrays)
    assert all(np.array_equal(back.arrays[k], toy_stage1.arrays[k]) for k in back.arrays)
    assert back.model_cfg == toy_stage1.model_cfg and back.history == toy_stage1.history
    np.testing.assert_allclose(back.schedule["beta"], [0.1, 0.396667, 0.693333, 0.99], atol=5e-7)
    b = to_batch(list(toy_data))
    m1, m2 = toy_stage1.build_model(), back.build_model()
    out1 = m1.predict(b.depth_lr, b.color_hr, b.depth_hr, source="ggn")
    out2 = m2.predict(b.depth_lr, b.color_hr, b.depth_hr, source="ggn")
    assert torch.equal(out1, out2)


def test_checkpoint_errors(tmp_path, toy_stage1):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.npz")
    missing = dict(toy_stage1.arrays)
    missing.pop("dsrn.recon.weight")
    with pytest.raises(CheckpointError, match="dsrn.recon.weight"):
        dataclasses.replace(toy_stage1, arrays=missing).build_model()
    # manifest lists an array the container lacks
    meta = toy_stage1.meta()
    with open(tmp_path / "short.npz", "wb") as fh:
        np.savez(fh, __manifest__=np.frombuffer(json.dumps(meta).encode(), np.uint8), **missing)
    with pytest.raises(CheckpointError, match="dsrn.recon.weight"):
        load_checkpoint(tmp_path / "short.npz")
    meta["version"] = 99
    with open(tmp_path / "v99.npz", "wb") as fh:
        np.savez(fh, __manifest__=np.frombuffer(json.dumps(meta).encode(), np.uint8))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "v99.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path / "junk.npz")
    bad = dict(toy_stage1.arrays)
    bad["dsrn.recon.bias"] = np.zeros(3, np.float32)
    with pytest.raises(CheckpointError, match="shape"):
        dataclasses.replace(toy_stage1, arrays=bad).build_model()


def test_manifest_from_untrained_model():
    torch.manual_seed(0)
    m = DSRDiff(ModelConfig(channels=8, n_res=1, n_dfe=1, n_cfe=1, heads=2))
    ck = CheckpointManifest.from_model(m, None, 0, 1)
    assert ck.train_cfg == {} and ck.schedule["T"] == 4
    rebuilt = ck.build_model()
    for k, v in m.state_dict().items():
        assert torch.equal(v, rebuilt.state_dict()[k])
