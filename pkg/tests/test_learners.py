import numpy as np
import pytest
import torch

from fpkit import autodiff as ad
from fpkit.dataset import simulate_samples
from fpkit.errors import ConfigError, DatasetError
from fpkit.forward import MeasurementStack
from fpkit.learners import (
    CdipConfig,
    Checkpoint,
    TrainConfig,
    first_iteration_below,
    infer_cgan,
    measurement_loss,
    measurement_prediction,
    _inputs,
    _targets,
    optimize_cdip,
    train_cgan,
    train_forward_only,
)
from fpkit.metrics import psnr
from fpkit.models import GeneratorConfig, generator_forward

N, M, OVERLAP = 32, 8, 0.40


@pytest.fixture(scope="module")
def toy():
    return simulate_samples(10, N, M, OVERLAP, seed=3, prefix="toy")


def gen_cfg(samples, head):
    L = samples[0].stack.geometry.count
    return GeneratorConfig(input_channels=L, image_size=N, base_channels=8, depth=3, head=head)


@pytest.fixture(scope="module")
def desk():
    return simulate_samples(10, 64, 16, 0.0, seed=3, prefix="desk")


def desk_cfg(samples):
    return GeneratorConfig(input_channels=samples[0].stack.geometry.count, image_size=64, head="relu")


@pytest.fixture(scope="module")
def supervised(desk):
    cfg = TrainConfig(epochs=1, w_adv=0.0, lr_g=5e-3, seed=0, dtype="float32")
    return train_cgan(desk, desk_cfg(desk), train_cfg=cfg)


@pytest.fixture(scope="module")
def small_ckpt(toy):
    cfg = TrainConfig(epochs=1, w_adv=0.0, lr_g=2e-3, seed=0)
    return train_cgan(toy, gen_cfg(toy, "relu"), train_cfg=cfg)


def constant_baseline(samples):
    """MSE of predicting the dataset-mean images for every sample."""
    amps = np.stack([s.amplitude for s in samples])
    phs = np.stack([s.phase / (2 * np.pi) for s in samples])
    return float(((amps - amps.mean(0)) ** 2).mean() + ((phs - phs.mean(0)) ** 2).mean())


def test_supervised_beats_constant_predictor(desk, supervised):
    X = _inputs([s.stack for s in desk], 64, torch.float32)
    Y = _targets(desk, torch.float32)
    with torch.no_grad():
        out = generator_forward(supervised.params, X, supervised.gen_cfg)
    rec = ((out[:, 0] - Y[:, 0]) ** 2).mean() + ((out[:, 1] - Y[:, 1]) ** 2).mean()
    assert rec.item() < constant_baseline(desk)


def test_supervised_amplitude_beats_mean_image(desk):
    cfg = TrainConfig(epochs=15, w_adv=0.0, lr_g=5e-3, seed=0, dtype="float32")
    ckpt = train_cgan(desk, desk_cfg(desk), train_cfg=cfg)
    mean_amp = np.mean([s.amplitude for s in desk], axis=0)
    s = desk[0]
    rec = infer_cgan(ckpt, s.stack)
    assert psnr(rec.amplitude, s.amplitude) > psnr(mean_amp, s.amplitude)


def test_cgan_trace_deterministic(toy, tmp_path):
    sub = toy[:3]
    runs = []
    for k in range(2):
        cfg = TrainConfig(epochs=2, seed=4, out_dir=str(tmp_path / f"r{k}"))
        runs.append(train_cgan(sub, gen_cfg(sub, "relu"), train_cfg=cfg))
    assert [r["loss_g"] for r in runs[0].trace] == [r["loss_g"] for r in runs[1].trace]
    assert (tmp_path / "r0" / "trace.csv").read_bytes() == (tmp_path / "r1" / "trace.csv").read_bytes()
    assert runs[0].id == runs[1].id
    header = (tmp_path / "r0" / "trace.csv").read_text().splitlines()[0].split(",")
    assert {"loss_rec", "loss_adv", "loss_d"} <= set(header)


def test_cgan_errors(toy):
    with pytest.raises(DatasetError):
        train_cgan([], gen_cfg(toy, "relu"))
    with pytest.raises(ConfigError):
        train_cgan(toy, gen_cfg(toy, "sigmoid"))


def test_infer_ranges_and_determinism(toy, small_ckpt):
    a = infer_cgan(small_ckpt, toy[1].stack)
    b = infer_cgan(small_ckpt, toy[1].stack)
    assert np.array_equal(a.amplitude, b.amplitude) and np.array_equal(a.phase, b.phase)
    assert a.amplitude.min() >= 0 and a.amplitude.max() <= 1
    assert a.phase.min() >= 0 and a.phase.max() <= 2 * np.pi
    assert a.diagnostics["checkpoint_id"] == small_ckpt.id


def test_infer_geometry_mismatch(small_ckpt):
    other = simulate_samples(1, N, M, 0.0, seed=1)[0]
    with pytest.raises(ConfigError):
        infer_cgan(small_ckpt, other.stack)


def test_checkpoint_roundtrip(small_ckpt, tmp_path):
    small_ckpt.save(tmp_path)
    back = Checkpoint.load(tmp_path)
    assert back.id == small_ckpt.id
    for k, v in small_ckpt.params.items():
        assert torch.equal(back.params[k], v)
    assert back.gen_cfg == small_ckpt.gen_cfg


def test_exact_fit_zero_losses(toy):
    s = toy[0]
    truth = torch.tensor(np.stack([s.amplitude, s.phase / (2 * np.pi)]))[None]
    pred = measurement_prediction(truth[:, 0], truth[:, 1], s.stack.geometry,
                                  torch.tensor([s.stack.scale], dtype=torch.float64))
    target = torch.tensor(s.stack.images / s.stack.scale)[None]
    assert ad.mse_loss(pred, target).item() < 1e-28
    assert ad.mse_loss(truth, truth.clone()).item() == 0.0


def test_cdip_best_iterate_and_reduction(toy):
    s = toy[2]
    rec = optimize_cdip(s.stack, gen_cfg(toy, "sigmoid"), CdipConfig(iterations=60, seed=1))
    d = rec.diagnostics
    assert d["best_loss"] <= d["initial_loss"]
    assert d["best_loss"] == min(rec.residual_trace)
    assert d["best_loss"] < 0.5 * d["initial_loss"]
    assert rec.method == "cdip"
    assert rec.amplitude.shape == (N, N)
    assert 0 <= rec.amplitude.min() and rec.amplitude.max() <= 1


def test_cdip_noise_input_is_dip(toy):
    rec = optimize_cdip(toy[0].stack, gen_cfg(toy, "sigmoid"),
                        CdipConfig(iterations=3, input_mode="noise"))
    assert rec.method == "dip"


def test_cdip_early_stop():
    s = simulate_samples(1, N, M, OVERLAP, seed=5)[0]
    cfg = CdipConfig(iterations=500, lr=0.0, patience=10)
    rec = optimize_cdip(s.stack, gen_cfg([s], "sigmoid"), cfg)
    assert rec.iterations_run == 11


def test_cdip_errors(toy):
    s = toy[0]
    with pytest.raises(ConfigError):
        optimize_cdip(s.stack, gen_cfg(toy, "relu"), CdipConfig(iterations=1))
    with pytest.raises(ConfigError):
        optimize_cdip(s.stack, gen_cfg(toy, "sigmoid"), CdipConfig(iterations=1, init_mode="checkpoint"))
    with pytest.raises(ConfigError):
        CdipConfig(iterations=0)
    zero = MeasurementStack(s.stack.geometry, np.zeros_like(s.stack.images), 0.0)
    with pytest.raises(DatasetError):
        optimize_cdip(zero, gen_cfg(toy, "sigmoid"), CdipConfig(iterations=1))


def test_warm_start_transfers_all_weights(small_ckpt, toy):
    cfg = gen_cfg(toy, "sigmoid")
    rec = optimize_cdip(toy[0].stack, cfg, CdipConfig(iterations=1, init_mode="checkpoint"),
                        checkpoint=small_ckpt)
    assert rec.diagnostics["checkpoint_id"] == small_ckpt.id
    # iteration-0 output is the relu network's pre-activation through a sigmoid
    x = _inputs([toy[0].stack], N, torch.float64)
    out = generator_forward(small_ckpt.params, x, cfg)[0].numpy()
    assert np.allclose(rec.amplitude, out[0])


def test_forward_only_matches_cdip_on_one_sample():
    s = simulate_samples(1, N, M, OVERLAP, seed=8)
    cfg_g = gen_cfg(s, "sigmoid")
    iters = 150
    ckpt = train_forward_only(s, cfg_g, TrainConfig(epochs=iters, lr_g=1e-3, beta1=0.9, seed=2))
    fo = measurement_loss(ckpt, s[0].stack)
    cd = optimize_cdip(s[0].stack, cfg_g, CdipConfig(iterations=iters, seed=2)).diagnostics["best_loss"]
    assert fo >= 0 and all(r["loss_meas"] >= 0 for r in ckpt.trace)
    assert 0.5 <= fo / cd <= 2.0


def test_forward_only_deterministic(toy):
    sub = toy[:2]
    cfg = TrainConfig(epochs=2, lr_g=1e-3, beta1=0.9, seed=1)
    a = train_forward_only(sub, gen_cfg(sub, "sigmoid"), cfg)
    b = train_forward_only(sub, gen_cfg(sub, "sigmoid"), cfg)
    assert [r["loss_meas"] for r in a.trace] == [r["loss_meas"] for r in b.trace]
    with pytest.raises(DatasetError):
        train_forward_only([], gen_cfg(sub, "sigmoid"))


def test_first_iteration_below():
    assert first_iteration_below([5, 4, 3, 2], 3) == 2
    assert first_iteration_below([5, 4], 1) is None
