"""Training and test-time optimization of the shared U-Net generator.

* :func:`train_cgan` fits the generator to ground-truth amplitude/phase with an
  L2 term plus a conditional adversarial term (low-overlap regime).
* :func:`optimize_cdip` fits the weights to one measurement stack through the
  differentiable forward model, feeding the measurements (or noise, for the
  plain DIP baseline) as the fixed input (high-overlap regime).
* :func:`train_forward_only` fits one generator to a whole dataset with the
  forward-model loss only, the counterpart of per-sample optimization.
"""

from dataclasses import dataclass, asdict, field, replace
import csv
import hashlib
import logging
import math
from pathlib import Path
import time

import numpy as np
import torch

from . import autodiff as ad
from . import io
from .dataset import preprocess_stack
from .errors import ConfigError, DatasetError, DivergenceError
from .models import (
    DiscriminatorConfig,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generator_forward,
    parameter_shapes,
    split_output,
)
from .solvers import Reconstruction

log = logging.getLogger(__name__)

TWO_PI = 2 * np.pi


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    w_rec: float = 100.0
    w_adv: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    out_dir: str = None
    dtype: str = "float64"

    def __post_init__(self):
        if self.w_rec < 0 or self.w_adv < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class CdipConfig:
    iterations: int = 2000
    lr: float = 1e-3
    init_mode: str = "random"
    input_mode: str = "measurements"
    patience: int = 200
    min_rel_improvement: float = 1e-5
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.init_mode not in ("random", "checkpoint"):
            raise ConfigError(f"unknown init_mode {self.init_mode!r}")
        if self.input_mode not in ("measurements", "noise"):
            raise ConfigError(f"unknown input_mode {self.input_mode!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class Checkpoint:
    params: dict
    gen_cfg: GeneratorConfig
    geometry: dict
    mode: str
    trace: list = field(default_factory=list)
    train_cfg: dict = field(default_factory=dict)

    @property
    def id(self):
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().astype("<f8").tobytes())
        return h.hexdigest()[:16]

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        ad.save_params(self.params, directory / "params.bin")
        io.write_json(directory / "config.json", {
            "generator": self.gen_cfg.to_dict(),
            "geometry": self.geometry,
            "mode": self.mode,
            "train": self.train_cfg,
            "checkpoint_id": self.id,
        })

    @classmethod
    def load(cls, directory, dtype="float64"):
        directory = Path(directory)
        meta = io.read_json(directory / "config.json")
        try:
            gen_cfg = GeneratorConfig(**meta["generator"])
        except TypeError as exc:
            raise ConfigError(f"{directory}: bad generator config ({exc})") from None
        expected = parameter_shapes(build_generator(gen_cfg, check=False))
        params = ad.load_params(directory / "params.bin", expected, ad.resolve_dtype(dtype))
        return cls(params, gen_cfg, meta["geometry"], meta.get("mode", ""), [], meta.get("train", {}))


# -- tensors from samples -----------------------------------------------------

def _inputs(stacks, N, dtype):
    return torch.tensor(np.stack([preprocess_stack(s, N) for s in stacks]), dtype=dtype)


def _targets(samples, dtype):
    y = np.stack([np.stack([s.amplitude, s.phase / TWO_PI]) for s in samples])
    return torch.tensor(y, dtype=dtype)


def _normalized_measurements(stacks, dtype):
    scales = np.array([s.scale for s in stacks], dtype=np.float64)
    if np.any(scales <= 0):
        raise DatasetError("measurement stack with zero scale (all-zero intensities)")
    imgs = np.stack([s.images / s.scale for s in stacks])
    return torch.tensor(imgs, dtype=dtype), torch.tensor(scales, dtype=dtype)


def _leaves(params):
    return {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}


def _snapshot(params):
    return {k: v.detach().clone() for k, v in params.items()}


def _check_finite(value, what, trace, checkpoint=None):
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {what}", trace, checkpoint)


def measurement_prediction(amp, phase_scaled, geom, scales):
    """Predicted intensities normalized by each stack's own scale, (B, L, m, m)."""
    pred = ad.measurement_head(amp, phase_scaled, geom)
    return pred / scales.view(-1, 1, 1, 1)


def _check_geometry(samples):
    if not samples:
        raise DatasetError("empty dataset")
    geom = samples[0].stack.geometry
    for s in samples:
        if s.stack.geometry.to_dict() != geom.to_dict():
            raise DatasetError(f"sample {s.id} uses a different acquisition geometry")
    return geom


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _write_trace(out_dir, rows, name="trace.csv"):
    if not out_dir or not rows:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    det = [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
    with open(out / name, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(det[0]))
        w.writeheader()
        for r in det:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "wall_time"])
        for r in rows:
            w.writerow([r["iteration"], f"{r['wall_time']:.6f}"])


# -- cGAN-FP ------------------------------------------------------------------

def train_cgan(samples, gen_cfg, disc_cfg=None, train_cfg=None, val_samples=None):
    """Supervised conditional-adversarial training of the ReLU-headed generator.

    Each step first updates the discriminator on (condition, truth) vs
    (condition, generated) pairs, then the generator on
    ``w_rec * (MSE_amp + MSE_phase) + w_adv * BCE(D(condition, generated), real)``.
    The checkpoint with the best validation reconstruction loss (training
    loss when no validation set is given) is returned.
    """
    train_cfg = train_cfg or TrainConfig()
    if gen_cfg.head != "relu":
        raise ConfigError("cGAN-FP training uses the relu head")
    geom = _check_geometry(samples)
    dtype = ad.resolve_dtype(train_cfg.dtype)
    N = gen_cfg.image_size
    if geom.count != gen_cfg.input_channels or geom.high_res != N:
        raise ConfigError(
            f"generator expects {gen_cfg.input_channels} x {N}^2 inputs but data has "
            f"{geom.count} x {geom.high_res}^2"
        )
    use_adv = train_cfg.w_adv > 0
    if disc_cfg is None:
        disc_cfg = DiscriminatorConfig(input_channels=geom.count + 2, image_size=N)
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    X = _inputs([s.stack for s in samples], N, dtype)
    Y = _targets(samples, dtype)
    if val_samples:
        Xv = _inputs([s.stack for s in val_samples], N, dtype)
        Yv = _targets(val_samples, dtype)
    g = _leaves(build_generator(gen_cfg, train_cfg.seed, dtype))
    g_state = ad.AdamState(train_cfg.lr_g, train_cfg.beta1, train_cfg.beta2)
    if use_adv:
        d = _leaves(build_discriminator(disc_cfg, train_cfg.seed, dtype))
        d_state = ad.AdamState(train_cfg.lr_d, train_cfg.beta1, train_cfg.beta2)

    def make_ckpt(params, trace):
        return Checkpoint(_snapshot(params), gen_cfg, geom.to_dict(), "cgan", trace,
                          train_cfg.to_dict())

    rows, best, best_params = [], math.inf, _snapshot(g)
    t0 = time.perf_counter()
    it = 0
    for epoch in range(train_cfg.epochs):
        epoch_rec = []
        for idx in _batches(len(samples), train_cfg.batch_size, rng):
            x, y = X[idx], Y[idx]
            fake = generator_forward(g, x, gen_cfg)
            loss_d = torch.zeros(())
            if use_adv:
                real_logits = discriminator_forward(d, x, y, disc_cfg)
                fake_logits = discriminator_forward(d, x, fake.detach(), disc_cfg)
                loss_d = 0.5 * (ad.bce_with_logits_loss(real_logits, 1.0)
                                + ad.bce_with_logits_loss(fake_logits, 0.0))
                _check_finite(loss_d.item(), "discriminator loss", rows, make_ckpt(best_params, rows))
                ad.adam_step(d.values(), ad.backward(loss_d, d.values()), d_state)
            rec = ad.mse_loss(fake[:, 0], y[:, 0]) + ad.mse_loss(fake[:, 1], y[:, 1])
            loss_g = train_cfg.w_rec * rec
            adv = torch.zeros(())
            if use_adv:
                adv = ad.bce_with_logits_loss(discriminator_forward(d, x, fake, disc_cfg), 1.0)
                loss_g = loss_g + train_cfg.w_adv * adv
            _check_finite(loss_g.item(), "generator loss", rows, make_ckpt(best_params, rows))
            ad.adam_step(g.values(), ad.backward(loss_g, g.values()), g_state)
            it += 1
            epoch_rec.append(rec.item())
            rows.append({"iteration": it, "epoch": epoch, "loss_g": loss_g.item(),
                         "loss_rec": rec.item(), "loss_adv": adv.item(),
                         "loss_d": loss_d.item(), "wall_time": time.perf_counter() - t0})
        if val_samples:
            with torch.no_grad():
                out = generator_forward(g, Xv, gen_cfg)
                score = (ad.mse_loss(out[:, 0], Yv[:, 0]) + ad.mse_loss(out[:, 1], Yv[:, 1])).item()
        else:
            score = float(np.mean(epoch_rec))
        log.info("cgan epoch %d: rec %.5f score %.5f", epoch, np.mean(epoch_rec), score)
        if score < best:
            best, best_params = score, _snapshot(g)
        if train_cfg.out_dir and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
            make_ckpt(g, rows).save(Path(train_cfg.out_dir) / f"epoch{epoch + 1:04d}")
    ckpt = make_ckpt(best_params if train_cfg.epochs else g, rows)
    if train_cfg.out_dir:
        ckpt.save(Path(train_cfg.out_dir) / "best")
        _write_trace(train_cfg.out_dir, rows)
    return ckpt


def infer_cgan(checkpoint, stack, dtype="float64"):
    geom = stack.geometry
    cfg = checkpoint.gen_cfg
    if geom.count != cfg.input_channels or geom.high_res != cfg.image_size:
        raise ConfigError(
            f"checkpoint expects {cfg.input_channels} images at N={cfg.image_size}, "
            f"stack has {geom.count} at N={geom.high_res}"
        )
    dtype = ad.resolve_dtype(dtype)
    t0 = time.perf_counter()
    params = {k: v.to(dtype) for k, v in checkpoint.params.items()}
    with torch.no_grad():
        out = generator_forward(params, _inputs([stack], cfg.image_size, dtype), cfg)
    out = out[0].double().numpy()
    amp = np.clip(out[0], 0.0, 1.0)
    phase = TWO_PI * np.clip(out[1], 0.0, 1.0)
    return Reconstruction(amp, phase, [], 1, time.perf_counter() - t0, "cgan",
                          diagnostics={"checkpoint_id": checkpoint.id})


# -- cDIP ---------------------------------------------------------------------

def warm_start_params(checkpoint, gen_cfg, dtype):
    """Checkpoint weights for a sigmoid-headed generator; all tensors transfer."""
    if parameter_shapes(checkpoint.params) != parameter_shapes(build_generator(gen_cfg, check=False)):
        raise ConfigError("checkpoint parameters do not match the generator configuration")
    return {k: v.detach().clone().to(dtype) for k, v in checkpoint.params.items()}


def optimize_cdip(stack, gen_cfg, cdip_cfg=None, checkpoint=None):
    """Fit the generator weights to one measurement stack.

    The input is the preprocessed stack (or fixed seeded noise in [0, 0.1]
    for the DIP baseline) and stays fixed; only the weights move. The loss is
    the MSE between predicted and measured intensities, both divided by the
    stack's peak intensity. Returns the lowest-loss iterate.
    """
    cdip_cfg = cdip_cfg or CdipConfig()
    geom = stack.geometry
    if gen_cfg.head != "sigmoid":
        raise ConfigError("cDIP optimization uses the sigmoid head")
    if stack.scale <= 0:
        raise DatasetError("cannot fit an all-zero measurement stack")
    if geom.count != gen_cfg.input_channels or geom.high_res != gen_cfg.image_size:
        raise ConfigError("generator configuration does not match the stack geometry")
    dtype = ad.resolve_dtype(cdip_cfg.dtype)
    N = gen_cfg.image_size
    torch.manual_seed(cdip_cfg.seed)
    if cdip_cfg.input_mode == "measurements":
        x0 = _inputs([stack], N, dtype)
    else:
        gen = torch.Generator().manual_seed(cdip_cfg.seed + 1)
        x0 = (0.1 * torch.rand((1, geom.count, N, N), generator=gen, dtype=torch.float64)).to(dtype)
    if cdip_cfg.init_mode == "checkpoint":
        if checkpoint is None:
            raise ConfigError("init_mode=checkpoint needs a checkpoint")
        params = _leaves(warm_start_params(checkpoint, gen_cfg, dtype))
    else:
        params = _leaves(build_generator(gen_cfg, cdip_cfg.seed, dtype))
    target, scales = _normalized_measurements([stack], dtype)
    state = ad.AdamState(cdip_cfg.lr)

    t0 = time.perf_counter()
    trace = []
    best, best_it, best_out = math.inf, 0, None
    plateau_ref, plateau_it = math.inf, 0
    it = 0
    for it in range(cdip_cfg.iterations):
        out = generator_forward(params, x0, gen_cfg)
        amp, ph = split_output(out)
        loss = ad.mse_loss(measurement_prediction(amp, ph, geom, scales), target)
        value = loss.item()
        trace.append(value)
        _check_finite(value, "cDIP loss", trace)
        if value < best:
            best, best_it, best_out = value, it, out.detach()[0].double().numpy().copy()
        if value < plateau_ref * (1 - cdip_cfg.min_rel_improvement):
            plateau_ref, plateau_it = value, it
        elif it - plateau_it >= cdip_cfg.patience:
            break
        ad.adam_step(params.values(), ad.backward(loss, params.values()), state)
    return Reconstruction(
        amplitude=best_out[0],
        phase=TWO_PI * best_out[1],
        residual_trace=trace,
        iterations_run=it + 1,
        wall_time=time.perf_counter() - t0,
        method="cdip" if cdip_cfg.input_mode == "measurements" else "dip",
        diagnostics={
            "initial_loss": trace[0],
            "best_loss": best,
            "best_iteration": best_it,
            "config": cdip_cfg.to_dict(),
            "checkpoint_id": checkpoint.id if checkpoint is not None else None,
        },
    )


def first_iteration_below(trace, level):
    """Index of the first loss value <= ``level``, or None."""
    for i, v in enumerate(trace):
        if v <= level:
            return i
    return None


# -- forward-loss-only training -----------------------------------------------

def train_forward_only(samples, gen_cfg, train_cfg=None):
    """Fit one generator to every sample using only the measurement loss."""
    train_cfg = train_cfg or TrainConfig(lr_g=1e-3, beta1=0.9)
    geom = _check_geometry(samples)
    if geom.count != gen_cfg.input_channels or geom.high_res != gen_cfg.image_size:
        raise ConfigError("generator configuration does not match the dataset geometry")
    dtype = ad.resolve_dtype(train_cfg.dtype)
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    stacks = [s.stack for s in samples]
    X = _inputs(stacks, gen_cfg.image_size, dtype)
    T, S = _normalized_measurements(stacks, dtype)
    g = _leaves(build_generator(gen_cfg, train_cfg.seed, dtype))
    state = ad.AdamState(train_cfg.lr_g, train_cfg.beta1, train_cfg.beta2)
    rows, best, best_params = [], math.inf, _snapshot(g)
    t0 = time.perf_counter()
    it = 0
    for epoch in range(train_cfg.epochs):
        losses = []
        for idx in _batches(len(samples), train_cfg.batch_size, rng):
            amp, ph = split_output(generator_forward(g, X[idx], gen_cfg))
            loss = ad.mse_loss(measurement_prediction(amp, ph, geom, S[idx]), T[idx])
            _check_finite(loss.item(), "forward-model loss", rows,
                          Checkpoint(best_params, gen_cfg, geom.to_dict(), "forward_only", rows))
            ad.adam_step(g.values(), ad.backward(loss, g.values()), state)
            it += 1
            losses.append(loss.item())
            rows.append({"iteration": it, "epoch": epoch, "loss_meas": loss.item(),
                         "wall_time": time.perf_counter() - t0})
        score = float(np.mean(losses))
        if score < best:
            best, best_params = score, _snapshot(g)
    ckpt = Checkpoint(best_params if train_cfg.epochs else _snapshot(g), gen_cfg, geom.to_dict(),
                      "forward_only", rows, train_cfg.to_dict())
    if train_cfg.out_dir:
        ckpt.save(Path(train_cfg.out_dir) / "best")
        _write_trace(train_cfg.out_dir, rows)
    return ckpt


def measurement_loss(checkpoint, stack, dtype="float64"):
    """Normalized measurement MSE of a trained generator on one stack."""
    dtype = ad.resolve_dtype(dtype)
    cfg = checkpoint.gen_cfg
    params = {k: v.to(dtype) for k, v in checkpoint.params.items()}
    target, scales = _normalized_measurements([stack], dtype)
    with torch.no_grad():
        amp, ph = split_output(generator_forward(params, _inputs([stack], cfg.image_size, dtype), cfg))
        return ad.mse_loss(measurement_prediction(amp, ph, stack.geometry, scales), target).item()
