"""U-Net generator and conditional patch discriminator in functional form.

Parameters live in plain ordered dicts of tensors so they can be saved,
swapped between heads and optimized by :func:`fpkit.autodiff.adam_step`.
"""

from dataclasses import dataclass, asdict

import torch

from . import autodiff as ad
from .errors import ConfigError, ShapeError

HEADS = ("relu", "sigmoid")


@dataclass
class GeneratorConfig:
    input_channels: int
    image_size: int = 64
    base_channels: int = 32
    depth: int = 4
    head: str = "sigmoid"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.depth < 1 or self.image_size % (2 ** self.depth):
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2**depth ({2 ** self.depth})"
            )
        if self.input_channels < 1 or self.base_channels < 1:
            raise ConfigError("channel counts must be positive")

    def level_channels(self, level):
        """Feature channels of encoder level ``level`` (1-based)."""
        return self.base_channels * min(2 ** (level - 1), 8)

    def to_dict(self):
        return asdict(self)


@dataclass
class DiscriminatorConfig:
    input_channels: int
    image_size: int = 64
    layers: int = 3
    base_channels: int = 32

    def __post_init__(self):
        if self.layers < 1 or self.image_size // (2 ** self.layers) < 2:
            raise ConfigError(
                f"{self.layers} stride-2 layers leave no patch grid on a {self.image_size} image"
            )

    @property
    def patch_size(self):
        return self.image_size // (2 ** self.layers)

    def to_dict(self):
        return asdict(self)


def _normal(gen, shape, dtype, std=0.02):
    return torch.randn(shape, generator=gen, dtype=torch.float64).mul_(std).to(dtype)


def build_generator(cfg, seed=0, dtype=torch.float64, check=True):
    """Seeded N(0, 0.02) weights for the encoder/decoder.

    Convolutions followed by instance normalization carry no bias since the
    normalization would cancel it. With ``check`` a single backward pass
    verifies every parameter receives gradient.
    """
    dtype = ad.resolve_dtype(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    p = {}
    cin = cfg.input_channels
    for lvl in range(1, cfg.depth + 1):
        cout = cfg.level_channels(lvl)
        p[f"enc{lvl}.w"] = _normal(gen, (cout, cin, 4, 4), dtype)
        cin = cout
    for lvl in range(cfg.depth - 1, -1, -1):
        cout = cfg.level_channels(lvl) if lvl > 0 else cfg.base_channels
        p[f"dec{lvl}.w"] = _normal(gen, (cin, cout, 4, 4), dtype)
        skip = cfg.level_channels(lvl) if lvl > 0 else cfg.input_channels
        cin = cout + skip
    p["out.w"] = _normal(gen, (2, cin, 1, 1), dtype)
    p["out.b"] = torch.zeros(2, dtype=dtype)
    if check:
        x = torch.rand((1, cfg.input_channels, cfg.image_size, cfg.image_size),
                       generator=gen, dtype=torch.float64).to(dtype)
        dead = dead_parameters(p, lambda q: generator_forward(q, x, cfg).square().mean())
        if dead:
            raise ConfigError(f"parameters without gradient at initialization: {dead}")
    return p


def generator_forward(params, x, cfg):
    """Map a (B, L, N, N) measurement tensor to (B, 2, N, N).

    Channel 0 is amplitude and channel 1 is phase / 2pi, both on a [0, 1] scale.
    """
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != cfg.input_channels:
        raise ShapeError(f"generator expects (B, {cfg.input_channels}, H, W), got {tuple(x.shape)}")
    if x.shape[-1] != cfg.image_size or x.shape[-2] != cfg.image_size:
        raise ShapeError(f"generator expects {cfg.image_size}x{cfg.image_size} input, got {tuple(x.shape)}")
    skips = [x]
    h = x
    for lvl in range(1, cfg.depth + 1):
        h = ad.leaky_relu(ad.instance_norm(ad.conv2d(h, params[f"enc{lvl}.w"], stride=2)))
        skips.append(h)
    skips.pop()
    for lvl in range(cfg.depth - 1, -1, -1):
        h = ad.relu(ad.instance_norm(ad.transposed_conv2d(h, params[f"dec{lvl}.w"])))
        h = ad.concat_channels(h, skips.pop())
    out = ad.conv2d(h, params["out.w"], params["out.b"])
    return ad.relu(out) if cfg.head == "relu" else ad.sigmoid(out)


def split_output(out):
    """(B, 2, N, N) generator output -> (amplitude, phase_scaled), each (B, N, N)."""
    return out[:, 0], out[:, 1]


def build_discriminator(cfg, seed=0, dtype=torch.float64):
    dtype = ad.resolve_dtype(dtype)
    gen = torch.Generator().manual_seed(int(seed) + 7919)
    p = {}
    cin = cfg.input_channels
    for i in range(cfg.layers):
        cout = cfg.base_channels * min(2 ** i, 8)
        p[f"d{i}.w"] = _normal(gen, (cout, cin, 4, 4), dtype)
        if i == 0:
            p["d0.b"] = torch.zeros(cout, dtype=dtype)
        cin = cout
    p["logit.w"] = _normal(gen, (1, cin, 3, 3), dtype)
    p["logit.b"] = torch.zeros(1, dtype=dtype)
    return p


def discriminator_forward(params, condition, candidate, cfg):
    """Patch logits for a (condition, candidate) pair, shape (B, 1, n, n)."""
    if condition.dim() == 3:
        condition = condition.unsqueeze(0)
    if candidate.dim() == 3:
        candidate = candidate.unsqueeze(0)
    h = ad.concat_channels(condition, candidate)
    if h.shape[1] != cfg.input_channels:
        raise ShapeError(
            f"discriminator expects {cfg.input_channels} channels, got "
            f"{condition.shape[1]} + {candidate.shape[1]}"
        )
    for i in range(cfg.layers):
        h = ad.conv2d(h, params[f"d{i}.w"], params.get(f"d{i}.b"), stride=2)
        if i > 0:
            h = ad.instance_norm(h)
        h = ad.leaky_relu(h)
    return ad.conv2d(h, params["logit.w"], params["logit.b"])


def dead_parameters(params, loss_fn):
    """Names of parameters whose gradient is identically zero for ``loss_fn``."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    grads = ad.backward(loss_fn(leaves), list(leaves.values()))
    return [k for k, g in zip(leaves, grads) if not torch.any(g != 0)]


def parameter_shapes(params):
    return {k: tuple(v.shape) for k, v in params.items()}
