"""Reverse-mode differentiation layer used by the generator, discriminator and
the differentiable measurement head.

Graph construction and backward passes are delegated to torch autograd; this
module pins down the op set, the shape contracts, Adam, the checkpoint file
format and a central finite-difference checker that is independent of torch.
"""

from dataclasses import dataclass, field
import json
import os
import struct

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FPError, GeometryError, ShapeError

DTYPES = {"float64": torch.float64, "float32": torch.float32}
CHECKPOINT_MAGIC = b"FPCK"
CHECKPOINT_VERSION = 1


class GraphError(FPError):
    """Backward requested on a graph whose buffers were already released."""


def configure_threads(n=None):
    """Pin the torch intra-op thread count (``FPKIT_THREADS`` or 1).

    Training traces are bit-reproducible only at a fixed thread count.
    """
    if n is None:
        n = int(os.environ.get("FPKIT_THREADS", "1"))
    torch.set_num_threads(max(1, n))
    return n


def resolve_dtype(dtype):
    if isinstance(dtype, torch.dtype):
        return dtype
    try:
        return DTYPES[dtype]
    except KeyError:
        raise ValueError(f"unsupported dtype {dtype!r}") from None


def _shape(t):
    return tuple(t.shape)


def _need_image(x, op):
    if x.dim() != 4:
        raise ShapeError(f"{op}: expected (batch, channels, H, W) input, got {_shape(x)}")


def conv2d(x, weight, bias=None, stride=1, padding=None):
    _need_image(x, "conv2d")
    if weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {_shape(x)} incompatible with weight {_shape(weight)}")
    if stride not in (1, 2):
        raise ValueError("conv2d supports stride 1 or 2")
    if padding is None:
        k = weight.shape[-1]
        padding = (k - 1) // 2 if stride == 1 else (k - 2) // 2
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def transposed_conv2d(x, weight, bias=None, stride=2, padding=1):
    """Stride-2 transposed convolution; with a 4x4 kernel it doubles H and W."""
    _need_image(x, "transposed_conv2d")
    if weight.dim() != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"transposed_conv2d: input {_shape(x)} incompatible with weight {_shape(weight)}"
        )
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


def relu(x):
    return torch.relu(x)


def leaky_relu(x, slope=0.2):
    return F.leaky_relu(x, slope)


def sigmoid(x):
    return torch.sigmoid(x)


def instance_norm(x, eps=1e-5):
    _need_image(x, "instance_norm")
    return F.instance_norm(x, eps=eps)


def concat_channels(*xs):
    ref = xs[0]
    for x in xs:
        _need_image(x, "concat_channels")
        if x.shape[0] != ref.shape[0] or x.shape[2:] != ref.shape[2:]:
            raise ShapeError(f"concat_channels: {_shape(ref)} vs {_shape(x)}")
    return torch.cat(xs, dim=1)


def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {_shape(pred)} vs {_shape(target)}")
    return torch.mean((pred - target) ** 2)


def bce_with_logits_loss(logits, target):
    """Mean binary cross-entropy; ``target`` may be a tensor or a constant label."""
    if not torch.is_tensor(target):
        target = torch.full_like(logits, float(target))
    if target.shape != logits.shape:
        raise ShapeError(f"bce_with_logits_loss: {_shape(logits)} vs {_shape(target)}")
    return F.binary_cross_entropy_with_logits(logits, target)


def backward(loss, params):
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Parameters that do not influence the loss get a zero tensor. The graph is
    released afterwards; a second call without a new forward raises GraphError.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    params = list(params)
    try:
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    except RuntimeError as exc:
        if "second time" in str(exc) or "freed" in str(exc):
            raise GraphError("backward called twice on the same graph; run forward again") from exc
        raise
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """In-place Adam update with bias correction; returns ``params``."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1 - state.beta1 ** state.step
    bc2 = 1 - state.beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if p.shape != g.shape or m.shape != p.shape:
                raise ShapeError(f"adam_step: param {_shape(p)} vs grad {_shape(g)}")
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / bc1)
    return params


# -- differentiable FP measurement -------------------------------------------

def _centered_fft2(x, inverse=False):
    x = torch.fft.ifftshift(x, dim=(-2, -1))
    x = torch.fft.ifft2(x, norm="ortho") if inverse else torch.fft.fft2(x, norm="ortho")
    return torch.fft.fftshift(x, dim=(-2, -1))


def measurement_head(amplitude, phase_scaled, geom):
    """Raw low-resolution intensities of ``amplitude * exp(i 2pi phase_scaled)``.

    Inputs are ``(..., N, N)`` real tensors; the output is ``(..., L, m, m)``.
    """
    N = geom.high_res
    if amplitude.shape[-2:] != (N, N) or phase_scaled.shape != amplitude.shape:
        raise GeometryError(
            f"measurement_head: amplitude {_shape(amplitude)} / phase {_shape(phase_scaled)} "
            f"do not match geometry size {N}"
        )
    angle = 2 * np.pi * phase_scaled
    obj = torch.complex(amplitude * torch.cos(angle), amplitude * torch.sin(angle))
    spectrum = _centered_fft2(obj)
    rows, cols = geom.window_index
    rows_t = torch.as_tensor(rows)[:, :, None]
    cols_t = torch.as_tensor(cols)[:, None, :]
    pupil = torch.as_tensor(geom.pupil, dtype=amplitude.dtype)
    windows = spectrum[..., rows_t, cols_t] * pupil
    fields = _centered_fft2(windows, inverse=True)
    return fields.real ** 2 + fields.imag ** 2


# -- finite differences -------------------------------------------------------

def numerical_gradient(fn, x, eps=1e-5):
    """Central-difference gradient of scalar ``fn`` at numpy array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn(x))
        flat[i] = orig - eps
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def gradient_check(fn, inputs, eps=1e-5):
    """Compare autograd against central differences for every input.

    ``fn`` maps a list of float64 tensors to a scalar tensor. Returns the worst
    norm-wise relative error over all inputs.
    """
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    leaves = [torch.tensor(a, requires_grad=True) for a in inputs]
    auto = backward(fn(leaves), leaves)
    worst = 0.0
    for k, a in enumerate(inputs):

        def f_k(v, k=k):
            args = [torch.tensor(b) for b in inputs]
            args[k] = torch.tensor(v)
            with torch.no_grad():
                return fn(args).item()

        num = numerical_gradient(f_k, a, eps)
        g = auto[k].detach().numpy()
        scale = max(np.linalg.norm(g), np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(g - num) / scale))
    return worst


# -- checkpoint files ---------------------------------------------------------

def save_params(params, path):
    """Write ``params`` (name -> tensor) in the FPCK layout.

    magic ``FPCK`` | u32 version | u32 table length | JSON table | float64 LE data
    """
    table, chunks, offset = [], [], 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob = json.dumps(table, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_params(path, expected=None, dtype=torch.float64):
    """Read an FPCK file. If ``expected`` (name -> tensor or shape) is given,
    names and shapes must match it exactly."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ShapeError(f"{path}: not an FPCK checkpoint")
    version, n = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ShapeError(f"{path}: unsupported checkpoint version {version}")
    table = json.loads(raw[12:12 + n])
    base = 12 + n
    params = {}
    for entry in table:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape)
        params[entry["name"]] = torch.tensor(arr, dtype=dtype)
    if expected is not None:
        want = {k: tuple(v.shape) if torch.is_tensor(v) else tuple(v) for k, v in expected.items()}
        got = {k: tuple(v.shape) for k, v in params.items()}
        if want != got:
            missing = sorted(set(want) ^ set(got))
            bad = sorted(k for k in set(want) & set(got) if want[k] != got[k])
            raise ShapeError(f"{path}: checkpoint does not match architecture "
                             f"(name mismatch {missing[:5]}, shape mismatch {bad[:5]})")
    return params
