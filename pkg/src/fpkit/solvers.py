"""Alternating Projections and Wirtinger Flow over the FP measurement operator."""

import dataclasses
from dataclasses import dataclass, asdict
import time

import numpy as np

from .errors import DivergenceError, GeometryError
from .field import dft2_centered, resize_bilinear
from .forward import forward_fields, spectrum_windows

TWO_PI = 2 * np.pi


@dataclass
class SolverOptions:
    max_iterations: int = 200
    tol: float = 1e-6
    epsilon: float = 1e-12
    # Wirtinger Flow step schedule: mu_t = mu_max * min(1, t / t0)
    t0: float = 330.0
    mu_max: float = 0.4
    record_trace: bool = True

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.tol <= 0:
            raise ValueError("tol must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class Reconstruction:
    amplitude: np.ndarray
    phase: np.ndarray
    residual_trace: list = dataclasses.field(default_factory=list)
    iterations_run: int = 0
    wall_time: float = 0.0
    method: str = ""
    field: np.ndarray = None
    diagnostics: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_field(cls, z, **kwargs):
        return cls(amplitude=np.abs(z), phase=wrap_phase(np.angle(z)), field=z, **kwargs)


def wrap_phase(phi):
    """Map angles to [0, 2pi), folding the rounding case of exactly 2pi to 0."""
    out = np.mod(phi, TWO_PI)
    out[out >= TWO_PI] = 0.0
    return out


def _check_stack(stack, geom):
    g = geom
    if stack.images.shape != (g.count, g.low_res, g.low_res):
        raise GeometryError(
            f"stack shape {stack.images.shape} inconsistent with geometry "
            f"({g.count}, {g.low_res}, {g.low_res})"
        )


def relative_residual(z, stack, geom):
    fields = forward_fields(z, geom)
    diff = np.abs(fields) ** 2 - stack.images
    denom = np.sqrt(np.sum(stack.images ** 2))
    num = np.sqrt(np.sum(diff ** 2))
    return float(num / denom) if denom > 0 else float(num)


def init_upsampled_dc(stack, geom):
    """Bright-field image upsampled to the object grid, flat phase.

    The ``m / N`` factor converts the low-resolution amplitude back to the
    unitary normalization of the high-resolution grid.
    """
    _check_stack(stack, geom)
    amp = np.sqrt(np.maximum(stack.images[geom.dc_index], 0.0))
    amp = resize_bilinear(amp, geom.high_res) * (geom.low_res / geom.high_res)
    return amp.astype(np.complex128)


def ap_reconstruct(stack, geom, opts=None, init=None):
    """Sequential Alternating Projections (Gerchberg-Saxton style FP update).

    One sweep visits every illumination in acquisition order: the current
    sub-aperture field gets the measured modulus, and its spectrum replaces
    the estimate inside the pupil. Returns the best full-residual iterate.
    """
    opts = opts or SolverOptions()
    _check_stack(stack, geom)
    t_start = time.perf_counter()
    z0 = init_upsampled_dc(stack, geom) if init is None else np.asarray(init, complex)
    spectrum = dft2_centered(z0)
    sqrt_i = np.sqrt(np.maximum(stack.images, 0.0))
    pupil = geom.pupil
    m = geom.low_res
    rows, cols = geom.window_index

    res = relative_residual(z0, stack, geom)
    trace = [res]
    best_res, best_spec = res, spectrum.copy()
    sweeps = 0
    while sweeps < opts.max_iterations and best_res >= opts.tol:
        for j in range(geom.count):
            r0, c0 = rows[j][0], cols[j][0]
            win = spectrum[r0:r0 + m, c0:c0 + m]
            psi = dft2_centered(win * pupil, "inverse")
            psi_new = sqrt_i[j] * psi / (np.abs(psi) + opts.epsilon)
            upd = dft2_centered(psi_new)
            win[pupil] = upd[pupil]
        sweeps += 1
        z = dft2_centered(spectrum, "inverse")
        res = relative_residual(z, stack, geom)
        if not np.isfinite(res):
            raise DivergenceError("AP residual became non-finite", trace)
        trace.append(res)
        if res <= best_res:
            best_res, best_spec = res, spectrum.copy()
    z = dft2_centered(best_spec, "inverse")
    return Reconstruction.from_field(
        z,
        residual_trace=trace if opts.record_trace else [best_res],
        iterations_run=sweeps,
        wall_time=time.perf_counter() - t_start,
        method="ap",
        diagnostics={"best_residual": best_res, "options": opts.to_dict()},
    )


def _adjoint(fields_lr, geom):
    """Adjoint of the linear map z -> (A_j z)_j for a stack of low-res fields."""
    N = geom.high_res
    rows, cols = geom.window_index
    windows = dft2_centered(fields_lr) * geom.pupil
    flat = (rows[:, :, None] * N + cols[:, None, :]).ravel()
    acc = np.bincount(flat, weights=windows.real.ravel(), minlength=N * N) + 1j * np.bincount(
        flat, weights=windows.imag.ravel(), minlength=N * N
    )
    return dft2_centered(acc.reshape(N, N), "inverse")


def _loss_grad_residual(z, stack, geom):
    fields = forward_fields(z, geom)
    resid = fields.real ** 2 + fields.imag ** 2 - stack.images
    loss = float(np.sum(resid ** 2))
    grad = _adjoint(4.0 * resid * fields, geom)
    return loss, grad


def wf_loss_grad(z, stack, geom):
    """Intensity least-squares loss and its descent direction.

    ``loss = sum_j || |A_j z|^2 - I_j ||^2`` and
    ``grad = sum_j A_j^H (4 (|A_j z|^2 - I_j) * A_j z)`` so that ``z - mu * grad``
    decreases the loss for small ``mu``; ``Re <grad, dz>`` is the directional
    derivative along ``dz``.
    """
    z = np.asarray(z, dtype=np.complex128)
    _check_stack(stack, geom)
    return _loss_grad_residual(z, stack, geom)


def wf_reconstruct(stack, geom, opts=None, init=None):
    """Wirtinger Flow from the bright-field initialization.

    Step ``mu_t / ||z0||^2`` with ``mu_t = mu_max * min(1, t / t0)``. The
    iterate with the smallest relative data residual is returned.
    """
    opts = opts or SolverOptions()
    _check_stack(stack, geom)
    t_start = time.perf_counter()
    z = init_upsampled_dc(stack, geom) if init is None else np.asarray(init, complex).copy()
    norm0 = float(np.sum(np.abs(z) ** 2))
    denom = float(np.sqrt(np.sum(stack.images ** 2))) or 1.0
    trace = []
    best_res, best_z = np.inf, z
    # zero init means zero gradient forever
    iters = opts.max_iterations if norm0 > 0 else 0
    it = 0
    while True:
        loss, grad = _loss_grad_residual(z, stack, geom)
        res = np.sqrt(loss) / denom
        trace.append(res)
        if not np.isfinite(res) or res > 1e6 * max(trace[0], 1e-300):
            raise DivergenceError(f"WF diverged at iteration {it} (residual {res:.3e})", trace)
        if res <= best_res:
            best_res, best_z = res, z
        if it >= iters or res < opts.tol:
            break
        it += 1
        mu = opts.mu_max * min(1.0, it / opts.t0)
        z = z - (mu / norm0) * grad
    return Reconstruction.from_field(
        best_z,
        residual_trace=trace if opts.record_trace else [best_res],
        iterations_run=it,
        wall_time=time.perf_counter() - t_start,
        method="wf",
        diagnostics={"best_residual": best_res, "options": opts.to_dict()},
    )


def align_to_reference(z, reference):
    """Remove the global phase of ``z`` relative to ``reference``."""
    alpha = np.angle(np.vdot(reference, z))
    return z * np.exp(-1j * alpha)


def relative_error(z, reference):
    z = align_to_reference(z, reference)
    return float(np.linalg.norm(z - reference) / np.linalg.norm(reference))
