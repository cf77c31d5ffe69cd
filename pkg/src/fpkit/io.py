"""On-disk formats: measurement stacks, 16-bit images, run manifests."""

import json
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .errors import DatasetError
from .forward import AcquisitionGeometry, MeasurementStack

STACK_DTYPES = {"f64le": ("<f8", "stack.f64"), "f32le": ("<f4", "stack.f32")}
TWO_PI = 2 * np.pi


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing file {path}") from None


def write_run_manifest(out_dir, command, config):
    write_json(Path(out_dir) / "run.json",
               {"tool": "fpkit", "version": __version__, "command": command, "config": config})


def save_stack(stack, directory, dtype="f64le"):
    """Write ``manifest.json`` plus raw little-endian planes in acquisition order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np_dtype, fname = STACK_DTYPES[dtype]
    L, m, _ = stack.images.shape
    manifest = {
        "geometry": stack.geometry.to_dict(),
        "L": L,
        "m": m,
        "dtype": dtype,
        "scale": stack.scale,
        "sample_id": stack.sample_id,
        "file": fname,
    }
    (directory / fname).write_bytes(np.ascontiguousarray(stack.images, dtype=np_dtype).tobytes())
    write_json(directory / "manifest.json", manifest)


def load_stack(directory):
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    try:
        np_dtype, fname = STACK_DTYPES[manifest["dtype"]]
        geom = AcquisitionGeometry.from_dict(manifest["geometry"])
        L, m = manifest["L"], manifest["m"]
    except KeyError as exc:
        raise DatasetError(f"{directory}: malformed stack manifest ({exc})") from None
    path = directory / manifest.get("file", fname)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"missing stack file {path}") from None
    images = np.frombuffer(raw, dtype=np_dtype)
    if images.size != L * m * m:
        raise DatasetError(f"{path}: expected {L * m * m} values, found {images.size}")
    images = images.reshape(L, m, m).astype(np.float64)
    return MeasurementStack(geom, images, float(manifest["scale"]), manifest.get("sample_id", ""))


def quantize_unit(x):
    """Values in [0, 1] -> uint16 codes."""
    return np.round(np.clip(x, 0.0, 1.0) * 65535).astype(np.uint16)


def quantize_phase(phase):
    """Phase in [0, 2pi) -> uint16 codes; code 65535 would decode to 2pi, so it wraps to 0."""
    q = np.round(np.asarray(phase) * (65535 / TWO_PI)).astype(np.int64)
    q[q >= 65535] = 0
    q[q < 0] = 0
    return q.astype(np.uint16)


def dequantize_unit(q):
    return np.asarray(q, dtype=np.float64) / 65535


def dequantize_phase(q):
    return np.asarray(q, dtype=np.float64) * (TWO_PI / 65535)


def write_png16(path, codes):
    codes = np.ascontiguousarray(codes, dtype=np.uint16)
    Image.fromarray(codes.astype("<u2")).save(path, format="PNG")


def read_png16(path):
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except FileNotFoundError:
        raise DatasetError(f"missing image {path}") from None
    return arr.astype(np.uint16)


def save_amplitude_phase(directory, amplitude, phase):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_png16(directory / "amplitude.png", quantize_unit(amplitude))
    write_png16(directory / "phase.png", quantize_phase(phase))


def load_amplitude_phase(directory):
    directory = Path(directory)
    amp = dequantize_unit(read_png16(directory / "amplitude.png"))
    phase = dequantize_phase(read_png16(directory / "phase.png"))
    return amp, phase
