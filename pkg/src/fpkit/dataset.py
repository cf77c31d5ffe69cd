"""Simulated FP datasets with uncorrelated amplitude and phase.

Each object pairs two different grayscale images: one becomes the amplitude
(scaled to [0, 1]) and the other the phase (scaled to [0, 2pi)). Objects are
stored as 16-bit PNGs and the raw intensity stack is computed from the
quantized object, so re-measuring a stored object reproduces its stack.
"""

from dataclasses import dataclass
import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import io
from .errors import CorpusError, DatasetError
from .field import resize_bilinear
from .forward import build_geometry, forward_measure
from .procedural import procedural_texture

log = logging.getLogger(__name__)

TWO_PI = 2 * np.pi
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".pgm"}


@dataclass
class ObjectSample:
    amplitude: np.ndarray
    phase: np.ndarray
    id: str = ""
    source_pair: tuple = ("", "")

    @property
    def field(self):
        return self.amplitude * np.exp(1j * self.phase)


@dataclass
class LoadedSample:
    id: str
    stack: object
    amplitude: np.ndarray
    phase: np.ndarray

    @property
    def field(self):
        return self.amplitude * np.exp(1j * self.phase)


def _as_gray(img):
    """Return (float array, max representable value) for a path or array."""
    if isinstance(img, (str, Path)):
        try:
            with Image.open(img) as im:
                if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                    arr = np.array(im).astype(np.float64)
                    return arr, 65535.0
                arr = np.array(im.convert("L"), dtype=np.float64)
                return arr, 255.0
        except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
            raise CorpusError(f"cannot decode image {img}: {exc}") from None
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.size == 0:
        raise CorpusError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64), 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float64), 65535.0
    if arr.dtype == bool:
        return arr.astype(np.float64), 1.0
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise CorpusError("image contains non-finite values")
    return arr, 1.0


def make_object(img_a, img_p, N, id="", source_pair=("", "")):
    a, a_max = _as_gray(img_a)
    p, p_max = _as_gray(img_p)
    amplitude = np.clip(resize_bilinear(a, N) / a_max, 0.0, 1.0)
    phase = TWO_PI * np.clip(resize_bilinear(p, N) / p_max, 0.0, 1.0)
    phase[phase >= TWO_PI] = 0.0
    return ObjectSample(amplitude, phase, id, tuple(source_pair))


def quantized(sample):
    """Copy of ``sample`` snapped to the 16-bit codes used on disk."""
    amp = io.dequantize_unit(io.quantize_unit(sample.amplitude))
    phase = io.dequantize_phase(io.quantize_phase(sample.phase))
    return ObjectSample(amp, phase, sample.id, sample.source_pair)


def preprocess_stack(stack, N):
    """Network input: every image resized to N x N, then min-max scaled per channel.

    Constant channels become all zeros.
    """
    imgs = resize_bilinear(stack.images, N)
    lo = imgs.min(axis=(1, 2), keepdims=True)
    hi = imgs.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    out = np.zeros_like(imgs)
    ok = span[:, 0, 0] > 0
    out[ok] = (imgs[ok] - lo[ok]) / span[ok]
    return out


def _corpus_files(corpus_dir):
    root = Path(corpus_dir)
    if not root.is_dir():
        raise CorpusError(f"corpus directory {root} does not exist")
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def _draw_objects(n, N, rng, files, prefix):
    samples = []
    for k in range(n):
        sid = f"{prefix}-{k:05d}"
        if files is None:
            img_a = procedural_texture(rng, N)
            img_p = procedural_texture(rng, N)
            pair = (f"proc:{sid}:a", f"proc:{sid}:p")
        else:
            ia, ip = rng.choice(len(files), size=2, replace=False)
            img_a, img_p = files[ia], files[ip]
            pair = (str(files[ia].name), str(files[ip].name))
        samples.append(quantized(make_object(img_a, img_p, N, sid, pair)))
    return samples


def generate_dataset(out_dir, n_train, n_test, N=64, m=16, overlap=0.65, seed=0,
                     corpus_dir=None, dtype="f64le"):
    """Write ``<out>/<split>/<id>/{amplitude.png, phase.png, manifest.json, stack.*}``.

    With ``corpus_dir=None`` objects come from the procedural texture
    generator. Returns ``{split: manifest dict}``.
    """
    files = None
    if corpus_dir is not None:
        files = _corpus_files(corpus_dir)
        if len(files) < 2:
            raise CorpusError(f"corpus {corpus_dir} needs at least 2 images, found {len(files)}")
    geom = build_geometry(N, m, overlap)
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    manifests = {}
    corpus_desc = "procedural" if files is None else f"{corpus_dir} ({len(files)} images)"
    for split, n in (("train", n_train), ("test", n_test)):
        samples = _draw_objects(n, N, rng, files, split)
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for s in samples:
            sdir = split_dir / s.id
            io.save_amplitude_phase(sdir, s.amplitude, s.phase)
            io.save_stack(forward_measure(s.field, geom, s.id), sdir, dtype)
            entries.append({
                "id": s.id,
                "amplitude": f"{s.id}/amplitude.png",
                "phase": f"{s.id}/phase.png",
                "stack": f"{s.id}/manifest.json",
                "source_pair": list(s.source_pair),
            })
        manifest = {
            "split": split,
            "samples": entries,
            "geometry": geom.to_dict(),
            "seed": int(seed),
            "corpus": corpus_desc,
        }
        io.write_json(split_dir / "manifest.json", manifest)
        manifests[split] = manifest
        log.info("wrote %d %s samples to %s", n, split, split_dir)
    return manifests


def load_sample(sample_dir):
    sample_dir = Path(sample_dir)
    stack = io.load_stack(sample_dir)
    amp, phase = io.load_amplitude_phase(sample_dir)
    return LoadedSample(stack.sample_id or sample_dir.name, stack, amp, phase)


def load_split(split_dir):
    split_dir = Path(split_dir)
    manifest = io.read_json(split_dir / "manifest.json")
    samples = []
    for entry in manifest["samples"]:
        sdir = split_dir / entry["id"]
        if not sdir.is_dir():
            raise DatasetError(f"manifest references missing sample {sdir}")
        samples.append(load_sample(sdir))
    return samples


def simulate_samples(n, N, m, overlap, seed, prefix="sample"):
    """In-memory variant of :func:`generate_dataset` for a single split."""
    geom = build_geometry(N, m, overlap)
    rng = np.random.default_rng(seed)
    out = []
    for s in _draw_objects(n, N, rng, None, prefix):
        out.append(LoadedSample(s.id, forward_measure(s.field, geom, s.id), s.amplitude, s.phase))
    return out
