"""PSNR / SSIM scoring of amplitude and phase reconstructions."""

from dataclasses import dataclass, field, replace
import csv
import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io
from .errors import DatasetError, ShapeError

PSNR_CAP = 99.0
REPORT_VERSION = 1
TWO_PI = 2 * np.pi
# methods that recover phase only up to a constant offset
PHASE_AMBIGUOUS = ("ap", "wf")


def psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(1.0 / mse)))


def _gaussian_kernel(window, sigma):
    x = np.arange(window) - (window - 1) / 2
    k = np.exp(-x ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def _local_mean(x, kernel):
    pad = len(kernel) // 2
    out = ndimage.correlate1d(x, kernel, axis=0, mode="constant")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="constant")
    return out[pad:x.shape[0] - pad, pad:x.shape[1] - pad]


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean Gaussian-weighted SSIM over the positions where the window fits."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim != 2 or min(a.shape) < window:
        raise ShapeError(f"ssim needs 2-D inputs of at least {window}x{window}, got {a.shape}")
    kern = _gaussian_kernel(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _local_mean(a, kern)
    mu_b = _local_mean(b, kern)
    var_a = _local_mean(a * a, kern) - mu_a * mu_a
    var_b = _local_mean(b * b, kern) - mu_b * mu_b
    cov = _local_mean(a * b, kern) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def phase_offset(phase, gt_phase):
    """Circular mean of ``gt_phase - phase``."""
    return float(np.angle(np.mean(np.exp(1j * (np.asarray(gt_phase) - np.asarray(phase))))))


def align_global_phase(recon, gt_phase):
    """Shift the reconstruction's phase by the offset that best matches
    ``gt_phase``; amplitude is passed through untouched."""
    if recon.phase.shape != np.shape(gt_phase):
        raise ShapeError(f"phase shapes {recon.phase.shape} and {np.shape(gt_phase)} differ")
    delta = phase_offset(recon.phase, gt_phase)
    aligned = np.mod(recon.phase + delta, TWO_PI)
    aligned[aligned >= TWO_PI] = 0.0
    diag = dict(recon.diagnostics, phase_offset=delta)
    return replace(recon, phase=aligned, diagnostics=diag)


def default_crop(N):
    """Border-excluding central crop: 240 of 256, scaled to other sizes."""
    return (15 * N) // 16


def central_crop(x, crop):
    if crop is None:
        return x
    h, w = x.shape
    if crop > min(h, w):
        raise ShapeError(f"crop {crop} larger than image {x.shape}")
    r0, c0 = (h - crop) // 2, (w - crop) // 2
    return x[r0:r0 + crop, c0:c0 + crop]


def score(amplitude, phase, gt_amplitude, gt_phase, crop=None):
    """PSNR/SSIM of amplitude (clipped to [0, 1]) and phase / 2pi."""
    pa = central_crop(np.clip(amplitude, 0.0, 1.0), crop)
    ga = central_crop(gt_amplitude, crop)
    pp = central_crop(np.asarray(phase) / TWO_PI, crop)
    gp = central_crop(np.asarray(gt_phase) / TWO_PI, crop)
    return {
        "psnr_amplitude": psnr(pa, ga),
        "psnr_phase": psnr(pp, gp),
        "ssim_amplitude": ssim(pa, ga),
        "ssim_phase": ssim(pp, gp),
    }


@dataclass
class MetricReport:
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def aggregates(self):
        out = {}
        methods = sorted({r["method"] for r in self.records})
        for method in methods:
            rows = [r for r in self.records if r["method"] == method]
            agg = {"count": len(rows)}
            for key in ("psnr_amplitude", "psnr_phase", "ssim_amplitude", "ssim_phase"):
                vals = np.array([r[key] for r in rows])
                agg[f"{key}_mean"] = float(vals.mean())
                agg[f"{key}_median"] = float(np.median(vals))
            out[method] = agg
        return out

    def to_dict(self):
        return {
            "version": REPORT_VERSION,
            "config": self.config,
            "samples": self.records,
            "aggregates": self.aggregates,
        }

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        io.write_json(out_dir / "report.json", self.to_dict())
        keys = ["id", "method", "psnr_amplitude", "psnr_phase", "ssim_amplitude",
                "ssim_phase", "crop", "phase_aligned"]
        with open(out_dir / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            for r in self.records:
                w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys})


def _sample_ids(gt_dir):
    manifest = Path(gt_dir) / "manifest.json"
    if manifest.exists():
        return [e["id"] for e in io.read_json(manifest)["samples"]]
    return sorted(p.name for p in Path(gt_dir).iterdir() if (p / "amplitude.png").exists())


def evaluate(pred_dir, gt_dir, crop=None, method=None):
    """Score every ground-truth sample against ``<pred_dir>/<id>/``.

    The method name comes from each prediction's ``diagnostics.json`` unless
    given. AP/WF phases are globally aligned before scoring.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    report = MetricReport(config={
        "predictions": str(pred_dir), "ground_truth": str(gt_dir), "crop": crop,
        "phase_alignment": list(PHASE_AMBIGUOUS),
    })
    for sid in _sample_ids(gt_dir):
        pdir = pred_dir / sid
        if not (pdir / "amplitude.png").exists():
            raise DatasetError(f"no prediction for sample {sid} in {pred_dir}")
        gt_amp, gt_phase = io.load_amplitude_phase(gt_dir / sid)
        amp, phase = io.load_amplitude_phase(pdir)
        m = method
        if m is None:
            diag = pdir / "diagnostics.json"
            m = json.loads(diag.read_text()).get("method", "unknown") if diag.exists() else "unknown"
        aligned = m in PHASE_AMBIGUOUS
        if aligned:
            phase = np.mod(phase + phase_offset(phase, gt_phase), TWO_PI)
        rec = {"id": sid, "method": m, "crop": crop, "phase_aligned": aligned}
        rec.update(score(amp, phase, gt_amp, gt_phase, crop))
        report.records.append(rec)
    return report
