"""Command-line interface: ``fpkit <command> [--config file.json] [flags]``.

Every option can come from a JSON config file (keys are the flag names with
underscores) and flags override file values. Errors exit with code 2
(configuration), 3 (data) or 4 (numerical divergence) after printing one
JSON line to standard error.
"""

import argparse
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
import json
import logging
import os
from pathlib import Path
import sys

import numpy as np

from . import __version__, io
from .errors import ConfigError, DatasetError, FPError

METHODS = ("ap", "wf", "dip", "cdip", "cgan")
PHASE_ALIGNED = ("ap", "wf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _crop_arg(text):
    if text in ("none", "auto"):
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"crop must be an integer, 'auto' or 'none', not {text!r}")


# -- shared option groups -----------------------------------------------------

def _add_geometry(p):
    p.add_argument("--N", type=int, default=64, help="object size in pixels")
    p.add_argument("--m", type=int, default=16, help="low-resolution image size")
    p.add_argument("--overlap", type=float, default=0.65, help="pupil overlap ratio in [0, 1)")


def _add_generator(p):
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")


def _add_training(p, lr, beta1):
    p.add_argument("--data", required=True, help="training split directory")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--lr-g", type=float, default=lr)
    p.add_argument("--beta1", type=float, default=beta1)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    _add_generator(p)


def build_parser():
    parser = _Parser(prog="fpkit", description="Fourier ptychography simulation, reconstruction and evaluation")
    parser.add_argument("--version", action="version", version=f"fpkit {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="compute threads (default: $FPKIT_THREADS or 1)")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", default=None, help="JSON file with option values")
        p.set_defaults(func=func)
        return p

    p = command("gen-dataset", cmd_gen_dataset, "simulate a train/test dataset tree")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=10)
    _add_geometry(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus", default=None, help="image directory (default: procedural textures)")
    p.add_argument("--stack-dtype", choices=("f64le", "f32le"), default="f64le")

    p = command("forward", cmd_forward, "measure one object built from an image pair")
    p.add_argument("--amplitude", required=True, help="image used as amplitude")
    p.add_argument("--phase", required=True, help="image used as phase")
    p.add_argument("--out", required=True)
    p.add_argument("--id", default="object")
    _add_geometry(p)
    p.add_argument("--stack-dtype", choices=("f64le", "f32le"), default="f64le")

    p = command("reconstruct", cmd_reconstruct, "recover amplitude and phase from stacks")
    p.add_argument("--stack", required=True, help="sample directory or split directory")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=METHODS, default="ap")
    p.add_argument("--init", default=None, help="checkpoint directory (cdip warm start, cgan inference)")
    p.add_argument("--sweeps", type=int, default=200, help="AP sweeps / WF iterations")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--mu-max", type=float, default=0.4)
    p.add_argument("--t0", type=float, default=330.0)
    p.add_argument("--iterations", type=int, default=2000, help="cDIP / DIP iterations")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="parallel samples for ap/wf")
    _add_generator(p)

    p = command("train-cgan", cmd_train_cgan, "supervised cGAN-FP training")
    _add_training(p, lr=2e-4, beta1=0.5)
    p.add_argument("--val", default=None, help="validation split directory")
    p.add_argument("--lr-d", type=float, default=2e-4)
    p.add_argument("--w-rec", type=float, default=100.0)
    p.add_argument("--w-adv", type=float, default=1.0)

    p = command("train-forward-only", cmd_train_forward_only, "train with the measurement loss only")
    _add_training(p, lr=1e-3, beta1=0.9)

    p = command("eval", cmd_eval, "score reconstructions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop", type=_crop_arg, default="auto", help="pixels, 'auto' (15N/16) or 'none'")
    p.add_argument("--method", default=None, help="override the method recorded in diagnostics")

    p = command("compare", cmd_compare, "side-by-side amplitude/phase panel")
    p.add_argument("--gt", required=True, help="ground-truth sample directory")
    p.add_argument("--pred", action="append", required=True, metavar="LABEL=DIR",
                   help="reconstruction directory, repeatable")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--crop", type=_crop_arg, default="auto")
    return parser


def _config_path(argv):
    for k, tok in enumerate(argv):
        if tok == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _load_config(path):
    try:
        values = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON ({exc})") from None
    if not isinstance(values, dict):
        raise ConfigError("config file must hold a JSON object")
    return values


def parse_args(argv=None):
    """Parse flags, layering defaults < config file < explicit flags."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    path = _config_path(argv)
    if path is not None:
        commands = parser._subparsers._group_actions[0].choices
        name = next((tok for tok in argv if tok in commands), None)
        if name is None:
            raise ConfigError("--config needs a command")
        subparser = commands[name]
        values = _load_config(path)
        known = {a.dest for a in subparser._actions} - {"help", "config", "func"}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys for {name}: {unknown}")
        subparser.set_defaults(**values)
        # required flags may be satisfied by the file
        for action in subparser._actions:
            if action.dest in values:
                action.required = False
    return parser.parse_args(argv)


def resolved_config(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _prepare_out(args, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_run_manifest(out, args.command, resolved_config(args))
    return out


def _resolve_crop(crop, N):
    from .metrics import default_crop
    if crop == "none":
        return None
    if crop == "auto":
        return default_crop(N)
    return crop


# -- commands -----------------------------------------------------------------

def cmd_gen_dataset(args):
    from .dataset import generate_dataset
    out = _prepare_out(args, args.out)
    manifests = generate_dataset(out, args.n_train, args.n_test, args.N, args.m, args.overlap,
                                 args.seed, args.corpus, args.stack_dtype)
    for split in manifests.values():
        io.write_run_manifest(out / split["split"], args.command, resolved_config(args))
    return {split: len(m["samples"]) for split, m in manifests.items()}


def cmd_forward(args):
    from .dataset import make_object, quantized
    from .forward import build_geometry, forward_measure
    geom = build_geometry(args.N, args.m, args.overlap)
    sample = quantized(make_object(args.amplitude, args.phase, args.N, args.id,
                                   (Path(args.amplitude).name, Path(args.phase).name)))
    out = _prepare_out(args, args.out)
    io.save_amplitude_phase(out, sample.amplitude, sample.phase)
    io.save_stack(forward_measure(sample.field, geom, args.id), out, args.stack_dtype)
    return {"count": geom.count, "spacing": geom.spacing}


def _stack_dirs(path):
    """(id, directory) pairs for a single sample or a split directory."""
    path = Path(path)
    manifest = io.read_json(path / "manifest.json")
    if "samples" in manifest:
        return [(e["id"], path / e["id"]) for e in manifest["samples"]], True
    return [(manifest.get("sample_id") or path.name, path)], False


def _write_reconstruction(rec, out_dir):
    io.save_amplitude_phase(out_dir, rec.amplitude, rec.phase)
    io.write_json(out_dir / "diagnostics.json", {
        "method": rec.method,
        "iterations_run": rec.iterations_run,
        "wall_time": rec.wall_time,
        "residual_trace": [float(v) for v in rec.residual_trace],
        "diagnostics": rec.diagnostics,
    })


def _solver_options(args):
    from .solvers import SolverOptions
    try:
        return SolverOptions(max_iterations=args.sweeps, tol=args.tol, t0=args.t0, mu_max=args.mu_max)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _reconstruct_classical(job):
    from . import autodiff as ad
    from .solvers import ap_reconstruct, wf_reconstruct
    method, opts, sdir, odir, threads = job
    ad.configure_threads(threads)
    stack = io.load_stack(sdir)
    solver = ap_reconstruct if method == "ap" else wf_reconstruct
    rec = solver(stack, stack.geometry, opts)
    _write_reconstruction(rec, Path(odir))
    return rec.diagnostics["best_residual"]


def _generator_config(args, geom, head, checkpoint=None):
    from .models import GeneratorConfig
    if checkpoint is not None:
        return replace(checkpoint.gen_cfg, head=head)
    return GeneratorConfig(input_channels=geom.count, image_size=geom.high_res,
                           base_channels=args.base_channels, depth=args.depth, head=head)


def cmd_reconstruct(args):
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    out = _prepare_out(args, args.out)
    samples, is_split = _stack_dirs(args.stack)
    targets = [(sid, sdir, out / sid if is_split else out) for sid, sdir in samples]
    summary = {}

    if args.method in ("ap", "wf"):
        opts = _solver_options(args)
        threads = _threads(args)
        jobs = [(args.method, opts, sdir, odir, threads) for _, sdir, odir in targets]
        if args.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(args.workers) as pool:
                results = list(pool.map(_reconstruct_classical, jobs))
        else:
            results = [_reconstruct_classical(j) for j in jobs]
        return {sid: r for (sid, _, _), r in zip(targets, results)}

    from .learners import CdipConfig, Checkpoint, infer_cgan, optimize_cdip
    checkpoint = Checkpoint.load(args.init, args.dtype) if args.init else None
    if args.method == "cgan" and checkpoint is None:
        raise ConfigError("--method cgan needs --init <checkpoint>")
    for sid, sdir, odir in targets:
        stack = io.load_stack(sdir)
        if args.method == "cgan":
            rec = infer_cgan(checkpoint, stack, args.dtype)
        else:
            cfg = CdipConfig(
                iterations=args.iterations, lr=args.lr, patience=args.patience, seed=args.seed,
                init_mode="checkpoint" if checkpoint is not None else "random",
                input_mode="measurements" if args.method == "cdip" else "noise",
                dtype=args.dtype,
            )
            gen_cfg = _generator_config(args, stack.geometry, "sigmoid", checkpoint)
            rec = optimize_cdip(stack, gen_cfg, cfg, checkpoint)
        odir.mkdir(parents=True, exist_ok=True)
        _write_reconstruction(rec, odir)
        summary[sid] = rec.diagnostics.get("best_loss")
    return summary


def _load_training(path):
    from .dataset import load_split
    samples = load_split(path)
    if not samples:
        raise DatasetError(f"{path} holds no samples")
    return samples


def _train_config(args, **extra):
    from .learners import TrainConfig
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr_g=args.lr_g,
                       beta1=args.beta1, beta2=args.beta2, seed=args.seed,
                       checkpoint_every=args.checkpoint_every, out_dir=str(args.out),
                       dtype=args.dtype, **extra)


def cmd_train_cgan(args):
    from .learners import train_cgan
    out = _prepare_out(args, args.out)
    samples = _load_training(args.data)
    val = _load_training(args.val) if args.val else None
    gen_cfg = _generator_config(args, samples[0].stack.geometry, "relu")
    cfg = _train_config(args, lr_d=args.lr_d, w_rec=args.w_rec, w_adv=args.w_adv)
    ckpt = train_cgan(samples, gen_cfg, None, cfg, val)
    return {"checkpoint": str(out / "best"), "checkpoint_id": ckpt.id}


def cmd_train_forward_only(args):
    from .learners import train_forward_only
    out = _prepare_out(args, args.out)
    samples = _load_training(args.data)
    gen_cfg = _generator_config(args, samples[0].stack.geometry, "sigmoid")
    ckpt = train_forward_only(samples, gen_cfg, _train_config(args))
    return {"checkpoint": str(out / "best"), "checkpoint_id": ckpt.id}


def cmd_eval(args):
    from .metrics import evaluate
    gt_manifest = io.read_json(Path(args.gt) / "manifest.json")
    N = gt_manifest.get("geometry", {}).get("high_res")
    if N is None:
        N = io.read_png16(Path(args.gt) / gt_manifest["samples"][0]["amplitude"]).shape[0]
    crop = _resolve_crop(args.crop, N)
    out = _prepare_out(args, args.out)
    report = evaluate(args.pred, args.gt, crop=crop, method=args.method)
    report.write(out)
    return report.aggregates


def _panel_entries(args):
    entries = []
    for item in args.pred:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).name, item
        diag = Path(path) / "diagnostics.json"
        method = json.loads(diag.read_text()).get("method", label) if diag.exists() else label
        entries.append((label, Path(path), method))
    return entries


def cmd_compare(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .metrics import TWO_PI, central_crop, phase_offset, score

    gt_amp, gt_phase = io.load_amplitude_phase(args.gt)
    crop = _resolve_crop(args.crop, gt_amp.shape[0])
    columns = [("ground truth", gt_amp, gt_phase, None)]
    for label, path, method in _panel_entries(args):
        amp, phase = io.load_amplitude_phase(path)
        if method in PHASE_ALIGNED:
            phase = np.mod(phase + phase_offset(phase, gt_phase), TWO_PI)
        columns.append((label, amp, phase, score(amp, phase, gt_amp, gt_phase, crop)))

    fig, axes = plt.subplots(2, len(columns), figsize=(2.4 * len(columns), 5.2), squeeze=False)
    for c, (label, amp, phase, metrics) in enumerate(columns):
        axes[0, c].imshow(central_crop(np.clip(amp, 0, 1), crop), cmap="gray", vmin=0, vmax=1)
        axes[1, c].imshow(central_crop(phase, crop), cmap="gray", vmin=0, vmax=TWO_PI)
        axes[0, c].set_title(label, fontsize=9)
        if metrics:
            axes[0, c].set_xlabel(f"{metrics['psnr_amplitude']:.2f} dB / {metrics['ssim_amplitude']:.3f}", fontsize=8)
            axes[1, c].set_xlabel(f"{metrics['psnr_phase']:.2f} dB / {metrics['ssim_phase']:.3f}", fontsize=8)
        for r in range(2):
            axes[r, c].set_xticks([])
            axes[r, c].set_yticks([])
    axes[0, 0].set_ylabel("amplitude")
    axes[1, 0].set_ylabel("phase")
    fig.tight_layout()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=100)
    plt.close(fig)
    io.write_run_manifest(out.parent, args.command, resolved_config(args))
    return {"panel": str(out)}


# -- entry point --------------------------------------------------------------

def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("FPKIT_THREADS")
    if env is None:
        return 1
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"FPKIT_THREADS must be an integer, got {env!r}") from None


def _fail(exc):
    reason = {"error": type(exc).__name__, "exit_code": exc.exit_code, "message": str(exc)}
    print(json.dumps(reason), file=sys.stderr)
    return exc.exit_code


def main(argv=None):
    try:
        args = parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        threads = _threads(args)
        if threads < 1:
            raise ConfigError("thread count must be >= 1")
        from . import autodiff as ad
        ad.configure_threads(threads)
        result = args.func(args)
    except FPError as exc:
        return _fail(exc)
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
