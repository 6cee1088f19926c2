"""Command-line interface: ``nlrestore {distort,restore,train-denoiser,eval}``.

Every option can also be given in a TOML file passed with ``--config``;
explicit flags win over file values, which win over built-in defaults.
Tables in the file are flattened, so ``[guidance] zeta = 0.3`` and a
top-level ``zeta = 0.3`` mean the same thing.

Exit codes: 0 success, 1 user or I/O error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .distortions import (
    DistortionSpec,
    apply_distortion,
    input_sdr,
    solve_threshold_for_sdr,
)
from .dsp import Signal, StftConfig
from .metrics import RampSpec, lsd, lsd_db, rr_mse, waveform_sdr, write_metrics_csv
from .prior import sinusoid_mixture_prior
from .sampler import (
    DivergenceError,
    GuidanceConfig,
    blind_restore,
    informed_restore,
    karras_schedule,
    restore_segments,
    write_trace_csv,
)
from .toy_denoiser import (
    FrameDenoiser,
    TrainConfig,
    normalize_power,
    train_toy_denoiser,
)
from .wav import read_wav, write_wav
from .waveshapers import MODEL_KINDS, load_shaper, save_shaper

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("nlrestore")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2
WORKERS_ENV = "NLRESTORE_WORKERS"


class UserError(Exception):
    """Bad arguments, unreadable inputs or inconsistent configuration."""


# -- defaults ---------------------------------------------------------------

_DISTORTION = {"kind": "hard_clip", "threshold": None, "target_sdr": None, "hardness": 0.0, "levels": 3}
_STFT = {"window_length": 1024, "hop": 256, "fft_size": 1024, "window_kind": "hann"}
_GUIDANCE = {"zeta": 0.3, "n_op_iters": 20, "op_lr": 0.02, "churn": 0.0, "denoiser_vjp": "exact"}
_SCHEDULE = {"steps": 50, "sigma_min": 1e-4, "sigma_max": 0.5, "rho": 7.0}
_PRIOR = {"checkpoint": None, "prior_freqs": [220.0, 350.0, 560.0], "prior_bandwidth": 15.0, "sigma_data": 0.05}

DEFAULTS = {
    "distort": {**_DISTORTION, "bit_depth": 32, "seed": 0},
    "restore": {
        "model": "ccr",
        "informed": False,
        "true_operator": None,
        "reference": None,
        "segment_length": None,
        "ramp_points": 1000,
        "seed": 0,
        **{f"true_{k}": v for k, v in _DISTORTION.items() if k not in ("threshold", "target_sdr")},
        "true_threshold": None,
        **_PRIOR,
        **_GUIDANCE,
        **_SCHEDULE,
        **_STFT,
    },
    "train-denoiser": {
        "iterations": TrainConfig.iterations,
        "batch_size": TrainConfig.batch_size,
        "learning_rate": TrainConfig.learning_rate,
        "ema_rate": TrainConfig.ema_rate,
        "sigma_min": TrainConfig.sigma_min,
        "sigma_max": TrainConfig.sigma_max,
        "sigma_data": None,
        "frame_size": TrainConfig.frame_size,
        "hidden": list(TrainConfig.hidden),
        "lr_schedule": TrainConfig.lr_schedule,
        "log_interval": TrainConfig.log_interval,
        "seed": 0,
    },
    "eval": {
        "operator": None,
        "true_operator": None,
        "true_kind": "hard_clip",
        "true_threshold": None,
        "true_hardness": 0.0,
        "true_levels": 3,
        "sigma_data": None,
        "ramp_points": 1000,
        "seed": 0,
        **_STFT,
    },
}


# -- config plumbing ----------------------------------------------------------


def _flatten(doc: dict, prefix_ok=True) -> dict:
    flat = {}
    for key, value in doc.items():
        if isinstance(value, dict) and prefix_ok:
            flat.update(_flatten(value, prefix_ok=False))
        else:
            flat[key.replace("-", "_")] = value
    return flat


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return _flatten(tomllib.load(fh))
    except FileNotFoundError as err:
        raise UserError(f"config file not found: {path}") from err
    except tomllib.TOMLDecodeError as err:
        raise UserError(f"{path}: invalid TOML ({err})") from err


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the optional TOML file and explicit flags (in that order)."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        file_cfg = load_toml(args.config)
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise UserError(f"unknown keys in {args.config} for '{command}': {', '.join(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, float) and not np.isfinite(value):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_sidecar(path, command: str, cfg: dict, inputs: dict) -> None:
    """Fully resolved configuration, enough to re-run the command."""
    doc = {
        "command": command,
        "version": __version__,
        "inputs": {k: _jsonable(v) for k, v in inputs.items()},
        "config": {k: _jsonable(v) for k, v in sorted(cfg.items())},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _stft_config(cfg) -> StftConfig:
    return StftConfig(int(cfg["window_length"]), int(cfg["hop"]), int(cfg["fft_size"]), cfg["window_kind"])


def _read(path):
    path = Path(path)
    if not path.is_file():
        raise UserError(f"input file not found: {path}")
    return read_wav(path)


def _true_operator(cfg):
    """Known operator for informed restoration or evaluation, or None."""
    if cfg.get("true_operator"):
        path = Path(cfg["true_operator"])
        if not path.is_file():
            raise UserError(f"operator file not found: {path}")
        return load_shaper(path)
    if cfg.get("true_threshold") is None and cfg["true_kind"] in ("hard_clip", "soft_clip", "wavefold"):
        return None
    return DistortionSpec(
        cfg["true_kind"],
        float(cfg["true_threshold"] if cfg["true_threshold"] is not None else 1.0),
        float(cfg["true_hardness"]),
        int(cfg["true_levels"]),
    )


# -- commands -----------------------------------------------------------------


def cmd_distort(args) -> int:
    cfg = resolve("distort", args)
    x = _read(args.input)
    if cfg["target_sdr"] is not None and cfg["threshold"] is not None:
        raise UserError("give either --threshold or --target-sdr, not both")
    if cfg["target_sdr"] is not None:
        spec = solve_threshold_for_sdr(x, cfg["kind"], float(cfg["target_sdr"]), float(cfg["hardness"]))
    else:
        threshold = 1.0 if cfg["threshold"] is None else float(cfg["threshold"])
        spec = DistortionSpec(cfg["kind"], threshold, float(cfg["hardness"]), int(cfg["levels"]))
    y = apply_distortion(x.samples, spec)
    sdr = input_sdr(x.samples, y)

    out = Path(args.output)
    write_wav(out, Signal(y, x.sample_rate), int(cfg["bit_depth"]))
    cfg["threshold"] = spec.threshold
    write_sidecar(
        out.with_suffix(out.suffix + ".config.json"),
        "distort",
        cfg,
        {"input": args.input, "output": out, "achieved_sdr": sdr, "spec": spec.to_dict()},
    )
    print(f"kind={spec.kind} threshold={spec.threshold:.6g} achieved_sdr={sdr:.4f} dB")
    return EXIT_OK


def _denoiser(cfg, length: int, sample_rate: int):
    if cfg["checkpoint"]:
        path = Path(cfg["checkpoint"])
        if not path.is_file():
            raise UserError(f"checkpoint not found: {path}")
        den = FrameDenoiser.load(path)
        return den, den.sigma_data
    prior = sinusoid_mixture_prior(
        length, sample_rate, tuple(cfg["prior_freqs"]), float(cfg["prior_bandwidth"]), float(cfg["sigma_data"])
    )
    return prior, float(cfg["sigma_data"])


def cmd_restore(args) -> int:
    cfg = resolve("restore", args)
    y = _read(args.input)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    seg = cfg["segment_length"]
    length = int(seg) if seg else len(y)
    denoiser, sigma_data = _denoiser(cfg, length, y.sample_rate)
    schedule = karras_schedule(int(cfg["steps"]), float(cfg["sigma_min"]), float(cfg["sigma_max"]), float(cfg["rho"]))
    guidance = GuidanceConfig(
        float(cfg["zeta"]),
        int(cfg["n_op_iters"]),
        float(cfg["op_lr"]),
        float(cfg["churn"]),
        denoiser_vjp=cfg["denoiser_vjp"],
    )
    stft_cfg = _stft_config(cfg)
    if cfg["model"] not in MODEL_KINDS:
        raise UserError(f"unknown model {cfg['model']!r}; expected one of {MODEL_KINDS}")
    true_op = None
    if cfg["informed"]:
        true_op = _true_operator(cfg)
        if true_op is None:
            raise UserError("--informed needs --true-operator or --true-kind/--true-threshold")
    reference = _read(cfg["reference"]) if cfg["reference"] else None
    if reference is not None and len(reference) != len(y):
        raise UserError(f"reference has {len(reference)} samples, input has {len(y)}")

    write_sidecar(outdir / "config.json", "restore", cfg, {"input": args.input, "outdir": outdir})
    try:
        if seg:
            rep = restore_segments(
                y.samples,
                denoiser,
                length,
                cfg["model"],
                schedule,
                guidance,
                int(cfg["seed"]),
                stft_cfg,
                informed_operator=true_op,
            )
        elif true_op is not None:
            rep = informed_restore(y.samples, denoiser, true_op, schedule, guidance, int(cfg["seed"]), stft_cfg)
        else:
            rep = blind_restore(y.samples, denoiser, cfg["model"], schedule, guidance, int(cfg["seed"]), stft_cfg)
    except DivergenceError as err:
        write_trace_csv(outdir / "trace.csv", err.trace)
        raise

    write_wav(outdir / "restored.wav", Signal(rep.restored, y.sample_rate))
    write_trace_csv(outdir / "trace.csv", rep.trace)
    save_shaper(outdir / "operator.json", rep.operator)
    ramp = RampSpec(sigma_data, int(cfg["ramp_points"])).ramp()
    with open(outdir / "ramp.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["input", "output"])
        for a, b in zip(ramp, rep.operator(ramp)):
            writer.writerow([repr(float(a)), repr(float(b))])

    report = {"mode": "informed" if true_op is not None else "blind", "seed": int(cfg["seed"])}
    if reference is not None:
        report["sdr_input"] = waveform_sdr(reference.samples, y.samples)
        report["sdr_restored"] = waveform_sdr(reference.samples, rep.restored)
        print(f"sdr_input={report['sdr_input']:.3f} dB sdr_restored={report['sdr_restored']:.3f} dB")
    (outdir / "report.json").write_text(json.dumps({k: _jsonable(v) for k, v in report.items()}, indent=2) + "\n")
    print(f"wrote {outdir}/restored.wav operator.json trace.csv ramp.csv (seed {cfg['seed']})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve("train-denoiser", args)
    root = Path(args.dataset)
    if not root.is_dir():
        raise UserError(f"dataset directory not found: {root}")
    files = sorted(root.glob("*.wav"))
    if not files:
        raise UserError(f"no .wav files in {root}")
    signals = normalize_power([read_wav(f) for f in files])
    tcfg = TrainConfig(
        sigma_data=None if cfg["sigma_data"] is None else float(cfg["sigma_data"]),
        sigma_min=float(cfg["sigma_min"]),
        sigma_max=float(cfg["sigma_max"]),
        batch_size=int(cfg["batch_size"]),
        iterations=int(cfg["iterations"]),
        ema_rate=float(cfg["ema_rate"]),
        learning_rate=float(cfg["learning_rate"]),
        lr_schedule=cfg["lr_schedule"],
        frame_size=int(cfg["frame_size"]),
        hidden=tuple(int(h) for h in cfg["hidden"]),
        seed=int(cfg["seed"]),
        log_interval=int(cfg["log_interval"]),
    )
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_sidecar(outdir / "config.json", "train-denoiser", cfg, {"dataset": root, "files": [f.name for f in files]})
    result = train_toy_denoiser(signals, tcfg)
    result.denoiser.save(outdir / "denoiser.json")
    with open(outdir / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for it, value in result.log_rows:
            writer.writerow([it, repr(value)])
    print(
        f"trained {tcfg.iterations} iterations; final loss {result.log_rows[-1][1]:.5f}"
        if result.log_rows
        else f"trained {tcfg.iterations} iterations"
    )
    return EXIT_OK


def _eval_pair(job):
    """Metric rows for one (reference, restored) pair; runs in a worker."""
    name, ref_path, est_path, cfg = job
    ref, est = _read(ref_path), _read(est_path)
    if len(ref) != len(est):
        raise UserError(f"{name}: reference has {len(ref)} samples, restored has {len(est)}")
    stft_cfg = _stft_config(cfg)
    rows = [
        (name, "lsd", "mean_sq_log10", repr(lsd(ref.samples, est.samples, stft_cfg))),
        (name, "lsd", "db", repr(lsd_db(ref.samples, est.samples, stft_cfg))),
        (name, "sdr", "waveform", repr(waveform_sdr(ref.samples, est.samples))),
    ]
    op_path = cfg["operator"]
    true_op = _true_operator(cfg)
    if op_path and Path(op_path).is_file() and true_op is not None:
        est_op = load_shaper(op_path)
        sigma_data = cfg["sigma_data"] or float(np.std(ref.samples))
        res = rr_mse(true_op, est_op, RampSpec(float(sigma_data), int(cfg["ramp_points"])))
        rows += [
            (name, "rr_mse", "linear", repr(res.mse)),
            (name, "rr_mse", "db", repr(res.db)),
            (name, "rr_mse", "flipped", str(int(res.flipped))),
        ]
    else:
        rows += [(name, "rr_mse", v, "absent") for v in ("linear", "db", "flipped")]
    return rows


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as err:
        raise UserError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from err
    if n < 1:
        raise UserError(f"{WORKERS_ENV} must be >= 1, got {n}")
    return n


def cmd_eval(args) -> int:
    cfg = resolve("eval", args)
    ref, est = Path(args.reference), Path(args.restored)
    if ref.is_dir() != est.is_dir():
        raise UserError("reference and restored must both be files or both be directories")
    if ref.is_dir():
        names = sorted(p.name for p in ref.glob("*.wav"))
        missing = [n for n in names if not (est / n).is_file()]
        if not names or missing:
            raise UserError(f"no matching restored files for: {', '.join(missing) or '(empty directory)'}")
        jobs = [(n, ref / n, est / n, cfg) for n in names]
    else:
        jobs = [(est.name, ref, est, cfg)]
    workers = _workers()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_pair, jobs))
    else:
        results = [_eval_pair(j) for j in jobs]
    rows = [r for rs in results for r in rs]
    out = Path(args.output)
    write_metrics_csv(out, rows)
    write_sidecar(
        out.with_suffix(out.suffix + ".config.json"),
        "eval",
        cfg,
        {"reference": ref, "restored": est, "workers": workers},
    )
    for row in rows:
        print(",".join(str(v) for v in row))
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_distortion(p, prefix=""):
    dash = f"--{prefix.replace('_', '-')}" if prefix else "--"
    p.add_argument(
        f"{dash}kind",
        dest=f"{prefix}kind",
        choices=("hard_clip", "soft_clip", "wavefold", "quantize", "half_wave_rectify"),
    )
    p.add_argument(f"{dash}threshold", dest=f"{prefix}threshold", type=float)
    p.add_argument(f"{dash}hardness", dest=f"{prefix}hardness", type=float)
    p.add_argument(f"{dash}levels", dest=f"{prefix}levels", type=int)


def _add_stft(p):
    p.add_argument("--window-length", type=int)
    p.add_argument("--hop", type=int)
    p.add_argument("--fft-size", type=int)
    p.add_argument("--window-kind")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlrestore", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distort", help="apply a ground-truth distortion to a WAV file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--config")
    _add_distortion(p)
    p.add_argument("--target-sdr", type=float, help="solve the threshold for this input SDR (dB)")
    p.add_argument("--bit-depth", type=int, choices=(16, 24, 32))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_distort)

    p = sub.add_parser("restore", help="blind or informed restoration of a distorted WAV file")
    p.add_argument("input")
    p.add_argument("outdir")
    p.add_argument("--config")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--informed", action="store_true", default=None, help="use a known operator")
    p.add_argument("--true-operator", help="operator.json of a known waveshaper")
    _add_distortion(p, "true_")
    p.add_argument("--reference", help="clean WAV for reporting SDRs")
    p.add_argument("--checkpoint", help="trained denoiser checkpoint (default: analytic prior)")
    p.add_argument("--prior-freqs", type=float, nargs="+")
    p.add_argument("--prior-bandwidth", type=float)
    p.add_argument("--sigma-data", type=float)
    p.add_argument("--zeta", type=float)
    p.add_argument("--n-op-iters", type=int)
    p.add_argument("--op-lr", type=float)
    p.add_argument("--churn", type=float)
    p.add_argument("--denoiser-vjp", choices=("exact", "identity"))
    p.add_argument("--steps", type=int)
    p.add_argument("--sigma-min", type=float)
    p.add_argument("--sigma-max", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--segment-length", type=int)
    p.add_argument("--ramp-points", type=int)
    p.add_argument("--seed", type=int)
    _add_stft(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("train-denoiser", help="train the toy frame denoiser on a directory of WAVs")
    p.add_argument("dataset")
    p.add_argument("outdir")
    p.add_argument("--config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--ema-rate", type=float)
    p.add_argument("--sigma-min", type=float)
    p.add_argument("--sigma-max", type=float)
    p.add_argument("--sigma-data", type=float)
    p.add_argument("--frame-size", type=int)
    p.add_argument("--hidden", type=int, nargs="+")
    p.add_argument("--lr-schedule", choices=("constant", "cosine"))
    p.add_argument("--log-interval", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="signal and operator metrics of a restoration")
    p.add_argument("reference", help="clean WAV file or directory")
    p.add_argument("restored", help="restored WAV file or directory")
    p.add_argument("output", help="metrics CSV to write")
    p.add_argument("--config")
    p.add_argument("--operator", help="estimated operator.json")
    p.add_argument("--true-operator")
    _add_distortion(p, "true_")
    p.add_argument("--sigma-data", type=float, help="ramp scale (default: std of the reference)")
    p.add_argument("--ramp-points", type=int)
    p.add_argument("--seed", type=int)
    _add_stft(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ArithmeticError as err:
        print(f"nlrestore: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, ValueError, OSError) as err:
        print(f"nlrestore: error: {err}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
