"""Command-line entry point.

Subcommands cover controller analysis, training, evaluation, inference,
latency measurement, and fusion-gate inspection. Exit codes: 0 on success,
1 on runtime failures (I/O, divergence, corrupt checkpoints), 2 on usage
errors. All randomness flows from --seed, and every artifact-producing run
writes a manifest of its fully resolved configuration, so reruns with equal
seeds produce identical bytes (bench wall-clock columns excepted).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import ops, pnm
from .analysis import (ControllerGains, PlantSpec, SimulationDiverged,
                       frequency_response, locality_ratio,
                       receptive_field_expansion, simulate_step)
from .checkpoint import CheckpointError, load_checkpoint
from .data import (ManifestDataset, SceneDataset, SceneSpec, TrainConfig,
                   export_dataset)
from .losses import LossWeights
from .network import PRESETS, build_pidnet
from .tensor import ShapeError, Tensor
from .train import TrainingDiverged, bench, eval_loop, train_loop

GATE_BLOCKS = ("pag1", "pag2", "fusion")


class UsageError(Exception):
    """Bad flag values; maps to exit code 2."""


class RuntimeFailure(Exception):
    """Operational failure (I/O, divergence); maps to exit code 1."""


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        h, w = int(h), int(w)
    except ValueError:
        raise UsageError(f"--size must look like 64x64, got {text!r}")
    if h < 8 or w < 8:
        raise UsageError(f"--size too small: {text}")
    return h, w


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise UsageError(f"{flag} must be comma-separated integers, got {text!r}")


def _emit(lines, out_path):
    payload = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w") as f:
            f.write(payload)
    else:
        sys.stdout.write(payload)


# ---------------------------------------------------------------------------
# analyze


def _cmd_analyze_pid_step(args) -> int:
    try:
        gains = ControllerGains(kp=args.kp, ki=args.ki, kd=args.kd)
        plant = PlantSpec(natural_freq=args.plant_wn, damping=args.plant_zeta)
        if args.steps < 1:
            raise ValueError(f"--steps must be >= 1, got {args.steps}")
        horizon = args.steps * args.dt
    except ValueError as e:
        raise UsageError(str(e))
    try:
        result = simulate_step(gains, plant, dt=args.dt, horizon=horizon)
    except ValueError as e:
        raise UsageError(str(e))
    except SimulationDiverged as e:
        raise RuntimeFailure(str(e))
    lines = ["t,y,e,c"]
    for t, y, e, c in zip(result.t, result.y, result.e, result.c):
        lines.append(f"{t:.10g},{y:.10g},{e:.10g},{c:.10g}")
    lines.append(f"# overshoot,{result.overshoot:.10g}")
    _emit(lines, args.out)
    return 0


def _cmd_analyze_freq(args) -> int:
    try:
        gains = ControllerGains(kp=args.kp, ki=args.ki, kd=args.kd)
        if args.n < 2:
            raise ValueError(f"--n must be >= 2, got {args.n}")
        omega = np.linspace(args.omega_min, args.omega_max, args.n)
        resp = frequency_response(gains, omega)
    except ValueError as e:
        raise UsageError(str(e))
    lines = ["omega,p_mag,i_mag,d_mag,total_mag"]
    for row in zip(resp.omega, resp.p_mag, resp.i_mag, resp.d_mag,
                   resp.total_mag):
        lines.append(",".join(f"{v:.10g}" for v in row))
    _emit(lines, args.out)
    return 0


def _cmd_analyze_locality(args) -> int:
    kernels = _parse_int_list(args.kernels, "--kernels")
    strides = _parse_int_list(args.strides, "--strides")
    try:
        expansion = receptive_field_expansion(kernels, strides)
        frac = locality_ratio(expansion, args.window)
    except ValueError as e:
        raise UsageError(str(e))
    sys.stdout.write(f"{frac.numerator}/{frac.denominator} {float(frac):.6f}\n")
    return 0


# ---------------------------------------------------------------------------
# config resolution: preset < config file < flags


_MODEL_KEYS = ("fusion", "context", "classes")
_TRAIN_KEYS = ("size", "iters", "lr", "seed", "ohem",
               "lambda0", "lambda1", "lambda2", "lambda3", "bnd_thresh")


def _load_config_file(path) -> dict:
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise RuntimeFailure(f"cannot read config file: {e}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config file is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(data) - set(_MODEL_KEYS) - set(_TRAIN_KEYS) - {"config"}
    if unknown:
        raise UsageError(f"unknown config file keys: {sorted(unknown)}")
    return data


def _setting(args, file_cfg: dict, key: str, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in file_cfg:
        return file_cfg[key]
    return default


def _resolve_model_config(args, file_cfg: dict):
    preset_name = _setting(args, file_cfg, "config", "tiny")
    if preset_name not in PRESETS:
        raise UsageError(
            f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}"
        )
    cfg = PRESETS[preset_name]
    overrides = {}
    fusion = _setting(args, file_cfg, "fusion", None)
    if fusion is not None:
        overrides["fusion"] = fusion
    context = _setting(args, file_cfg, "context", None)
    if context is not None:
        overrides["context"] = context
    classes = _setting(args, file_cfg, "classes", None)
    if classes is not None:
        overrides["num_classes"] = int(classes)
    if overrides:
        candidate = replace(cfg, **overrides)
        if candidate != cfg:
            cfg = replace(candidate, name="custom")
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e))
    return cfg


def _config_manifest(model_cfg, train_cfg: TrainConfig | None,
                     weights: LossWeights | None, extra: dict) -> str:
    payload = {"model": {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in vars(model_cfg).items()}}
    if train_cfg is not None:
        payload["train"] = {k: (list(v) if isinstance(v, tuple) else v)
                            for k, v in vars(train_cfg).items()}
    if weights is not None:
        payload["loss_weights"] = dict(vars(weights))
    payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# train / eval / infer / bench / inspect


def _cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config_file) if args.config_file else {}
    model_cfg = _resolve_model_config(args, file_cfg)
    h, w = _parse_size(_setting(args, file_cfg, "size", "64x64"))
    try:
        weights = LossWeights(
            lambda0=float(_setting(args, file_cfg, "lambda0", 0.4)),
            lambda1=float(_setting(args, file_cfg, "lambda1", 20.0)),
            lambda2=float(_setting(args, file_cfg, "lambda2", 1.0)),
            lambda3=float(_setting(args, file_cfg, "lambda3", 1.0)),
            boundary_threshold=float(_setting(args, file_cfg, "bnd_thresh", 0.8)),
        )
        ohem = _setting(args, file_cfg, "ohem", False)
        train_cfg = TrainConfig(
            iters=int(_setting(args, file_cfg, "iters", 200)),
            base_lr=float(_setting(args, file_cfg, "lr", 0.02)),
            seed=int(_setting(args, file_cfg, "seed", 0)),
            crop=(h, w),
            ohem=bool(ohem),
        )
    except ValueError as e:
        raise UsageError(str(e))
    if (h % model_cfg.min_divisor) or (w % model_cfg.min_divisor):
        raise UsageError(
            f"--size {h}x{w} must be a multiple of {model_cfg.min_divisor} "
            f"for config {model_cfg.name!r}"
        )

    spec = SceneSpec(seed=train_cfg.seed, height=h, width=w,
                     num_classes=model_cfg.num_classes)
    train_set = SceneDataset(spec, 64)
    val_set = SceneDataset(spec, 16, offset=100000)
    model = build_pidnet(model_cfg, seed=train_cfg.seed)

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "run_config.json"), "w") as f:
        f.write(_config_manifest(model_cfg, train_cfg, weights,
                                 {"command": "train"}))
    export_dataset(spec, len(val_set), os.path.join(args.out, "val"),
                   offset=val_set.offset)
    try:
        result = train_loop(model, train_cfg, train_set, val_set,
                            weights=weights, out_dir=args.out)
    except (TrainingDiverged, ValueError) as e:
        raise RuntimeFailure(str(e))
    sys.stdout.write(result.csv_rows[0] + "\n" + result.csv_rows[-1] + "\n")
    return 0


def _load_model(path):
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise RuntimeFailure(f"cannot read checkpoint: {e}")
    except CheckpointError as e:
        raise RuntimeFailure(f"bad checkpoint: {e}")


def _read_image(path) -> np.ndarray:
    try:
        return pnm.read_ppm(path)
    except OSError as e:
        raise RuntimeFailure(f"cannot read image: {e}")
    except pnm.PnmError as e:
        raise RuntimeFailure(f"bad image file: {e}")


def _cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    try:
        dataset = ManifestDataset(args.manifest)
    except OSError as e:
        raise RuntimeFailure(f"cannot read manifest: {e}")
    try:
        result = eval_loop(model, dataset)
    except (ValueError, ShapeError, pnm.PnmError, OSError) as e:
        raise RuntimeFailure(str(e))
    lines = ["metric,value"]
    lines.append(f"miou,{result.miou:.8g}")
    lines.append(f"boundary_f,{result.boundary_f:.8g}")
    for c, iou in enumerate(result.ious):
        val = "nan" if np.isnan(iou) else f"{iou:.8g}"
        lines.append(f"iou_class_{c},{val}")
    _emit(lines, args.out)
    return 0


def _cmd_infer(args) -> int:
    model = _load_model(args.ckpt)
    image = _read_image(args.image)
    model.eval()
    h, w = image.shape[1:]
    try:
        out = model.forward(Tensor(image[None]))
    except ShapeError as e:
        raise RuntimeFailure(str(e))
    logits = ops.bilinear_resize(out.main_logits, h, w)
    labels = np.argmax(logits.data[0], axis=0).astype(np.uint8)
    try:
        pnm.write_pgm(args.out, labels)
        if args.boundary:
            boundary = ops.bilinear_resize(out.boundary_logits, h, w).data[0, 0]
            with np.errstate(over="ignore"):
                prob = 1.0 / (1.0 + np.exp(-boundary.astype(np.float64)))
            pnm.write_pgm(args.boundary, np.rint(prob * 255).astype(np.uint8))
    except OSError as e:
        raise RuntimeFailure(f"cannot write output: {e}")
    return 0


def _cmd_bench(args) -> int:
    file_cfg = _load_config_file(args.config_file) if args.config_file else {}
    model_cfg = _resolve_model_config(args, file_cfg)
    h, w = _parse_size(_setting(args, file_cfg, "size", "64x64"))
    if (h % model_cfg.min_divisor) or (w % model_cfg.min_divisor):
        raise UsageError(
            f"--size {h}x{w} must be a multiple of {model_cfg.min_divisor} "
            f"for config {model_cfg.name!r}"
        )
    if args.warmup < 0 or args.runs < 1:
        raise UsageError("need --warmup >= 0 and --runs >= 1")
    seed = int(_setting(args, file_cfg, "seed", 0))
    model = build_pidnet(model_cfg, seed=seed)
    try:
        result = bench(model, h, w, warmup=args.warmup, runs=args.runs,
                       fuse_bn=args.fuse_bn, seed=seed)
    except RuntimeError as e:
        raise RuntimeFailure(str(e))
    params = model.count_params()
    lines = [
        "config,height,width,fused,params,median_s,p5_s,p95_s,fps",
        f"{model_cfg.name},{h},{w},{int(result.fused)},{params},"
        f"{result.median_s:.6g},{result.p5_s:.6g},{result.p95_s:.6g},"
        f"{result.fps:.6g}",
    ]
    _emit(lines, args.out)
    return 0


def _cmd_inspect(args) -> int:
    model = _load_model(args.ckpt)
    image = _read_image(args.image)
    model.eval()
    taps: dict[str, Tensor] = {}
    try:
        model.forward(Tensor(image[None]), taps=taps)
    except ShapeError as e:
        raise RuntimeFailure(str(e))
    valid = [b for b in GATE_BLOCKS if f"{b}.sigma" in taps]
    if args.block not in valid:
        sys.stderr.write(
            f"unknown block {args.block!r}; valid blocks: {', '.join(valid)}\n"
        )
        return 2
    groups = {"p-in": f"{args.block}.p_in", "i-in": f"{args.block}.i_in",
              "d-in": f"{args.block}.d_in", "sigma": f"{args.block}.sigma",
              "out": args.block}
    os.makedirs(args.out, exist_ok=True)
    for group, tap in sorted(groups.items()):
        if tap not in taps:
            continue
        data = taps[tap].data[0]
        for c in range(data.shape[0]):
            path = os.path.join(args.out, f"{args.block}_{group}_c{c:03d}.pgm")
            pnm.write_pgm_normalized(path, data[c])
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pidnet",
        description="Three-branch segmentation toolkit with controller analysis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="controller analysis tools")
    asub = analyze.add_subparsers(dest="analysis", required=True)

    step = asub.add_parser("pid-step", help="closed-loop step response CSV")
    step.add_argument("--kp", type=float, default=1.0)
    step.add_argument("--ki", type=float, default=0.0)
    step.add_argument("--kd", type=float, default=0.0)
    step.add_argument("--plant-wn", type=float, default=1.0)
    step.add_argument("--plant-zeta", type=float, default=0.5)
    step.add_argument("--dt", type=float, default=0.01)
    step.add_argument("--steps", type=int, default=3000)
    step.add_argument("--out", default=None)
    step.set_defaults(func=_cmd_analyze_pid_step)

    freq = asub.add_parser("freq", help="controller frequency magnitudes CSV")
    freq.add_argument("--kp", type=float, default=1.0)
    freq.add_argument("--ki", type=float, default=0.0)
    freq.add_argument("--kd", type=float, default=0.0)
    freq.add_argument("--omega-min", type=float, default=0.01)
    freq.add_argument("--omega-max", type=float, default=float(np.pi))
    freq.add_argument("--n", type=int, default=256)
    freq.add_argument("--out", default=None)
    freq.set_defaults(func=_cmd_analyze_freq)

    loc = asub.add_parser("locality", help="stacked-conv tap locality ratio")
    loc.add_argument("--kernels", required=True)
    loc.add_argument("--strides", required=True)
    loc.add_argument("--window", type=int, default=1)
    loc.set_defaults(func=_cmd_analyze_locality)

    train = sub.add_parser("train", help="train on the synthetic corpus")
    train.add_argument("--config", choices=sorted(PRESETS), default=None)
    train.add_argument("--config-file", default=None)
    train.add_argument("--fusion", choices=("pag_bag", "add"), default=None)
    train.add_argument("--context", choices=("pappm", "dappm"), default=None)
    train.add_argument("--classes", type=int, default=None)
    train.add_argument("--size", default=None, help="scene extent, e.g. 64x64")
    train.add_argument("--iters", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--ohem", action="store_true", default=None)
    train.add_argument("--lambda0", type=float, default=None)
    train.add_argument("--lambda1", type=float, default=None)
    train.add_argument("--lambda2", type=float, default=None)
    train.add_argument("--lambda3", type=float, default=None)
    train.add_argument("--bnd-thresh", type=float, default=None)
    train.add_argument("--out", required=True)
    train.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=_cmd_eval)

    infer = sub.add_parser("infer", help="predict a label map for one image")
    infer.add_argument("--ckpt", required=True)
    infer.add_argument("--image", required=True)
    infer.add_argument("--out", required=True)
    infer.add_argument("--boundary", default=None)
    infer.set_defaults(func=_cmd_infer)

    bn = sub.add_parser("bench", help="single-image forward latency")
    bn.add_argument("--config", choices=sorted(PRESETS), default=None)
    bn.add_argument("--config-file", default=None)
    bn.add_argument("--fusion", choices=("pag_bag", "add"), default=None)
    bn.add_argument("--context", choices=("pappm", "dappm"), default=None)
    bn.add_argument("--classes", type=int, default=None)
    bn.add_argument("--size", default=None)
    bn.add_argument("--warmup", type=int, default=3)
    bn.add_argument("--runs", type=int, default=20)
    bn.add_argument("--fuse-bn", action="store_true")
    bn.add_argument("--seed", type=int, default=None)
    bn.add_argument("--out", default=None)
    bn.set_defaults(func=_cmd_bench)

    insp = sub.add_parser("inspect", help="dump fusion-gate maps as PGMs")
    insp.add_argument("--ckpt", required=True)
    insp.add_argument("--image", required=True)
    insp.add_argument("--block", required=True)
    insp.add_argument("--out", required=True)
    insp.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    threads = os.environ.get("PIDNET_THREADS")
    if threads is not None:
        try:
            int(threads)
        except ValueError:
            sys.stderr.write(f"PIDNET_THREADS must be an integer, got {threads!r}\n")
            return 2
    try:
        return args.func(args)
    except UsageError as e:
        sys.stderr.write(f"error: {e}\n")
        return 2
    except RuntimeFailure as e:
        sys.stderr.write(f"error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
