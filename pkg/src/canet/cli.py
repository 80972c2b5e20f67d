"""Command-line entry point: counting, benchmarking, gradient checking,
synthetic training, evaluation, and inference.

    canet {count|bench|gradcheck|train-synth|eval|infer} [flags]

Configuration lives in an INI file with [model], [train], and [synth]
sections; every flag has a config-file equivalent and flags win on
conflict. Sizes are written WIDTHxHEIGHT (e.g. 1024x512). Exit codes:
0 success, 1 check failure, 2 usage/config/data error.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import analysis, fileio, gradcheck, metrics, train
from .errors import CanetError, ConfigError, DataError
from .fca import VARIANTS, FcaConfig
from .model import CANet, CanetConfig
from .tensor import Tensor

BACKBONES = ("tiny", "mobilenet_v2", "resnet18")

_MODEL_KEYS = frozenset(
    {"backbone", "num_classes", "deconv_channels", "fusion_channels", "variant", "input_size"}
)
_TRAIN_KEYS = frozenset(
    {
        "init_lr",
        "max_epoch",
        "poly_power",
        "batch_size",
        "weight_decay",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "scale_range",
        "crop",
        "ignore_label",
        "class_weights",
        "decoupled_decay",
    }
)
_SYNTH_KEYS = frozenset({"samples", "val_samples", "size", "noise_sigma"})


# ---------------------------------------------------------------------------
# config plumbing


def _parse_size(text: str, what: str = "size") -> Tuple[int, int]:
    """'WxH' -> (height, width)."""
    parts = text.lower().split("x")
    try:
        if len(parts) != 2:
            raise ValueError
        w, h = int(parts[0]), int(parts[1])
        if w < 1 or h < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{what} must look like 1024x512 (WxH), got {text!r}") from None
    return h, w


def _to_int(key: str, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {text!r}") from None


def _to_float(key: str, text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {text!r}") from None


def _to_bool(key: str, text: str) -> bool:
    states = {"1": True, "true": True, "yes": True, "on": True,
              "0": False, "false": False, "no": False, "off": False}
    try:
        return states[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"{key} must be a boolean, got {text!r}") from None


def _to_float_pair(key: str, text: str) -> Tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"{key} must be two comma-separated numbers, got {text!r}")
    return _to_float(key, parts[0]), _to_float(key, parts[1])


def _to_crop(key: str, text: str) -> Tuple[int, int]:
    if "x" in text.lower():
        return _parse_size(text, key)
    n = _to_int(key, text)
    return n, n


def _to_weights(key: str, text: str):
    if text.strip() == "auto":
        return "auto"
    return [_to_float(key, p) for p in text.split(",")]


def _read_config(path: Optional[str]) -> Dict[str, Dict[str, str]]:
    if path is None:
        return {}
    cp = configparser.ConfigParser()
    try:
        with open(path) as f:
            cp.read_file(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror or e}") from None
    except configparser.Error as e:
        raise ConfigError(f"bad config file {path}: {e}") from None
    known = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "synth": _SYNTH_KEYS}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}] in {path}")
        for key in cp[section]:
            if key not in known[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}] of {path}")
    return {s: dict(cp[s]) for s in cp.sections()}


def _pick(key, flag_value, section, convert, default=None):
    """Layered lookup: flag beats config file beats default."""
    if flag_value is not None:
        return flag_value
    if key in section:
        return convert(key, section[key])
    return default


def _model_config(args, sections, defaults: Optional[dict] = None) -> CanetConfig:
    model = sections.get("model", {})
    d = defaults or {}
    flag_size = _parse_size(args.input_size, "--input-size") if args.input_size else None
    picked = {
        "backbone": _pick("backbone", args.backbone, model, lambda _, v: v, d.get("backbone")),
        "num_classes": _pick("num_classes", args.num_classes, model, _to_int, d.get("num_classes")),
        "deconv_channels": _pick(
            "deconv_channels", args.deconv_channels, model, _to_int, d.get("deconv_channels")
        ),
        "input_size": _pick(
            "input_size", flag_size, model, lambda k, v: _parse_size(v, k), d.get("input_size")
        ),
    }
    fca_picked = {
        "fusion_channels": _pick(
            "fusion_channels", args.fusion_channels, model, _to_int, d.get("fusion_channels")
        ),
        "variant": _pick("variant", args.variant, model, lambda _, v: v, d.get("variant")),
    }
    if fca_picked["variant"] is not None and fca_picked["variant"] not in VARIANTS:
        raise ConfigError(
            f"unknown attention variant {fca_picked['variant']!r}; choose from {', '.join(VARIANTS)}"
        )
    if picked["backbone"] is not None and picked["backbone"] not in BACKBONES:
        raise ConfigError(
            f"unknown backbone {picked['backbone']!r}; choose from {', '.join(BACKBONES)}"
        )
    kwargs = {k: v for k, v in picked.items() if v is not None}
    fca_kwargs = {k: v for k, v in fca_picked.items() if v is not None}
    return CanetConfig(fca=FcaConfig(**fca_kwargs), **kwargs)


def _train_config(args, sections, defaults: Optional[dict] = None) -> train.TrainConfig:
    section = sections.get("train", {})
    d = defaults or {}
    convert = {
        "init_lr": _to_float,
        "max_epoch": _to_int,
        "poly_power": _to_float,
        "batch_size": _to_int,
        "weight_decay": _to_float,
        "adam_beta1": _to_float,
        "adam_beta2": _to_float,
        "adam_eps": _to_float,
        "scale_range": _to_float_pair,
        "crop": _to_crop,
        "ignore_label": _to_int,
        "class_weights": _to_weights,
        "decoupled_decay": _to_bool,
    }
    flags = {
        "init_lr": getattr(args, "lr", None),
        "max_epoch": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
    }
    kwargs = {}
    for key, conv in convert.items():
        value = _pick(key, flags.get(key), section, conv, d.get(key))
        if value is not None:
            kwargs[key] = value
    return train.TrainConfig(**kwargs)


def _write_config(path: Path, model: CanetConfig, tc: train.TrainConfig, synth: dict) -> None:
    """Record the fully resolved configuration next to the artifacts."""
    cp = configparser.ConfigParser()
    h, w = model.input_size
    cp["model"] = {
        "backbone": model.backbone,
        "num_classes": str(model.num_classes),
        "deconv_channels": str(model.deconv_channels),
        "fusion_channels": str(model.fca.fusion_channels),
        "variant": model.fca.variant,
        "input_size": f"{w}x{h}",
    }
    weights = tc.class_weights
    ch, cw = tc.crop
    cp["train"] = {
        "init_lr": repr(tc.init_lr),
        "max_epoch": str(tc.max_epoch),
        "poly_power": repr(tc.poly_power),
        "batch_size": str(tc.batch_size),
        "weight_decay": repr(tc.weight_decay),
        "adam_beta1": repr(tc.adam_beta1),
        "adam_beta2": repr(tc.adam_beta2),
        "adam_eps": repr(tc.adam_eps),
        "scale_range": f"{tc.scale_range[0]},{tc.scale_range[1]}",
        "crop": f"{cw}x{ch}",
        "ignore_label": str(tc.ignore_label),
        "class_weights": weights if isinstance(weights, str) else ",".join(map(repr, weights)),
        "decoupled_decay": str(tc.decoupled_decay).lower(),
    }
    cp["synth"] = {k: repr(v) for k, v in synth.items()}
    with open(path, "w") as f:
        cp.write(f)


# ---------------------------------------------------------------------------
# commands


def cmd_count(args) -> int:
    sections = _read_config(args.config)
    config = _model_config(args, sections)
    size = _parse_size(args.input_size, "--input-size") if args.input_size else None
    report = analysis.cost_report(config, input_size=size, convention=args.convention)
    print(report.render_machine() if args.machine else report.render())
    return 0


def cmd_bench(args) -> int:
    sections = _read_config(args.config)
    config = _model_config(args, sections)
    size = _parse_size(args.input_size, "--input-size") if args.input_size else None
    report = analysis.bench_inference(
        config, input_size=size, iterations=args.iters, warmup=args.warmup, seed=args.seed
    )
    print(report.render())
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(seeds=args.seeds, base_seed=args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  {status}")
    failing = [r.name for r in results if not r.passed]
    if failing:
        print(f"gradcheck failed for: {', '.join(failing)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed (threshold {results[0].threshold:g})")
    return 0


def cmd_train_synth(args) -> int:
    sections = _read_config(args.config)
    synth_section = sections.get("synth", {})
    synth = {
        "samples": _pick("samples", args.samples, synth_section, _to_int, 360),
        "val_samples": _pick("val_samples", args.val_samples, synth_section, _to_int, 32),
        "size": _pick("size", args.size, synth_section, _to_int, 32),
        "noise_sigma": _pick("noise_sigma", args.noise_sigma, synth_section, _to_float, 0.1),
    }
    size = synth["size"]
    config = _model_config(
        args,
        sections,
        defaults={
            "backbone": "tiny",
            "num_classes": 3,
            "deconv_channels": 32,
            "fusion_channels": 32,
            "input_size": (size, size),
        },
    )
    # Defaults tuned for the toy task: small inputs want a hot learning
    # rate and no scale jitter (at 32px a 0.5× crop destroys the shapes).
    tc = _train_config(
        args,
        sections,
        defaults={"init_lr": 1e-2, "scale_range": (1.0, 1.0), "crop": (size, size)},
    )

    out = Path(args.out)
    val_dir = out / "val"
    val_dir.mkdir(parents=True, exist_ok=True)
    _write_config(out / "config.ini", config, tc, synth)

    data = train.make_synthetic_dataset(
        config.num_classes,
        synth["samples"] + synth["val_samples"],
        size,
        args.seed,
        noise_sigma=synth["noise_sigma"],
    )
    train_set, val_set = data[: synth["samples"]], data[synth["samples"] :]
    print(
        f"training {config.backbone} on {config.num_classes}-class synthetic task: "
        f"{len(train_set)} train / {len(val_set)} val samples at {size}x{size}",
        flush=True,
    )
    model = CANet(config, seed=args.seed)
    report = train.train_loop(
        model,
        train_set,
        val_set,
        tc,
        seed=args.seed,
        callback=lambda r: print(r.render(), flush=True),
        checkpoint_path=str(out / "weights.canw"),
    )
    (out / "report.txt").write_text(report.render() + "\n")
    for i, s in enumerate(val_set):
        fileio.save_ctnsr(str(val_dir / f"sample_{i:03d}.ctnsr"), train.normalize_image(s.image))
        fileio.save_pgm(str(val_dir / f"sample_{i:03d}.pgm"), s.label.astype(np.uint8))
    print(report.render().splitlines()[-1])
    return 0


def cmd_eval(args) -> int:
    gt_dir, pred_dir = Path(args.gt_dir), Path(args.pred_dir)
    if not gt_dir.is_dir():
        raise DataError(f"{gt_dir}: not a directory")
    if not pred_dir.is_dir():
        raise DataError(f"{pred_dir}: not a directory")
    gt_files = sorted(p for p in gt_dir.iterdir() if p.suffix == ".pgm")
    if not gt_files:
        raise DataError(f"{gt_dir}: no .pgm label maps found")
    pairs = []
    for g in gt_files:
        p = pred_dir / g.name
        if not p.is_file():
            raise DataError(f"{p}: missing prediction for {g.name}")
        pairs.append((fileio.load_pgm(str(p)), fileio.load_pgm(str(g))))
    classes = args.classes
    if classes is None:
        observed = 0
        for pred, gt in pairs:
            for a in (pred, gt):
                kept = a[a != args.ignore_label]
                if kept.size:
                    observed = max(observed, int(kept.max()) + 1)
        classes = max(observed, 2)
    cm = metrics.ConfusionMatrix(classes, args.ignore_label)
    for pred, gt in pairs:
        cm.accumulate(pred, gt)
    print(metrics.render_report(cm))
    return 0


def cmd_infer(args) -> int:
    sections = _read_config(args.config)
    config = _model_config(args, sections)
    suffix = Path(args.image).suffix.lower()
    if suffix == ".ppm":
        rgb = fileio.load_ppm(args.image)
        x = train.normalize_image(rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)
    elif suffix == ".ctnsr":
        x = fileio.load_ctnsr(args.image)
        if x.ndim != 3 or x.shape[0] != 3:
            raise DataError(f"{args.image}: expected a 3xHxW image tensor, got shape {x.shape}")
    else:
        raise DataError(f"{args.image}: unsupported input format {suffix!r} (need .ppm or .ctnsr)")
    model = CANet(config)
    model.load_weights(args.weights)
    model.eval()
    logits = model(Tensor(x[None]))
    pred = np.argmax(logits.data, axis=1)[0].astype(np.uint8)
    fileio.save_pgm(args.out, pred)
    if args.logits:
        fileio.save_ctnsr(args.logits, logits.data[0])
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(sp) -> None:
    sp.add_argument("--config", metavar="FILE", help="INI config file (flags win on conflict)")
    sp.add_argument("--backbone", choices=BACKBONES, help="context-branch feature extractor")
    sp.add_argument("--classes", dest="num_classes", type=int, metavar="N",
                    help="number of output classes")
    sp.add_argument("--deconv-channels", type=int, metavar="N",
                    help="channels used to merge the two context stages")
    sp.add_argument("--fusion-channels", type=int, metavar="N",
                    help="channels inside the attention fusion block")
    sp.add_argument("--variant", choices=VARIANTS, help="attention fusion variant")
    sp.add_argument("--input-size", metavar="WxH", help="input extents, e.g. 1024x512")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canet",
        description="Two-branch semantic segmentation with attention fusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("count", help="parameter and FLOP breakdown")
    _add_model_flags(p)
    p.add_argument("--convention", choices=analysis.CONVENTIONS, default="mac",
                   help="FLOP counting convention (default: one MAC = one FLOP)")
    p.add_argument("--machine", action="store_true", help="tab-separated output for scripts")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("bench", help="inference latency benchmark")
    _add_model_flags(p)
    p.add_argument("--iters", type=int, default=100, metavar="N",
                   help="timed iterations (default 100)")
    p.add_argument("--warmup", type=int, default=1, metavar="N",
                   help="untimed warmup runs (default 1)")
    p.add_argument("--seed", type=int, default=0, help="model/input seed")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--seed", type=int, default=0, help="base random seed")
    p.add_argument("--seeds", type=int, default=20, metavar="N",
                   help="random restarts per check (default 20)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-synth", help="train on a built-in synthetic segmentation task")
    _add_model_flags(p)
    p.add_argument("--out", required=True, metavar="DIR",
                   help="output directory (report, weights, validation set)")
    p.add_argument("--epochs", type=int, metavar="N", help="training epochs")
    p.add_argument("--lr", type=float, metavar="LR", help="initial learning rate")
    p.add_argument("--batch-size", type=int, metavar="N", help="samples per step")
    p.add_argument("--samples", type=int, metavar="N", help="training samples (default 360)")
    p.add_argument("--val-samples", type=int, metavar="N", help="validation samples (default 32)")
    p.add_argument("--size", type=int, metavar="N", help="square sample extent (default 32)")
    p.add_argument("--noise-sigma", type=float, metavar="S", help="image noise level (default 0.1)")
    p.add_argument("--seed", type=int, default=0, help="data/init/shuffle seed")
    p.set_defaults(func=cmd_train_synth)

    p = sub.add_parser("eval", help="score predicted label maps against ground truth")
    p.add_argument("--pred-dir", required=True, metavar="DIR", help="predicted .pgm label maps")
    p.add_argument("--gt-dir", required=True, metavar="DIR", help="ground-truth .pgm label maps")
    p.add_argument("--classes", type=int, metavar="N",
                   help="number of classes (default: inferred from the data)")
    p.add_argument("--ignore-label", type=int, default=255, metavar="V",
                   help="label value excluded from scoring (default 255)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one image with trained weights")
    _add_model_flags(p)
    p.add_argument("--weights", required=True, metavar="FILE", help="checkpoint (.canw)")
    p.add_argument("--image", required=True, metavar="FILE", help="input (.ppm or .ctnsr)")
    p.add_argument("--out", required=True, metavar="FILE", help="predicted label map (.pgm)")
    p.add_argument("--logits", metavar="FILE", help="also write raw logits (.ctnsr)")
    p.set_defaults(func=cmd_infer)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CanetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        # Missing or unreadable files are environment problems, not bugs:
        # report them like any other data error instead of a traceback.
        prefix = f"{e.filename}: " if e.filename else ""
        print(f"error: {prefix}{e.strerror or e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
