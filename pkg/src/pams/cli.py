"""Command-line interface: ``python -m pams <command> ...``.

Config files are JSON objects.  Keys may be flat or grouped under ``"model"``
and ``"train"``; ``lambda_p``/``lambda_s`` may appear at top level or inside
``"loss_weights"``.  Every command that trains prints its resolved config
first.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import experiments as X
from .data import bicubic_resize, load_split, make_toy_corpus, mean_rgb, read_manifest
from .errors import PamsError, ParameterError
from .export import (activation_stats, load_model, pack_model, save_checkpoint, size_from_counts,
                     size_report, stats_summary, write_histogram, write_stats_table)
from .losses import LossWeights
from .metrics import psnr_y, ssim_y
from .model import ModelConfig, quantize_from
from .training import TrainConfig, calibrate_alphas, evaluate, pretrain, super_resolve, train

log = logging.getLogger("pams")

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


# ------------------------------------------------------------------ config

def parse_config(raw: dict, model: Optional[ModelConfig] = None,
                 train_cfg: Optional[TrainConfig] = None) -> tuple[ModelConfig, TrainConfig]:
    """Merge a config mapping over the given (or default) configs."""
    flat = {}
    for k, v in raw.items():
        if k in ("model", "train") and isinstance(v, dict):
            flat.update(v)
        else:
            flat[k] = v
    lw = dict(flat.pop("loss_weights", {}) or {})
    for k in ("lambda_p", "lambda_s"):
        if k in flat:
            lw[k] = flat.pop(k)
    unknown = set(flat) - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise ParameterError(f"unknown config keys: {sorted(unknown)}")
    model = replace(model or ModelConfig(), **{k: v for k, v in flat.items() if k in _MODEL_KEYS})
    train_cfg = train_cfg or TrainConfig()
    weights = LossWeights(**{**vars(train_cfg.loss_weights), **lw})
    train_cfg = replace(train_cfg, loss_weights=weights,
                        **{k: v for k, v in flat.items() if k in _TRAIN_KEYS and k != "loss_weights"})
    model.validate()
    train_cfg.validate()
    return model, train_cfg


def load_config(path: Optional[str], **defaults) -> tuple[ModelConfig, TrainConfig]:
    raw = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(raw, dict):
        raise ParameterError("config file must hold a JSON object")
    return parse_config(raw, **defaults)


def resolved(model: ModelConfig, cfg: TrainConfig) -> dict:
    return {"model": model.to_dict(), "train": cfg.to_dict()}


def echo_config(model: ModelConfig, cfg: TrainConfig) -> None:
    print("# resolved config")
    print(json.dumps(resolved(model, cfg), indent=2, sort_keys=True))


def _csv(text: str, cast=str) -> list:
    return [cast(t) for t in text.split(",") if t.strip()]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if v == float("inf") else f"{v:.4f}"
    return str(v)


def print_table(header: Sequence[str], rows: Sequence[Sequence], out=None) -> None:
    out = out or sys.stdout
    print("\t".join(header), file=out)
    for r in rows:
        print("\t".join(_fmt(v) for v in r), file=out)


# ---------------------------------------------------------------- commands

def cmd_make_toy(args) -> int:
    root = make_toy_corpus(args.out, args.images, args.size, args.val, seed=args.seed)
    print(f"wrote {args.images} images to {root}")
    return 0


def _splits(root, scale):
    names = {s for s, _ in read_manifest(root)}
    tr = load_split(root, "train", scale)
    val = load_split(root, "val", scale) if "val" in names else []
    return tr, val


def cmd_train(args) -> int:
    model_cfg, cfg = load_config(args.config)
    overrides = {}
    if args.bits is not None:
        overrides["n_bits"] = args.bits
    if args.quantizer is not None:
        overrides["quantizer"] = args.quantizer
    model_cfg = replace(model_cfg, **overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    model_cfg.validate()
    echo_config(model_cfg, cfg)

    tr, val = _splits(args.data, model_cfg.scale_factor)
    if args.teacher:
        teacher = load_model(args.teacher)
        if teacher.quantized:
            raise ParameterError("--teacher must be a full-precision checkpoint")
        if model_cfg.n_bits is None:
            raise ParameterError("--teacher given but no bit width (--bits or n_bits in the config)")
        model, report = train(teacher, model_cfg, cfg, tr, val)
    else:
        if model_cfg.n_bits is not None:
            raise ParameterError("quantized training needs a --teacher checkpoint")
        model, report = pretrain(model_cfg, cfg, tr, val, mean_rgb=mean_rgb(tr))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", model, extra={"resolved_config": resolved(model_cfg, cfg)})
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(resolved(model_cfg, cfg), indent=2, sort_keys=True) + "\n")

    cols = ["epoch", "lr", "l_pix", "l_skt"] + (["psnr", "ssim"] if val else [])
    print_table(cols, [[r[c] for c in cols] for r in report.epochs])
    print(f"saved {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    if model.config.scale_factor != args.scale:
        raise ParameterError(f"model is x{model.config.scale_factor}, --scale is {args.scale}")
    metrics = _csv(args.metrics)
    if set(metrics) - {"psnr", "ssim"}:
        raise ParameterError("--metrics accepts psnr and ssim")
    pairs = load_split(args.data, args.split, args.scale)
    if not pairs:
        raise ParameterError(f"no images in split {args.split!r}")
    shave = args.scale if args.shave is None else args.shave
    header, rows = ["id"] + metrics, []
    if args.bicubic:
        header += [f"bicubic_{m}" for m in metrics]
    for p in pairs:
        sr = super_resolve(model, p.lr)
        row = [p.id]
        fns = {"psnr": psnr_y, "ssim": ssim_y}
        row += [fns[m](sr, p.hr, shave) for m in metrics]
        if args.bicubic:
            bic = np.clip(bicubic_resize(p.lr, args.scale), 0, 255)
            row += [fns[m](bic, p.hr, shave) for m in metrics]
        rows.append(row)
    rows.append(["mean"] + [float(np.mean([r[i] for r in rows])) for i in range(1, len(header))])
    print_table(header, rows)
    return 0


def cmd_export(args) -> int:
    model = load_model(args.model)
    if not model.quantized:
        if not args.data:
            raise ParameterError("full-precision checkpoint: pass --data to calibrate the activation bounds")
        model = quantize_from(model, args.bits, args.quantizer)
        tr = load_split(args.data, "train", model.config.scale_factor)
        calibrate_alphas(model, ([p.lr] for p in tr), min(len(tr), 5))
    pm = pack_model(model, args.bits)
    pm.save(args.out)
    rep = size_report(model, args.bits)
    print_table(["field", "value"], rep.rows() + [("payload_bits", str(pm.payload_bits())),
                                                   ("file_bytes", str(Path(args.out).stat().st_size))])
    return 0


def cmd_stats(args) -> int:
    model = load_model(args.model)
    entries = read_manifest(args.data)
    split = None if args.split == "all" else args.split
    scale = model.config.scale_factor
    pairs = []
    for s in sorted({s for s, _ in entries}):
        if split is None or s == split:
            pairs += load_split(args.data, s, scale)
    if not pairs:
        raise ParameterError("no images selected")
    stats = activation_stats(model, [p.lr for p in pairs])
    out = Path(args.out)
    write_stats_table(out, stats, [p.id for p in pairs])
    hist = out.with_name(out.stem + ".hist.tsv")
    write_histogram(hist, stats, args.bins)
    summ = stats_summary(stats)
    print_table(["site", "mean", "std", "var", "min", "max"],
                [[r["site"], r["mean"], r["std"], r["var"], r["min"], r["max"]] for r in summ])
    print(f"wrote {out} and {hist} ({len(pairs)} samples)")
    return 0


def cmd_compare(args) -> int:
    _, cfg = load_config(args.config, train_cfg=X.STUDENT_CONFIG)
    tr, val = _splits(args.data, 2)
    if not val:
        raise ParameterError("compare needs a val split")
    if args.teacher:
        teacher = load_model(args.teacher)
    else:
        log.info("no --teacher; pretraining the desk-scale teacher")
        teacher = X.desk_teacher(tr)
    echo_config(teacher.config, cfg)
    quantizers, bits = _csv(args.quantizers), _csv(args.bits, int)
    seeds, lambdas = _csv(args.seeds, int), _csv(args.lambda_s, float)
    t_ev = evaluate(teacher, val)
    print_table(["model", "psnr", "ssim"], [["bicubic", X.bicubic_psnr(val), float("nan")],
                                            ["teacher", t_ev.psnr_db, t_ev.ssim]])
    header = ["quantizer", "bits", "lambda_s", "seed", "psnr", "ssim"]
    print("\t".join(header))
    rows = X.compare(teacher, tr, val, quantizers, bits, seeds, lambdas, cfg,
                     on_row=lambda r: print("\t".join(_fmt(v) for v in
                                                      (r.quantizer, r.bits, r.lambda_s, r.seed, r.psnr, r.ssim)),
                                            flush=True))
    print_table(["quantizer", "bits", "lambda_s", "median_psnr"],
                [[q, b, ls, m] for (q, b, ls), m in X.medians(rows).items()])
    if args.out:
        with open(args.out, "w") as f:
            print_table(header, [[r.quantizer, r.bits, r.lambda_s, r.seed, r.psnr, r.ssim] for r in rows], f)
    return 0


def cmd_size(args) -> int:
    if args.counts:
        h, r = _csv(args.counts, float)
        rep = size_from_counts(h, r, args.bits)
    elif args.model:
        rep = size_report(load_model(args.model), args.bits)
    else:
        raise ParameterError("size needs --model or --counts H,R")
    print_table(["field", "value"], rep.rows())
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pams", description="Quantized super-resolution toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-toy", help="write a synthetic HR corpus with a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--images", type=int, default=X.TOY_IMAGES)
    s.add_argument("--size", type=int, default=X.TOY_SIZE)
    s.add_argument("--val", type=int, default=X.TOY_VAL)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_make_toy)

    s = sub.add_parser("train", help="pretrain a full-precision model, or quantize a teacher and fine-tune")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--teacher")
    s.add_argument("--bits", type=int)
    s.add_argument("--quantizer", choices=["pams", "fixed_max", "pact"])
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="PSNR/SSIM on the Y channel")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--scale", type=int, choices=[2, 4], required=True)
    s.add_argument("--metrics", default="psnr,ssim")
    s.add_argument("--split", default="val")
    s.add_argument("--shave", type=int)
    s.add_argument("--bicubic", action="store_true", help="add bicubic baseline columns")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("export", help="write a bit-packed deployment file")
    s.add_argument("--model", required=True)
    s.add_argument("--bits", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="calibration data when --model is full precision")
    s.add_argument("--quantizer", default="pams", choices=["pams", "fixed_max", "pact"])
    s.set_defaults(fn=cmd_export)

    s = sub.add_parser("stats", help="per-site, per-sample activation maxima")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="all")
    s.add_argument("--bins", type=int, default=20)
    s.set_defaults(fn=cmd_stats)

    s = sub.add_parser("compare", help="desk-scale quantizer ablation")
    s.add_argument("--quantizers", default="pams,fixed_max,pact")
    s.add_argument("--bits", default="8,4")
    s.add_argument("--seeds", default="0")
    s.add_argument("--lambda-s", dest="lambda_s", default="1000")
    s.add_argument("--data", required=True)
    s.add_argument("--teacher")
    s.add_argument("--config", help="overrides for the student TrainConfig")
    s.add_argument("--out", help="also write the per-run table here")
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("size", help="storage size and compression ratio")
    s.add_argument("--model")
    s.add_argument("--counts", help="H,R parameter counts instead of a model")
    s.add_argument("--bits", type=int, required=True)
    s.set_defaults(fn=cmd_size)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (PamsError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
