"""Desk-scale protocol shared by the CLI ``compare`` command, demos and acceptance tests.

The teacher is trained from scratch for 200 steps; every student is
fine-tuned from it for 200 steps.  These settings were fixed before the
ablation was run and are not tuned per variant.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import ImagePair, bicubic_resize, load_split, make_toy_corpus, mean_rgb
from .losses import LossWeights
from .metrics import psnr_y
from .model import ModelConfig, SRModel
from .training import TrainConfig, evaluate, pretrain, train

TOY_IMAGES, TOY_SIZE, TOY_VAL = 20, 96, 4

# 20 epochs x 10 steps = 200 optimizer steps
TEACHER_CONFIG = TrainConfig(epochs=20, steps_per_epoch=10, batch_size=8, patch_size=24,
                             lr=2e-3, lr_halving_period=10, seed=0)
STUDENT_CONFIG = TrainConfig(epochs=20, steps_per_epoch=10, batch_size=4, patch_size=24,
                             lr=1e-4, lr_halving_period=10, seed=0)


@dataclass
class CompareRow:
    quantizer: str
    bits: int
    lambda_s: float
    seed: int
    psnr: float
    ssim: float


def toy_corpus(root, seed: int = 0):
    """Create (if needed) and load the 20-image toy corpus: (train, val) pairs at x2."""
    make_toy_corpus(root, TOY_IMAGES, TOY_SIZE, TOY_VAL, seed=seed)
    return load_split(root, "train", 2), load_split(root, "val", 2)


def bicubic_psnr(pairs: Sequence[ImagePair], scale: int = 2) -> float:
    return float(np.mean([psnr_y(np.clip(bicubic_resize(p.lr, scale), 0, 255), p.hr, scale)
                          for p in pairs]))


def desk_teacher(train_pairs: Sequence[ImagePair], config: Optional[ModelConfig] = None,
                 cfg: TrainConfig = TEACHER_CONFIG) -> SRModel:
    teacher, _ = pretrain(config or ModelConfig(), cfg, train_pairs, (), mean_rgb=mean_rgb(train_pairs))
    return teacher


def desk_student(teacher: SRModel, train_pairs: Sequence[ImagePair], bits: int, quantizer: str = "pams",
                 seed: int = 0, lambda_s: float = 1e3, cfg: TrainConfig = STUDENT_CONFIG) -> SRModel:
    c = replace(cfg, seed=seed, loss_weights=LossWeights(1.0, lambda_s))
    mc = ModelConfig(**{**teacher.config.to_dict(), "n_bits": bits, "quantizer": quantizer})
    student, _ = train(teacher, mc, c, train_pairs)
    return student


def compare(teacher: SRModel, train_pairs, val_pairs, quantizers: Iterable[str], bits: Iterable[int],
            seeds: Iterable[int], lambda_s: Iterable[float] = (1e3,), cfg: TrainConfig = STUDENT_CONFIG,
            ssim: bool = True, on_row=None) -> list[CompareRow]:
    rows = []
    for b in bits:
        for q in quantizers:
            for ls in lambda_s:
                for s in seeds:
                    st = desk_student(teacher, train_pairs, b, q, s, ls, cfg)
                    ev = evaluate(st, val_pairs, ssim=ssim)
                    row = CompareRow(q, b, ls, s, ev.psnr_db, ev.ssim)
                    rows.append(row)
                    if on_row is not None:
                        on_row(row)
    return rows


def medians(rows: Sequence[CompareRow]) -> dict[tuple[str, int, float], float]:
    groups: dict[tuple[str, int, float], list[float]] = {}
    for r in rows:
        groups.setdefault((r.quantizer, r.bits, r.lambda_s), []).append(r.psnr)
    return {k: float(np.median(v)) for k, v in groups.items()}
