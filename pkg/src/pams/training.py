"""Calibration and optimization for full-precision and quantized SR models."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import quant as Q
from .data import ImagePair, apply_augment, augment_choice, random_patch
from .errors import NumericError, ParameterError, StateError, TrainingError
from .losses import LossWeights, pixel_l1, skt_loss, total_loss
from .metrics import EvalResult, psnr_y, ssim_y
from .model import ModelConfig, SRModel, build_model, quantize_from
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    lr_halving_period: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    calibration_batches: int = 5
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    optimizer: str = "adam"
    patch_size: int = 48
    steps_per_epoch: Optional[int] = None
    augment: bool = True

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        for name in ("batch_size", "lr", "lr_halving_period", "adam_eps",
                     "calibration_batches", "patch_size"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if self.epochs and self.lr_halving_period > self.epochs:
            raise ParameterError("lr_halving_period must not exceed epochs")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ParameterError("adam betas must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ParameterError("steps_per_epoch must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    alpha_trajectory: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * 0.5 ** (epoch // cfg.lr_halving_period)


# ------------------------------------------------------------------ optimizer

class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = p.grad
            m = self.m.get(name, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(name, 0.0) * b2 + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


class SGD:
    def step(self, params: dict[str, Tensor], lr: float) -> None:
        for p in params.values():
            p.data = (p.data - lr * p.grad).astype(p.dtype)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD()
    return Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def optimizer_step(model: SRModel, opt, lr: float) -> None:
    """Update every trainable tensor, then keep each alpha positive."""
    params = model.trainable()
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise StateError(f"no gradient for {missing[0]} (and {len(missing) - 1} more)")
    opt.step(params, lr)
    for state in model.quantizer_states.values():
        state.project()


# ----------------------------------------------------------------- sampling

class PatchSampler:
    """Seed-ordered stream of random (lr, hr) patch batches."""

    def __init__(self, pairs: Sequence[ImagePair], batch_size: int, lr_patch: int, scale: int,
                 rng: np.random.Generator, augment: bool = True):
        if not pairs:
            raise ParameterError("no training images")
        self.pairs, self.batch_size, self.lr_patch = list(pairs), batch_size, lr_patch
        self.scale, self.rng, self.augment = scale, rng, augment
        self._order: list[int] = []

    def _next_index(self) -> int:
        if not self._order:
            self._order = list(self.rng.permutation(len(self.pairs)))
        return int(self._order.pop())

    def __iter__(self):
        return self

    def __next__(self) -> tuple[np.ndarray, np.ndarray]:
        lrs, hrs = [], []
        for _ in range(self.batch_size):
            p = random_patch(self.pairs[self._next_index()], self.lr_patch, self.scale, self.rng)
            lr, hr = p.lr, p.hr
            if self.augment:
                flip, rot = augment_choice(self.rng)
                lr, hr = apply_augment(lr, flip, rot), apply_augment(hr, flip, rot)
            lrs.append(lr)
            hrs.append(hr)
        return np.stack(lrs), np.stack(hrs)


# --------------------------------------------------------------- calibration

def calibrate_alphas(model: SRModel, data: Iterable, k: int) -> SRModel:
    """Initialize every site's bound from ``k`` full-precision forward passes.

    ``data`` yields LR batches (or (lr, hr) tuples).  Each batch contributes the
    mean of per-sample max |activation| through :func:`quant.ema_update_alpha`.
    """
    if not model.quantizer_states:
        raise ParameterError("model has no quantizer sites to calibrate")
    if k < 1:
        raise ParameterError("k must be >= 1")
    seen = 0
    it = iter(data)
    for _ in range(k):
        try:
            batch = next(it)
        except StopIteration:
            break
        lr = batch[0] if isinstance(batch, tuple) else batch
        maxes: dict[str, np.ndarray] = {}
        model.forward(Tensor(np.asarray(lr, dtype=model.dtype)), quantize=False,
                      probe=lambda site, x: maxes.__setitem__(site, Q.per_sample_absmax(x)))
        for site, state in model.quantizer_states.items():
            Q.ema_update_alpha(state, maxes[site])
        seen += 1
    if seen == 0:
        raise ParameterError("calibration data stream is empty")
    for site, state in model.quantizer_states.items():
        if not (np.isfinite(state.alpha_value) and state.alpha_value > 0):
            state.alpha_value = Q.ALPHA_FLOOR
    return model


# ---------------------------------------------------------------- evaluation

def super_resolve(model: SRModel, lr: np.ndarray, quantize: bool = True) -> np.ndarray:
    """[3, h, w] -> [3, h*s, w*s], clipped to [0, 255]."""
    _, sr = model.forward(Tensor(lr[None].astype(model.dtype)), quantize=quantize)
    return np.clip(sr.data[0].astype(np.float64), 0, 255)


def evaluate(model: SRModel, pairs: Sequence[ImagePair], shave: Optional[int] = None,
             ssim: bool = True) -> EvalResult:
    shave = model.config.scale_factor if shave is None else shave
    rows = []
    for p in pairs:
        sr = super_resolve(model, p.lr)
        row = {"id": p.id, "psnr": psnr_y(sr, p.hr, shave)}
        if ssim:
            row["ssim"] = ssim_y(sr, p.hr, shave)
        rows.append(row)
    psnr = float(np.mean([r["psnr"] for r in rows]))
    s = float(np.mean([r["ssim"] for r in rows])) if ssim else float("nan")
    return EvalResult(psnr, s, rows)


# ------------------------------------------------------------------ training

def _first_bad_param(model: SRModel) -> Optional[str]:
    for name, p in model.trainable().items():
        if not np.isfinite(p.data).all() or (p.grad is not None and not np.isfinite(p.grad).all()):
            return name
    return None


def _optimize(model: SRModel, teacher: Optional[SRModel], cfg: TrainConfig,
              sampler: PatchSampler, val: Sequence[ImagePair], report: TrainReport) -> None:
    opt = make_optimizer(cfg)
    w = cfg.loss_weights
    use_skt = teacher is not None and w.lambda_s > 0
    steps = cfg.steps_per_epoch or max(1, -(-len(sampler.pairs) // cfg.batch_size))
    fixed_sites = {s: st for s, st in model.quantizer_states.items() if st.mode == Q.FIXED_MAX}
    for site in model.quantizer_states:
        report.alpha_trajectory.setdefault(site, [])

    for epoch in range(cfg.epochs):
        lr_now = lr_at(epoch, cfg)
        pix, skt = [], []
        for _ in range(steps):
            lr_b, hr_b = next(sampler)
            lr_b, hr_b = lr_b.astype(model.dtype), hr_b.astype(model.dtype)
            f_t = teacher.forward(Tensor(lr_b), quantize=False)[0] if use_skt else None
            maxes: dict[str, np.ndarray] = {}
            probe = (lambda site, x: maxes.__setitem__(site, Q.per_sample_absmax(x))
                     if site in fixed_sites else None)
            model.zero_grad()
            try:
                with Tape() as tape:
                    f_s, sr = model.forward(Tensor(lr_b), probe=probe if fixed_sites else None)
                    l_pix = pixel_l1(sr, Tensor(hr_b))
                    l_skt = skt_loss(f_s, f_t) if use_skt else Tensor(np.zeros((), model.dtype))
                    loss = total_loss(l_pix, l_skt, w)
                tape.backward(loss)
            except NumericError as e:
                raise TrainingError(f"non-finite value at layer {model.current_layer or '?'}: {e}") from e
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss; first bad layer {_first_bad_param(model)}")
            optimizer_step(model, opt, lr_now)
            bad = _first_bad_param(model)
            if bad is not None:
                raise TrainingError(f"parameter {bad} became non-finite")
            for site, st in fixed_sites.items():
                Q.ema_update_alpha(st, maxes[site])
            for site, st in model.quantizer_states.items():
                report.alpha_trajectory[site].append(st.alpha_value)
            pix.append(float(l_pix.data))
            skt.append(float(l_skt.data))

        row = {"epoch": epoch, "lr": lr_now, "l_pix": float(np.mean(pix)), "l_skt": float(np.mean(skt))}
        if val:
            ev = evaluate(model, val)
            row.update(psnr=ev.psnr_db, ssim=ev.ssim)
        log.info("epoch %d: %s", epoch, row)
        report.epochs.append(row)


def _sampler(pairs, cfg: TrainConfig, scale: int, rng) -> PatchSampler:
    return PatchSampler(pairs, cfg.batch_size, cfg.patch_size, scale, rng, cfg.augment)


def pretrain(model_config: ModelConfig, cfg: TrainConfig, data: Sequence[ImagePair],
             val: Sequence[ImagePair] = (), mean_rgb=None, dtype=np.float32):
    """Train a full-precision model from scratch with the pixel loss only."""
    cfg.validate()
    fp_config = ModelConfig(**{**model_config.to_dict(), "n_bits": None})
    kw = {} if mean_rgb is None else {"mean_rgb": mean_rgb}
    model = build_model(fp_config, cfg.seed, dtype=dtype, **kw)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    _optimize(model, None, cfg, _sampler(data, cfg, fp_config.scale_factor, rng), val, report)
    return model, report


def train(teacher: SRModel, model_config: ModelConfig, cfg: TrainConfig,
          data: Sequence[ImagePair], val: Sequence[ImagePair] = ()):
    """Quantize ``teacher`` and fine-tune it.

    Builds the student with ``model_config.n_bits``/``quantizer``, calibrates
    every bound, then minimizes the weighted pixel + SKT objective with the
    teacher frozen.
    """
    cfg.validate()
    if teacher.quantized:
        raise ParameterError("teacher must be full precision")
    if model_config.n_bits is None:
        raise ParameterError("model_config.n_bits must be set")
    for key in ("n_blocks", "n_channels", "scale_factor", "kernel_size"):
        if getattr(model_config, key) != getattr(teacher.config, key):
            raise ParameterError(f"model_config.{key} differs from the teacher's")
    frozen = teacher.copy()
    for p in frozen.parameters():
        p.requires_grad = False
    student = quantize_from(teacher, model_config.n_bits, model_config.quantizer)
    student.config.residual_scaling = model_config.residual_scaling
    student.config.ema_beta = model_config.ema_beta
    for st in student.quantizer_states.values():
        st.ema_beta = model_config.ema_beta

    rng = np.random.default_rng(cfg.seed)
    sampler = _sampler(data, cfg, model_config.scale_factor, rng)
    try:
        calibrate_alphas(student, sampler, cfg.calibration_batches)
    except NumericError as e:
        raise TrainingError(f"non-finite value at layer {student.current_layer or '?'} "
                            f"during calibration: {e}") from e
    report = TrainReport()
    _optimize(student, frozen, cfg, sampler, val, report)
    return student, report
