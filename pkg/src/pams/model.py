"""EDSR-style super-resolution network with quantized residual blocks.

Layout::

    x -> (x - mean)/255 -> head conv -> [block] * n_blocks -> + head output
      -> (conv -> pixel_shuffle(2)) * log2(scale) -> out conv -> *255 + mean

Only the residual blocks are quantized.  Inside each block::

    Wq-conv1 -> ReLU -> act1 -> Wq-conv2 -> act2 -> * residual_scaling -> + input

where ``act1``/``act2`` are activation quantizer sites, each with its own bound.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import quant as Q
from . import tensor as T
from .errors import DimensionError, ParameterError
from .tensor import Tensor

# DIV2K training-set mean, used when no corpus mean is supplied
DIV2K_MEAN_RGB = (0.4488 * 255, 0.4371 * 255, 0.4040 * 255)
PIXEL_RANGE = 255.0

QUANTIZER_MODES = {"pams": Q.PAMS, "fixed_max": Q.FIXED_MAX, "pact": Q.PACT}

Probe = Callable[[str, np.ndarray], None]


@dataclass
class ModelConfig:
    n_blocks: int = 4
    n_channels: int = 16
    scale_factor: int = 2
    n_bits: Optional[int] = None
    residual_scaling: float = 1.0
    quantizer: str = "pams"
    kernel_size: int = 3
    ema_beta: float = Q.DEFAULT_EMA_BETA

    def validate(self) -> None:
        if self.scale_factor not in (2, 4):
            raise ParameterError(f"scale_factor must be 2 or 4, got {self.scale_factor}")
        if self.n_blocks < 1 or self.n_channels < 1:
            raise ParameterError("n_blocks and n_channels must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ParameterError("kernel_size must be odd")
        if self.n_bits is not None and not 2 <= self.n_bits <= 16:
            raise ParameterError(f"n_bits must be in [2, 16] or None, got {self.n_bits}")
        if self.quantizer not in QUANTIZER_MODES:
            raise ParameterError(f"quantizer must be one of {sorted(QUANTIZER_MODES)}")

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_init(rng: np.random.Generator, c_out: int, c_in: int, k: int, dtype):
    # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual conv default
    bound = 1.0 / np.sqrt(c_in * k * k)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
    b = rng.uniform(-bound, bound, size=(c_out,)).astype(dtype)
    return w, b


class SRModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], mean_rgb=DIV2K_MEAN_RGB):
        self.config = config
        self.params = params
        self.mean_rgb = np.asarray(mean_rgb, dtype=np.float64)
        self.quantizer_states: dict[str, Q.QuantizerState] = {}
        # fixed per-tensor weight bounds, set when weights come from a packed file
        self.weight_scales: dict[str, float] = {}
        self.current_layer = ""
        if config.n_bits is not None:
            mode = QUANTIZER_MODES[config.quantizer]
            for site in self.site_names():
                self.quantizer_states[site] = Q.QuantizerState(
                    n_bits=config.n_bits, mode=mode, ema_beta=config.ema_beta)

    # -- structure -------------------------------------------------------
    @property
    def quantized(self) -> bool:
        return self.config.n_bits is not None

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def site_names(self) -> list[str]:
        return [f"blocks.{i}.act{j}" for i in range(self.config.n_blocks) for j in (1, 2)]

    def quantized_weight_names(self) -> list[str]:
        """Weights stored at n bits: the block convolutions."""
        return [f"blocks.{i}.conv{j}.weight" for i in range(self.config.n_blocks) for j in (1, 2)]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def alphas(self) -> list[Tensor]:
        return [s.alpha for s in self.quantizer_states.values() if s.alpha.requires_grad]

    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for site, s in self.quantizer_states.items():
            if s.alpha.requires_grad:
                out[f"{site}.alpha"] = s.alpha
        return out

    def zero_grad(self) -> None:
        for t in self.trainable().values():
            t.grad = None

    def copy(self) -> "SRModel":
        return copy.deepcopy(self)

    # -- forward ---------------------------------------------------------
    def _conv(self, name: str, x: Tensor, quantize: bool) -> Tensor:
        self.current_layer = name
        w, b = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
        if quantize:
            a = self.weight_scales.get(f"{name}.weight")
            if a is None:
                w = Q.quantize_weights(w, self.config.n_bits).values
            else:
                w = Q.quantize_symmetric(w, self.config.n_bits, a).values
        return T.conv2d(x, w, b, padding=self.config.kernel_size // 2)

    def _site(self, name: str, x: Tensor, quantize: bool, probe: Optional[Probe]) -> Tensor:
        self.current_layer = name
        if probe is not None:
            probe(name, x.data)
        if quantize:
            return Q.quantize_activation(x, self.quantizer_states[name]).values
        return x

    def forward(self, lr_image, *, quantize: bool = True, probe: Optional[Probe] = None):
        """Return ``(features, sr)``.

        ``features`` is the output of the last residual block; ``sr`` is the
        upscaled image on the input's [0, 255] scale.  ``quantize=False``
        bypasses every quantizer; ``probe(site, activation)`` sees each
        activation site before quantization.
        """
        x = T.as_tensor(lr_image)
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected an [N, 3, H, W] image batch, got {x.shape}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        q = quantize and self.quantized
        cfg = self.config
        shift = Tensor((-self.mean_rgb).astype(self.dtype))
        h = T.scale(T.add_channel(x, shift), 1.0 / PIXEL_RANGE)
        head = self._conv("head", h, False)

        feat = head
        for i in range(cfg.n_blocks):
            r = self._conv(f"blocks.{i}.conv1", feat, q)
            r = T.relu(r)
            r = self._site(f"blocks.{i}.act1", r, q, probe)
            r = self._conv(f"blocks.{i}.conv2", r, q)
            r = self._site(f"blocks.{i}.act2", r, q, probe)
            if cfg.residual_scaling != 1.0:
                r = T.scale(r, cfg.residual_scaling)
            feat = T.add(feat, r)
        features = feat

        y = T.add(features, head)
        for k in range(_n_upsample_stages(cfg.scale_factor)):
            y = self._conv(f"tail.up{k}", y, False)
            y = T.pixel_shuffle(y, 2)
        y = self._conv("tail.out", y, False)
        y = T.add_channel(T.scale(y, PIXEL_RANGE), Tensor(self.mean_rgb.astype(self.dtype)))
        self.current_layer = ""
        return features, y

    __call__ = forward


def _n_upsample_stages(scale_factor: int) -> int:
    return {2: 1, 4: 2}[scale_factor]


def build_model(config: ModelConfig, seed: int = 0, *, dtype=np.float32,
                mean_rgb=DIV2K_MEAN_RGB) -> SRModel:
    config.validate()
    rng = np.random.default_rng(seed)
    c, k = config.n_channels, config.kernel_size
    params: dict[str, Tensor] = {}

    def conv(name, c_out, c_in):
        w, b = _conv_init(rng, c_out, c_in, k, dtype)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(b, requires_grad=True, name=f"{name}.bias")

    conv("head", c, 3)
    for i in range(config.n_blocks):
        conv(f"blocks.{i}.conv1", c, c)
        conv(f"blocks.{i}.conv2", c, c)
    for s in range(_n_upsample_stages(config.scale_factor)):
        conv(f"tail.up{s}", 4 * c, c)
    conv("tail.out", 3, c)
    return SRModel(config, params, mean_rgb)


def quantize_from(teacher: SRModel, n_bits: int, quantizer: str = "pams") -> SRModel:
    """Copy ``teacher`` and insert quantizers at every block site."""
    cfg = ModelConfig(**{**teacher.config.to_dict(), "n_bits": n_bits, "quantizer": quantizer})
    cfg.validate()
    params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in teacher.params.items()}
    return SRModel(cfg, params, teacher.mean_rgb.copy())


def forward_sr(model: SRModel, lr_image) -> Tensor:
    return model.forward(lr_image)[1]


def forward_features(model: SRModel, lr_image):
    """``(F, sr)`` with F the high-level extractor's last feature map."""
    return model.forward(lr_image)
