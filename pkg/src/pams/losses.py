"""Pixel L1, structured knowledge transfer, and the weighted objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .tensor import Tensor

NORM_EPS = 1e-12


@dataclass
class LossWeights:
    lambda_p: float = 1.0
    lambda_s: float = 1e3

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_s < 0:
            raise ParameterError("loss weights must be non-negative")


def pixel_l1(sr, hr) -> Tensor:
    """Batch mean of the per-image L1 norm ||hr - sr||_1 (summed, not averaged, over pixels)."""
    sr, hr = T.as_tensor(sr), T.as_tensor(hr)
    if sr.shape != hr.shape:
        raise DimensionError(f"pixel_l1: {sr.shape} vs {hr.shape}")
    return T.scale(T.sum_(T.abs_(T.sub(sr, hr))), 1.0 / sr.shape[0])


def spatial_attention_map(features) -> Tensor:
    """Sum over channels of squared activations: [N, C, H, W] -> [N, H, W]."""
    f = T.as_tensor(features)
    if f.data.ndim != 4 or f.shape[1] < 1:
        raise DimensionError(f"expected [N, C, H, W] features, got {f.shape}")
    return T.sum_(T.square(f), axis=1)


def skt_loss(f_student, f_teacher) -> Tensor:
    """|| m_s/||m_s|| - m_t/||m_t|| ||_2 per sample, averaged over the batch.

    The teacher side is detached; the map norms are floored at 1e-12.
    """
    fs = T.as_tensor(f_student)
    ft = T.as_tensor(f_teacher).detach()
    if fs.shape != ft.shape:
        raise DimensionError(f"skt_loss: {fs.shape} vs {ft.shape}")
    n = fs.shape[0]
    ms = T.normalize_rows(T.reshape(spatial_attention_map(fs), (n, -1)), NORM_EPS)
    mt = spatial_attention_map(ft).data.reshape(n, -1)
    mt = mt / np.maximum(np.sqrt((mt * mt).sum(axis=1, keepdims=True)), NORM_EPS)
    dist = T.row_norm(T.sub(ms, Tensor(mt.astype(ms.dtype))))
    return T.scale(T.sum_(dist), 1.0 / n)


def total_loss(l_pix, l_skt, w: LossWeights) -> Tensor:
    l_pix, l_skt = T.as_tensor(l_pix), T.as_tensor(l_skt)
    return T.add(T.scale(l_pix, w.lambda_p), T.scale(l_skt, w.lambda_s))
