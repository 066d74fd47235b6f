"""Checkpoints, bit-packed deployment files, size accounting and activation statistics.

Both file formats share one layout::

    magic (8 bytes) | version u32 | header length u32 | JSON header | payload

The header lists every tensor with its byte offset into the payload.  All
integers are little-endian.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import quant as Q
from .errors import ParameterError, StateError
from .model import ModelConfig, SRModel
from .tensor import Tensor

CKPT_MAGIC = b"PAMSCKPT"
PACK_MAGIC = b"PAMSPACK"
VERSION = 1
FP_BITS = 32


# ------------------------------------------------------------ container I/O

def _write_container(path, magic: bytes, header: dict, payload: bytes) -> None:
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(magic + struct.pack("<II", VERSION, len(head)) + head + payload)


def _read_container(path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise OSError(f"{path}: not a {magic.decode()} file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise OSError(f"{path}: unsupported version {version}")
    header = json.loads(raw[16:16 + hlen])
    return header, raw[16 + hlen:]


def file_kind(path) -> str:
    with open(path, "rb") as f:
        magic = f.read(8)
    if magic == CKPT_MAGIC:
        return "checkpoint"
    if magic == PACK_MAGIC:
        return "packed"
    raise OSError(f"{path}: unknown file type")


def _alpha_table(model: SRModel) -> dict:
    return {site: {"alpha": st.alpha_value, "step_count": st.step_count}
            for site, st in model.quantizer_states.items()}


def _restore_alphas(model: SRModel, table: dict) -> None:
    if set(table) != set(model.quantizer_states):
        raise ParameterError("quantizer sites in file do not match the model")
    for site, entry in table.items():
        st = model.quantizer_states[site]
        st.alpha_value = entry["alpha"]
        st.step_count = entry["step_count"]


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(path, model: SRModel, extra: Optional[dict] = None) -> None:
    """Full-precision named tensors plus config and per-site bounds."""
    tensors, chunks, offset = [], [], 0
    for name, p in model.params.items():
        b = np.ascontiguousarray(p.data).astype(p.dtype.newbyteorder("<")).tobytes()
        tensors.append({"name": name, "dtype": p.dtype.str.lstrip("<>="), "shape": list(p.shape),
                        "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    header = {"kind": "checkpoint", "model_config": model.config.to_dict(),
              "mean_rgb": model.mean_rgb.tolist(), "tensors": tensors,
              "alphas": _alpha_table(model), "extra": extra or {}}
    _write_container(path, CKPT_MAGIC, header, b"".join(chunks))


def load_checkpoint(path) -> SRModel:
    header, payload = _read_container(path, CKPT_MAGIC)
    params = {}
    for t in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(t["dtype"]).newbyteorder("<"),
                            count=int(np.prod(t["shape"])), offset=t["offset"])
        params[t["name"]] = Tensor(arr.astype(t["dtype"]).reshape(t["shape"]),
                                   requires_grad=True, name=t["name"])
    model = SRModel(ModelConfig(**header["model_config"]), params, header["mean_rgb"])
    _restore_alphas(model, header["alphas"])
    return model


# -------------------------------------------------------------- bit packing

def pack_codes(codes: np.ndarray, n_bits: int) -> bytes:
    """Signed codes in [-(2^(n-1)-1), 2^(n-1)-1] -> LSB-first n-bit fields."""
    levels = 2 ** (n_bits - 1) - 1
    c = np.asarray(codes).astype(np.int64).ravel()
    if c.size and (c.min() < -levels or c.max() > levels):
        raise StateError(f"code out of the representable {n_bits}-bit range")
    u = (c + levels).astype(np.uint32)
    bits = ((u[:, None] >> np.arange(n_bits, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_codes(buf: bytes, count: int, n_bits: int) -> np.ndarray:
    levels = 2 ** (n_bits - 1) - 1
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    bits = bits[:count * n_bits].reshape(count, n_bits).astype(np.int64)
    return (bits << np.arange(n_bits)).sum(axis=1) - levels


@dataclass
class PackedTensor:
    shape: tuple[int, ...]
    scale: float  # the clamp bound a; step = a / (2^(n-1) - 1)
    data: bytes

    @property
    def count(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class PackedModel:
    config: ModelConfig
    n_bits: int
    mean_rgb: np.ndarray
    dtype: str
    quantized: dict[str, PackedTensor] = field(default_factory=dict)
    full_precision: dict[str, np.ndarray] = field(default_factory=dict)
    alphas: dict = field(default_factory=dict)

    def payload_bits(self) -> int:
        q = sum(len(t.data) * 8 for t in self.quantized.values())
        return q + sum(a.size * FP_BITS for a in self.full_precision.values())

    def save(self, path) -> None:
        tensors, chunks, offset = [], [], 0
        for name, t in self.quantized.items():
            tensors.append({"name": name, "kind": "packed", "shape": list(t.shape),
                            "scale": t.scale, "offset": offset, "nbytes": len(t.data)})
            chunks.append(t.data)
            offset += len(t.data)
        for name, a in self.full_precision.items():
            b = a.astype("<f4").tobytes()
            tensors.append({"name": name, "kind": "float32", "shape": list(a.shape),
                            "offset": offset, "nbytes": len(b)})
            chunks.append(b)
            offset += len(b)
        header = {"kind": "packed", "model_config": self.config.to_dict(), "n_bits": self.n_bits,
                  "mean_rgb": np.asarray(self.mean_rgb).tolist(), "dtype": self.dtype,
                  "tensors": tensors, "alphas": self.alphas}
        _write_container(path, PACK_MAGIC, header, b"".join(chunks))

    @classmethod
    def load(cls, path) -> "PackedModel":
        header, payload = _read_container(path, PACK_MAGIC)
        pm = cls(ModelConfig(**header["model_config"]), header["n_bits"],
                 np.asarray(header["mean_rgb"]), header["dtype"], alphas=header["alphas"])
        for t in header["tensors"]:
            chunk = payload[t["offset"]:t["offset"] + t["nbytes"]]
            if t["kind"] == "packed":
                pm.quantized[t["name"]] = PackedTensor(tuple(t["shape"]), t["scale"], chunk)
            else:
                pm.full_precision[t["name"]] = np.frombuffer(chunk, "<f4").reshape(t["shape"]).copy()
        return pm


def pack_model(model: SRModel, n_bits: Optional[int] = None) -> PackedModel:
    """Quantized block weights as n-bit codes; everything else as float32."""
    if not model.quantized:
        raise ParameterError("model has no quantizer sites; quantize it before packing")
    n_bits = model.config.n_bits if n_bits is None else n_bits
    if n_bits != model.config.n_bits:
        raise ParameterError(f"model is configured for {model.config.n_bits} bits, not {n_bits}")
    qnames = set(model.quantized_weight_names())
    pm = PackedModel(model.config, n_bits, model.mean_rgb.copy(), model.dtype.name,
                     alphas=_alpha_table(model))
    for name, p in model.params.items():
        if name in qnames:
            w = p.data
            a = model.weight_scales.get(name)
            if a is None:
                a = np.abs(w).max()
                if a == 0:
                    a = np.finfo(w.dtype).tiny
            a = np.asarray(a, dtype=w.dtype)
            codes = Q.symmetric_codes(w, n_bits, a)
            pm.quantized[name] = PackedTensor(w.shape, float(a), pack_codes(codes, n_bits))
        else:
            pm.full_precision[name] = p.data.astype(np.float32)
    return pm


def unpack_model(pm: PackedModel) -> SRModel:
    """Rebuild a quantized model whose forward matches the packed one bit-for-bit
    (for float32 models)."""
    dtype = np.dtype(pm.dtype)
    levels = 2 ** (pm.n_bits - 1) - 1
    params, scales = {}, {}
    order = _param_order(pm.config)
    for name in order:
        if name in pm.quantized:
            t = pm.quantized[name]
            a = np.asarray(t.scale, dtype=dtype)
            codes = unpack_codes(t.data, t.count, pm.n_bits).reshape(t.shape)
            data = (codes.astype(dtype) * np.asarray(a / levels, dtype=dtype)).astype(dtype)
            data = np.clip(data, -a, a)
            scales[name] = a
        else:
            data = pm.full_precision[name].astype(dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    model = SRModel(pm.config, params, pm.mean_rgb)
    model.weight_scales = scales
    _restore_alphas(model, pm.alphas)
    return model


def _param_order(config: ModelConfig) -> list[str]:
    names = ["head"]
    names += [f"blocks.{i}.conv{j}" for i in range(config.n_blocks) for j in (1, 2)]
    names += [f"tail.up{k}" for k in range({2: 1, 4: 2}[config.scale_factor])]
    names += ["tail.out"]
    return [f"{n}.{s}" for n in names for s in ("weight", "bias")]


def load_model(path) -> SRModel:
    """Load either a checkpoint or a packed file."""
    if file_kind(path) == "checkpoint":
        return load_checkpoint(path)
    return unpack_model(PackedModel.load(path))


# ----------------------------------------------------------- size accounting

@dataclass
class SizeReport:
    total_params: int
    high_level_params: int
    other_params: int
    n_bits: int
    storage_fp: float  # in 32-bit parameter units
    storage_quantized: float
    storage_bytes_fp: float
    storage_bytes_quantized: float
    compression_ratio: float

    def rows(self) -> list[tuple[str, str]]:
        return [("total_params", str(self.total_params)),
                ("high_level_params", str(self.high_level_params)),
                ("other_params", str(self.other_params)),
                ("n_bits", str(self.n_bits)),
                ("storage_fp_units", f"{self.storage_fp:.6g}"),
                ("storage_quantized_units", f"{self.storage_quantized:.6g}"),
                ("storage_bytes_fp", f"{self.storage_bytes_fp:.6g}"),
                ("storage_bytes_quantized", f"{self.storage_bytes_quantized:.6g}"),
                ("compression_ratio", f"{self.compression_ratio:.6f}")]


def size_from_counts(high_level: float, other: float, n_bits: int) -> SizeReport:
    """Storage when ``high_level`` parameters take n bits and ``other`` take 32.

    Units are 32-bit parameters; r_comp = 1 - quantized / full precision.
    """
    if not 1 <= n_bits <= FP_BITS:
        raise ParameterError(f"n_bits must be in [1, {FP_BITS}]")
    fp = high_level + other
    q = high_level * n_bits / FP_BITS + other
    r = 1.0 - q / fp if fp else 0.0
    return SizeReport(fp, high_level, other, n_bits, fp, q, fp * 4, q * 4, r)


def size_report(model: SRModel, n_bits: int) -> SizeReport:
    qnames = set(model.quantized_weight_names())
    high = sum(p.size for k, p in model.params.items() if k in qnames)
    other = sum(p.size for k, p in model.params.items() if k not in qnames)
    return size_from_counts(high, other, n_bits)


# -------------------------------------------------------- activation ranges

def activation_stats(model: SRModel, images: Sequence[np.ndarray]) -> dict[str, np.ndarray]:
    """Per site, the max |activation| of every image (pre-quantization).

    Works on full-precision models too: the sites are probed whether or not
    quantizers are attached.
    """
    if len(images) == 0:
        raise ParameterError("need at least one image")
    table: dict[str, list[float]] = {s: [] for s in model.site_names()}

    def probe(site, x):
        table[site].append(float(Q.per_sample_absmax(x)[0]))

    for img in images:
        model.forward(Tensor(np.asarray(img, dtype=model.dtype)[None]), quantize=False, probe=probe)
    return {s: np.asarray(v) for s, v in table.items()}


def write_stats_table(path, stats: dict[str, np.ndarray], ids: Optional[Sequence[str]] = None) -> None:
    lines = ["site\tsample\tmax_abs"]
    for site, vals in stats.items():
        for i, v in enumerate(vals):
            lines.append(f"{site}\t{ids[i] if ids else i}\t{v:.9g}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_histogram(path, stats: dict[str, np.ndarray], bins: int = 20) -> None:
    lines = ["site\tbin_low\tbin_high\tcount"]
    for site, vals in stats.items():
        counts, edges = np.histogram(vals, bins=bins)
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            lines.append(f"{site}\t{lo:.9g}\t{hi:.9g}\t{c}")
    Path(path).write_text("\n".join(lines) + "\n")


def stats_summary(stats: dict[str, np.ndarray]) -> list[dict]:
    return [{"site": s, "mean": float(v.mean()), "std": float(v.std()), "var": float(v.var()),
             "min": float(v.min()), "max": float(v.max())} for s, v in stats.items()]
