"""Bit-packed export, storage accounting and activation-range statistics."""
# %%
import tempfile
from pathlib import Path

import numpy as np

from pams.export import (PackedModel, activation_stats, load_model, pack_model, size_from_counts,
                         size_report, stats_summary)
from pams.model import ModelConfig, build_model, quantize_from
from pams.training import calibrate_alphas

rng = np.random.default_rng(0)
out = Path(tempfile.mkdtemp(prefix="pams_export_"))

# %% storage in 32-bit parameter units, for a full-size EDSR (1.176M block weights, 0.337M other)
for n in (32, 8, 4, 2):
    r = size_from_counts(1.176e6, 0.337e6, n)
    print(f"{n:2d} bits: {r.storage_quantized / 1e6:.3f}M  r_comp {r.compression_ratio:.1%}")

# %% pack a 4-bit desk model and read it back
model = quantize_from(build_model(ModelConfig(), seed=1), 4)
images = [rng.uniform(0, 255, size=(3, 16, 16)) * rng.uniform(0.3, 1.0) for _ in range(16)]
calibrate_alphas(model, [np.stack(images[:4])], 1)
pm = pack_model(model)
pm.save(out / "model.pack")
rep = size_report(model, 4)
print("payload bits", pm.payload_bits(), "accounted", int(rep.storage_quantized * 32),
      "file bytes", (out / "model.pack").stat().st_size)

back = load_model(out / "model.pack")
x = np.stack(images[:2])
same = back.forward(x)[1].data.tobytes() == model.forward(x)[1].data.tobytes()
print("bit-identical forward after unpack:", same)

# %% per-sample maxima differ across inputs at every site
stats = activation_stats(build_model(ModelConfig(), seed=1), images)
for row in stats_summary(stats)[:4]:
    print(f"{row['site']:16s} min {row['min']:.3f}  max {row['max']:.3f}  std {row['std']:.3f}")
