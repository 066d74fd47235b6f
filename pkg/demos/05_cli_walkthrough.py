"""The command-line workflow end to end, on a small corpus with a short config."""
# %%
import json
import tempfile
from pathlib import Path

from pams.cli import main

work = Path(tempfile.mkdtemp(prefix="pams_cli_"))
data, cfg = work / "data", work / "config.json"
cfg.write_text(json.dumps({
    "model": {"n_blocks": 2, "n_channels": 8},
    "train": {"epochs": 2, "steps_per_epoch": 4, "batch_size": 4, "patch_size": 16,
              "lr": 2e-3, "lr_halving_period": 1},
}))

# %%
main(["make-toy", "--out", str(data), "--images", "8", "--size", "64", "--val", "2"])
main(["train", "--config", str(cfg), "--data", str(data), "--out", str(work / "fp")])
main(["train", "--config", str(cfg), "--data", str(data), "--teacher", str(work / "fp" / "model.ckpt"),
      "--bits", "4", "--out", str(work / "q4")])

# %%
main(["eval", "--model", str(work / "q4" / "model.ckpt"), "--data", str(data), "--scale", "2", "--bicubic"])
main(["export", "--model", str(work / "q4" / "model.ckpt"), "--bits", "4", "--out", str(work / "q4.pack")])
main(["size", "--model", str(work / "q4.pack"), "--bits", "4"])
main(["stats", "--model", str(work / "fp" / "model.ckpt"), "--data", str(data), "--out", str(work / "stats.tsv")])
print("outputs in", work)
