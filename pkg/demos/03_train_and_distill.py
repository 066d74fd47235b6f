"""Desk-scale training: a teacher, then 4-bit students with and without distillation.

By default this runs a shortened schedule (about a minute).  Pass ``--full``
for the 200-step protocol used by the acceptance tests.
"""
# %%
import sys
import tempfile
from dataclasses import replace

import numpy as np

from pams import experiments as X
from pams.training import evaluate

full = "--full" in sys.argv
teacher_cfg = X.TEACHER_CONFIG if full else replace(X.TEACHER_CONFIG, epochs=6, lr_halving_period=3)
student_cfg = X.STUDENT_CONFIG if full else replace(X.STUDENT_CONFIG, epochs=3, lr_halving_period=3)

# %% toy corpus: smooth scenes with patches of fine texture
root = tempfile.mkdtemp(prefix="pams_demo_")
train_pairs, val_pairs = X.toy_corpus(root)
print(len(train_pairs), "train /", len(val_pairs), "val images; LR", train_pairs[0].lr.shape)

# %% full-precision teacher
teacher = X.desk_teacher(train_pairs, cfg=teacher_cfg)
t = evaluate(teacher, val_pairs)
print(f"bicubic {X.bicubic_psnr(val_pairs):.2f} dB, teacher {t.psnr_db:.2f} dB / SSIM {t.ssim:.4f}")

# %% quantize and fine-tune
for bits, quantizer, ls in [(8, "pams", 1e3), (4, "pams", 1e3), (4, "fixed_max", 1e3), (4, "pams", 0.0)]:
    s = X.desk_student(teacher, train_pairs, bits, quantizer, seed=0, lambda_s=ls, cfg=student_cfg)
    ev = evaluate(s, val_pairs)
    print(f"{bits}-bit {quantizer:9s} lambda_s={ls:<6g} {ev.psnr_db:.2f} dB / SSIM {ev.ssim:.4f}")

# %% the last student's bounds after fine-tuning, one per site
print({k: round(v.alpha_value, 3) for k, v in s.quantizer_states.items()})
