"""The numpy autodiff core and the quantized EDSR-style network."""
# %%
import numpy as np

from pams import quant as Q
from pams import tensor as T
from pams.losses import pixel_l1
from pams.model import ModelConfig, build_model, quantize_from
from pams.tensor import Tape, Tensor
from pams.training import calibrate_alphas

rng = np.random.default_rng(0)

# %% conv2d is cross-correlation; an all-ones 3x3 kernel counts neighbours
ones = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), None, padding=1)
print(ones.data[0, 0])

# %% pixel shuffle moves channel groups into space
print(T.pixel_shuffle(Tensor(np.arange(4.0).reshape(1, 4, 1, 1)), 2).data[0, 0])

# %% gradients come from a tape
w = Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)
x = rng.normal(size=(1, 1, 5, 5))
with Tape() as tape:
    loss = T.sum_(T.square(T.conv2d(Tensor(x), w, None, 1)))
tape.backward(loss)
h = 1e-6
w.data[0, 0, 1, 1] += h
up = float(T.sum_(T.square(T.conv2d(Tensor(x), w, None, 1))).data)
w.data[0, 0, 1, 1] -= h
print("analytic", w.grad[0, 0, 1, 1], "numeric", (up - float(loss.data)) / h)

# %% the network: only the residual blocks are quantized
fp = build_model(ModelConfig(n_blocks=4, n_channels=16), seed=0)
q4 = quantize_from(fp, 4)
print("sites:", q4.site_names())
print("quantized weights:", q4.quantized_weight_names()[:2], "...")

lr = rng.uniform(0, 255, size=(2, 3, 12, 12))
calibrate_alphas(q4, [lr], 1)
print({s: round(st.alpha_value, 3) for s, st in q4.quantizer_states.items()})

before = Q.call_count
_, sr_fp = fp.forward(lr)
print("quantizer calls, full precision:", Q.call_count - before)
_, sr_q = q4.forward(lr)
print("quantizer calls, 4-bit:", Q.call_count - before)
print("output", sr_q.shape, "mean |fp - q4| =", float(np.abs(sr_fp.data - sr_q.data).mean()))

# %% one backward pass reaches weights and every alpha
with Tape() as tape:
    loss = pixel_l1(q4.forward(lr)[1], Tensor(rng.uniform(0, 255, size=(2, 3, 24, 24))))
tape.backward(loss)
print({s: st.alpha_grad for s, st in list(q4.quantizer_states.items())[:3]})
