"""Fake quantization, the trainable clamp, and where its gradient comes from."""
# %%
import numpy as np

from pams import quant as Q
from pams import tensor as T
from pams.tensor import Tape, Tensor

# %% the symmetric grid: 2^n - 1 levels on [-a, a]
x = np.linspace(-1.5, 1.5, 13)
for n in (2, 3, 4):
    q = Q.quantize_symmetric(x, n, 1.0).values.data
    print(f"{n} bits:", np.round(q, 3), "levels:", len(np.unique(Q.quantize_symmetric(np.linspace(-2, 2, 10001), n, 1.0).values.data)))

print("0.5 at 8 bits ->", Q.quantize_symmetric(np.array([0.5]), 8, 1.0).values.data[0], "= 64/127")

# %% PAMS: alpha is a parameter. Saturated values push on it, interior ones do not.
state = Q.QuantizerState(n_bits=4, mode=Q.PAMS, alpha=Tensor(np.array(1.0)))
xs = Tensor(np.array([-3.0, -0.4, 0.2, 0.9, 1.0, 2.5, 4.0]), requires_grad=True)
with Tape() as tape:
    loss = T.sum_(Q.quantize_activation(xs, state).values)
tape.backward(loss)
print("x       ", xs.data)
print("grad x  ", xs.grad)
print("grad a  ", state.alpha_grad, "(three values >= a add +1, one <= -a adds -1)")

# %% PACT clips at zero: negative inputs never reach alpha
pact = Q.QuantizerState(n_bits=4, mode=Q.PACT, alpha=Tensor(np.array(1.0)))
with Tape() as tape:
    loss = T.sum_(Q.quantize_activation(Tensor(xs.data), pact).values)
tape.backward(loss)
print("PACT grad a", pact.alpha_grad, "vs PAMS", state.alpha_grad)

# %% a fixed max bound set from a batch with one outlier wastes the grid
rng = np.random.default_rng(0)
acts = np.abs(rng.normal(0, 0.3, size=(4, 256)))
acts[2, 7] = 20.0
fixed = Q.ema_update_alpha(Q.QuantizerState(4, Q.FIXED_MAX), Q.per_sample_absmax(acts))
print("EMA bound after outlier batch:", round(fixed.alpha_value, 3))
used = np.unique(Q.quantize_activation(acts, fixed).values.data)
print("distinct levels actually used:", len(used), "of", 2 ** 4 - 1)
