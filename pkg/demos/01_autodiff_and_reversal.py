"""
A tiny autodiff tape and the gradient reversal layer
====================================================

Everything in the model is built from a handful of numpy ops that record
themselves on a tape.  This walk-through checks one gradient by hand and
shows what gradient reversal does to it.
"""
import numpy as np

from normtr import tensor as tc

# a scalar loss of a 2x3 parameter
x = tc.parameter(np.array([[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]], dtype=np.float32))
w = tc.tensor(np.array([[0.2], [0.4], [-0.6]], dtype=np.float32))
loss = tc.sum(tc.leaky_relu(x @ w, 0.1))
loss.backward()
print("loss          ", loss.item())
print("d loss / d x  ", x.grad.tolist())

# the same loss behind a reversal: forward unchanged, gradient negated
x.zero_grad()
loss_rev = tc.sum(tc.leaky_relu(tc.grad_reverse(x, 1.0) @ w, 0.1))
loss_rev.backward()
print("reversed loss ", loss_rev.item(), "(identical forward value)")
print("reversed grad ", x.grad.tolist())

# finite differences agree with the plain gradient, to float32 precision
h = 1e-2
num = np.zeros_like(x.data)
base = x.data.copy()
for i in np.ndindex(*base.shape):
    for sign in (+1, -1):
        x.data = base.copy()
        x.data[i] += sign * h
        with tc.no_grad():
            num[i] += sign * tc.sum(tc.leaky_relu(x @ w, 0.1)).item() / (2 * h)
print("central diff  ", np.round(num, 3).tolist())

# full-model check on the tiny configuration (float64, all parameters)
from normtr.gradcheck import gradcheck, tiny_config

rep = gradcheck(tiny_config())
print("\n".join(rep.lines()[:5]), "\n...")
print("all groups pass:", rep.passed, f"({rep.checked} entries, {rep.seconds:.1f}s)")
