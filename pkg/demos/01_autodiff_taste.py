"""A taste of the reverse-mode tape: build, differentiate, verify, fit.

Every tensor op used by the bigger models runs through the same tape, so
this demo does three things you'd want to see before trusting any of it:

1. differentiate a small expression and check the numbers against central
   finite differences,
2. show the straight-through trick that the quantizer relies on,
3. fit a tiny two-layer network to a 1-D regression target with nothing
   but the tape and a loop.
"""

import numpy as np

from artok import autodiff as ad
from artok.autodiff import Tensor

rng = np.random.default_rng(0)

# --- 1. gradient of a composite expression vs finite differences --------
x_data = rng.normal(size=(4, 3))
w_data = rng.normal(size=(3, 5))


def loss_value(x):
    h = np.maximum(x @ w_data, 0.0)
    p = np.exp(h) / np.exp(h).sum(axis=1, keepdims=True)
    return (p * p).sum()


x = Tensor(x_data.copy(), requires_grad=True)
h = ad.relu(ad.matmul(x, Tensor(w_data)))
p = ad.softmax(h, axis=1)
ad.backward(ad.tsum(ad.mul(p, p)))

eps = 1e-5
num = np.zeros_like(x_data)
for i in np.ndindex(*x_data.shape):
    bump = x_data.copy()
    bump[i] += eps
    dip = x_data.copy()
    dip[i] -= eps
    num[i] = (loss_value(bump) - loss_value(dip)) / (2 * eps)

err = np.abs(x.grad - num).max()
print(f"composite expression: max |analytic - numeric| = {err:.2e}")

# --- 2. straight-through: forward from one tensor, gradient to another --
v = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
codes = Tensor(rng.normal(size=(2, 3)))
st = ad.straight_through(v, codes)
print(f"straight-through forward equals codes: {np.array_equal(st.data, codes.data)}")
ad.backward(ad.tsum(st))
print(f"...but the gradient lands on v: {np.array_equal(v.grad, np.ones((2, 3)))}")

# --- 3. fit sin(3x) with a 16-unit MLP ----------------------------------
xs = np.linspace(-1, 1, 64)[:, None]
ys = np.sin(3.0 * xs)

w1 = Tensor(rng.normal(size=(1, 16)) * 0.5, requires_grad=True)
b1 = Tensor(np.zeros(16), requires_grad=True)
w2 = Tensor(rng.normal(size=(16, 1)) * 0.5, requires_grad=True)
b2 = Tensor(np.zeros(1), requires_grad=True)
params = [w1, b1, w2, b2]

lr = 0.05
for step in range(400):
    hid = ad.sigmoid(ad.add(ad.matmul(Tensor(xs), w1), b1))
    pred = ad.add(ad.matmul(hid, w2), b2)
    loss = ad.mse(pred, Tensor(ys))
    for t in params:
        t.grad = None
    ad.backward(loss)
    for t in params:
        t.data -= lr * t.grad
    if step % 100 == 0 or step == 399:
        print(f"  step {step:3d}: mse {float(loss.data):.5f}")

print("done — the same tape drives the tokenizer, renderer, and policy nets")
