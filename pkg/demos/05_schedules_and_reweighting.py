"""Token schedules k(t) and the matching gradient re-weighting, no training.

At time t the decoder sees a noised canvas (t = 0 pure noise, t = 1 clean
image) plus the token tail v_{k(t)..K}: k(t) marks where the tail starts,
so low t leans on tokens and high t leans on pixels.  Three kinds share
one contract (k(0) = 1, k(1) = K + 1, nondecreasing):

* uniform      -- drops tokens from the tail at an even rate,
* custom       -- a dead zone near t = 0 (a = 0.1, then power 1.5) holds
                  the full tail longer, so for every 0 < t < 0.5 strictly
                  more tokens stay decoded than under uniform,
* logit_normal -- drops slowly near both endpoints, fast in the middle.

Each token k then has an inclusion probability p_k (how often it is in
the decoded tail under random t), and training scales its gradient by
alpha / p_k: early tokens are included almost always, late tokens rarely,
and the boost evens out their effective learning rates.  The forward
values must be untouched -- only gradients change.
"""

import numpy as np

from artok import autodiff as ad
from artok import seeding
from artok.autodiff import Tensor
from artok.tokenizer import make_schedule, reweight_tail, schedule_k

K = 64

print("tail start k(t) per schedule kind (K + 1 means the tail is empty):")
print("  t           " + "".join(f"{t:>6.2f}" for t in np.arange(0, 1.01, 0.125)))
for kind in ("uniform", "custom", "logit_normal"):
    row = [schedule_k(kind, t, K) for t in np.arange(0, 1.01, 0.125)]
    print(f"  {kind:<12}" + "".join(f"{k:>6d}" for k in row))

# the dead zone: the custom tail starts strictly earlier than uniform's
# at every 0 < t < 0.5, i.e. strictly more tokens stay decoded
gap = [schedule_k("uniform", t, K) - schedule_k("custom", t, K)
       for t in np.arange(0.01, 0.5, 0.01)]
assert all(g > 0 for g in gap), "custom must keep a longer tail before t = 0.5"
print(f"custom keeps more tokens than uniform at every t in (0, 0.5); "
      f"largest surplus {max(gap)} tokens")

# inclusion probabilities and the alpha / p_k gradient rule
table = make_schedule("custom", K)
p = table.inclusion
print(f"inclusion p_k: first {p[0]:.3f} mid {p[K//2]:.3f} last {p[-1]:.3f}")

rng = seeding.rng_for(5, "demo", "reweight")
tail = Tensor(rng.standard_normal((2, K, 4)))
out = reweight_tail(tail, p, alpha=0.5)
assert np.array_equal(out.data, tail.data), "forward must be the identity"

w = Tensor(rng.standard_normal((2, K, 4)))
loss = ad.sum(ad.mul(out, w))
ad.backward(loss)
ratio = tail.grad / w.data
print("forward untouched; gradient on token k scaled by alpha / p_k:")
for k in (0, K // 2, K - 1):
    print(f"  k={k+1:2d}: measured {ratio[0, k, 0]:.4f}  expected {0.5 / p[k]:.4f}")
