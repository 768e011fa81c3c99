"""Two diagnostics: exact policy-value checks and entropy-vs-position curves.

First, tabular MDPs small enough to enumerate every trajectory.  The
expected return of a policy computed by brute-force enumeration must
match the Bellman recursion to machine precision -- a correctness oracle
for anything that later claims to estimate values.

Second, the conditional entropy of an AR model over visual tokens, as a
function of position.  When the model is trained on sequences in the
tokenizer's native coarse-to-fine order, later tokens are more
predictable from earlier ones, so mean entropy should drift downward
with position; segment-permuted orderings blur that trend.  The second
part trains a small model and takes a few minutes on one core.
"""

import time

import numpy as np

from artok import armodel as am
from artok import diagnostics as dg
from artok import scenes, seeding, visrl
from artok import tokenizer as tk

# ---- Bellman verification -------------------------------------------------
worst = 0.0
for i in range(20):
    rng = seeding.rng_for(8, "demo", "mdp", str(i))
    mdp, policy = visrl.random_mdp(rng)
    gap = visrl.bellman_verify(mdp, policy)
    worst = max(worst, gap)
print(f"bellman check over 20 random MDPs: worst |enumeration - recursion| "
      f"= {worst:.2e}")
assert worst <= 1e-12

# ---- entropy vs position --------------------------------------------------
rng = seeding.rng_for(8, "demo", "entropy-corpus")
_, images = scenes.sample_corpus(rng, 96)
tok = tk.init_tokenizer(0, tk.TokenizerConfig())
batches = seeding.rng_for(8, "demo", "entropy-batches")
t0 = time.time()
for _ in range(300):
    tk.train_step(tok, images[batches.choice(64, 8, replace=False)])
print(f"tokenizer ready in {time.time()-t0:.0f}s")

k = tok.cfg.token_count
grid = tk.tokenize(tok, images)
vocab = am.Vocabulary(tok.cfg.codebook_size)
cfg = am.ARConfig(layers=2, width=64, heads=2, context=96)

for kind in ("sequential", "stride_one"):
    order = dg.make_order(kind, k)
    seqs = am.image_only_corpus(vocab, grid[:64][:, order])
    ar = am.init_ar(8, vocab, cfg)
    t0 = time.time()
    am.train_ar(ar, seqs, steps=300, seed=8)
    hold = am.image_only_corpus(vocab, grid[64:][:, order])
    curve = dg.entropy_curve(ar, hold)
    bounds = dg.segment_bounds(kind, k)
    trends = dg.segment_trends(curve, bounds)
    print(f"{kind}: trained in {time.time()-t0:.0f}s")
    print(f"  entropy head {curve[:4].round(2)} ... tail {curve[-4:].round(2)}")
    print(f"  overall spearman {dg.spearman_trend(curve):+.3f}   "
          f"per-segment {[f'{x:+.3f}' for x in trends]}")
