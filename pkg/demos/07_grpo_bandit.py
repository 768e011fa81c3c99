"""GRPO mechanics on the smallest possible policy: a two-arm visual bandit.

Group-relative policy optimization needs no value network: each prompt
gets a group of rollouts, rewards are standardized within the group
((r - mean) / population std), and the resulting advantages weight the
token log-probs, with a per-token KL penalty against a frozen snapshot
of the pre-update policy.  Here the "image" is a single token, arm 1
pays 1 and arm 0 pays 0, so the policy should saturate toward arm 1 --
visible in under a minute.
"""

import numpy as np

from artok import armodel as am
from artok import seeding, visrl
from artok.autodiff import Tensor

# ---- the two contract corners, on paper-sized inputs ----------------------
adv = visrl.compute_advantages([0.0, 1.0, 0.5, 0.5])
print(f"advantages of [0, 1, .5, .5]: {np.round(adv, 4)}  "
      f"(mean {adv.mean():+.1e}, std {adv.std():.6f})")
print(f"identical rewards collapse to zeros: "
      f"{visrl.compute_advantages([1.0, 1.0, 1.0]).tolist()}")

lp = np.log(np.array([0.3, 0.6]))
same = visrl.kl_estimate(Tensor(lp.copy()), lp)
moved = visrl.kl_estimate(Tensor(lp - 0.4), lp)
print(f"kl estimate: zero at equality ({same.data.max():.1e}), "
      f"positive after a shift ({moved.data.min():.3f}..{moved.data.max():.3f})")

# ---- the bandit -----------------------------------------------------------
vocab = am.Vocabulary(2)
cfg = am.ARConfig(layers=1, width=32, heads=2, context=8, lr=5e-3)
state = am.init_ar(7, vocab, cfg)
rng = seeding.rng_for(7, "demo", "bandit")


def prob_arm_one() -> float:
    seq = am.format_image_only(vocab, [0])
    logits = am.forward(state, seq[None, :-1]).data[0]
    pos = list(seq).index(vocab.BOV)
    z = logits[pos, vocab.visual_base:vocab.visual_base + 2]
    z = z - z.max()
    p = np.exp(z)
    return float(p[1] / p.sum())


print(f"\nbandit: p(arm 1) starts at {prob_arm_one():.3f}")
for step in range(50):
    seqs, visual = am.sample_conditional_batch(state, [], batch=8,
                                               max_visual=1, rng=rng)
    rewards = visual[:, 0].astype(np.float64)
    group = visrl.RolloutGroup([], seqs, rewards,
                               visrl.compute_advantages(rewards), 1)
    old = visrl.snapshot_policy(state)
    m = visrl.grpo_step(state, old, group, lam=0.01)
    if (step + 1) % 10 == 0:
        print(f"  step {step+1:2d}: reward mean {m['reward_mean']:.2f}  "
              f"kl {m['kl']:.2e}  p(arm 1) {prob_arm_one():.3f}")

assert prob_arm_one() > 0.9, "the winning arm should dominate by now"
print("policy saturated on the paying arm")
