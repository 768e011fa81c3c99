"""Acceptance gate: twelve end-to-end criteria, one pass/fail line each.

Light criteria re-derive their expected values inline from closed forms;
heavy ones consume the session-scoped trained artifacts from conftest.
Every test funnels through ``check`` so the terminal summary always shows
one line per criterion with the measured numbers.
"""

import math
import time
from fractions import Fraction

import numpy as np

import conftest
import test_armodel
import test_autodiff
import test_visrl
from artok import armodel as am
from artok import autodiff as ad
from artok import metrics
from artok import renderer as rd
from artok import seeding, visrl
from artok import tokenizer as tk
from artok.autodiff import Tensor


def check(num: int, ok, detail: str = "") -> None:
    conftest.record(num, ok, detail)
    assert ok, f"criterion {num} ({conftest.CRITERIA[num]}): {detail}"


# ---------------------------------------------------------------------------
# 1. every differentiable op against central finite differences


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    failures = []
    for op in test_autodiff.OP_NAMES:
        try:
            test_autodiff.test_op_matches_finite_differences(op)
        except AssertionError as err:
            failures.append(f"{op}: {err}")
    seconds = time.perf_counter() - t0
    detail = (f"{len(test_autodiff.OP_NAMES)} ops x 100 trials, "
              f"rel tol 1e-3, {seconds:.1f}s")
    if failures:
        detail += f"; failed {failures}"
    check(1, not failures and seconds < 60.0, detail)


# ---------------------------------------------------------------------------
# 2. quantizer mechanics against closed forms, exact to 1e-9


def test_criterion_02_quantizer_mechanics():
    tol = 1e-9
    rng = np.random.default_rng(7)
    worst = 0.0

    # straight-through: forward equals the selected words, backward passes
    # upstream gradients to v unchanged
    cb = tk.Codebook(rng, size=8, dim=4)
    v_data = rng.normal(size=(2, 3, 4))
    v = Tensor(v_data.copy(), requires_grad=True)
    res = tk.quantize(v, cb)
    vn = v_data.reshape(-1, 4)
    vn = vn / np.linalg.norm(vn, axis=1, keepdims=True)
    wn = cb.words / np.linalg.norm(cb.words, axis=1, keepdims=True)
    expect_tokens = (vn @ wn.T).argmax(axis=1).reshape(2, 3)
    tokens_ok = np.array_equal(res.tokens, expect_tokens)
    forward_ok = np.array_equal(res.quantized.data,
                                cb.words[res.tokens.reshape(-1)].reshape(2, 3, 4))
    w = rng.normal(size=(2, 3, 4))
    ad.backward(ad.tsum(ad.mul(res.quantized, Tensor(w))))
    worst = max(worst, float(np.abs(v.grad - w).max()))

    # commitment and entropy terms against independent formulas
    sel = cb.words[res.tokens.reshape(-1)].reshape(2, 3, 4)
    commit_expect = ((v_data - sel) ** 2).sum() / 2.0
    worst = max(worst, abs(float(res.commit.data) - commit_expect))
    worst = max(worst, abs(float(res.entropy_term.data)
                           - tk.entropy_loss_from_mass(res.p_bar)))

    # EMA closed form: one assigned vector u pulls word w to 0.8 w + 0.2 u;
    # unassigned words conserved bitwise
    cb2 = tk.Codebook(rng, size=4, dim=3)
    before = cb2.words.copy()
    u = rng.normal(size=3)
    cb2.ema_update(u[None, None, :], np.array([[2]]))
    worst = max(worst, float(np.abs(cb2.words[2] - (0.8 * before[2] + 0.2 * u)).max()))
    conserved = all(np.array_equal(cb2.words[i], before[i]) for i in (0, 1, 3))

    # usage EMA and dead-code reactivation at 0.0125 / C
    cb3 = tk.Codebook(rng, size=4, dim=3)
    p_bar = np.array([0.7, 0.3, 0.0, 0.0])
    prev = cb3.usage.copy()
    cb3.usage_update(p_bar)
    worst = max(worst, float(np.abs(cb3.usage - (0.99 * prev + 0.01 * p_bar)).max()))
    cb3.usage[1] = 0.0125 / 4 - 1e-12       # just below threshold
    batch = rng.normal(size=(5, 3))
    revived = cb3.revive_dead(batch, np.random.default_rng(0))
    dist = np.linalg.norm(batch - cb3.words[1], axis=1).min()
    usage_reset = cb3.usage[1] == 0.25
    worst = max(worst, float(dist))

    # entropy term minimized exactly at uniform mass: -log C for C = 4
    uniform = tk.entropy_loss_from_mass(np.full(4, 0.25))
    worst = max(worst, abs(uniform - (-math.log(4))))
    others_above = all(
        tk.entropy_loss_from_mass(p / p.sum()) > uniform
        for p in (rng.random(4) + 0.01 for _ in range(20)))

    ok = (tokens_ok and forward_ok and conserved and revived == 1
          and usage_reset and others_above and worst <= tol)
    check(2, ok, f"worst deviation {worst:.2e} (tol 1e-9)")


# ---------------------------------------------------------------------------
# 3. schedule contracts on a 1e-3 grid


def test_criterion_03_schedule_contracts():
    K = 64
    grid = [Fraction(i, 1000) for i in range(1001)]
    endpoint_ok, monotone_ok = True, True
    for kind in ("uniform", "custom", "logit_normal"):
        ks = [tk.schedule_k(kind, float(t), K) for t in grid]
        endpoint_ok &= ks[0] == 1 and ks[-1] == K + 1
        monotone_ok &= all(b >= a for a, b in zip(ks, ks[1:]))
    # custom allocates strictly fewer tokens than ceil(tK) + 1 for t < 1/2
    strict = []
    for t in grid:
        if 0 < t < Fraction(1, 2):
            uniform_ref = -((-t.numerator * K) // t.denominator) + 1
            strict.append(tk.schedule_k("custom", float(t), K) < uniform_ref)
    custom_ok = all(strict)
    check(3, endpoint_ok and monotone_ok and custom_ok,
          f"3 kinds on 1001-point grid; custom strictly below uniform at "
          f"{sum(strict)}/{len(strict)} points below t=1/2")


# ---------------------------------------------------------------------------
# 4. re-weighting: forward invariance, backward scale alpha / p_k


def test_criterion_04_reweighting():
    rng = np.random.default_rng(3)
    tail_data = rng.normal(size=(2, 5, 3))
    inclusion = rng.uniform(0.1, 1.0, size=5)
    alpha = 0.5
    w = rng.normal(size=(2, 5, 3))

    tail = Tensor(tail_data.copy(), requires_grad=True)
    out = tk.reweight_tail(tail, inclusion, alpha)
    forward_ok = np.array_equal(out.data, tail_data)
    ad.backward(ad.tsum(ad.mul(out, Tensor(w))))
    g_weighted = tail.grad.copy()

    plain = Tensor(tail_data.copy(), requires_grad=True)
    ad.backward(ad.tsum(ad.mul(plain, Tensor(w))))
    ratio = g_weighted / plain.grad
    expect = (alpha / inclusion)[None, :, None]
    worst = float(np.abs(ratio - expect).max())
    check(4, forward_ok and worst <= 1e-9,
          f"forward bit-exact, backward ratio off by {worst:.2e} (tol 1e-9)")


# ---------------------------------------------------------------------------
# 5. tokenizer smoke training on the 512-image corpus


def test_criterion_05_tokenizer_smoke(corpus, tok_k64, tok_k16):
    w0 = float(np.mean(tok_k64["mse"][:50]))
    w1 = float(np.mean(tok_k64["mse"][-50:]))
    f16 = float(np.mean(tok_k16["mse"][-50:]))
    ratio = w0 / w1
    seconds = corpus["seconds"] + tok_k64["seconds"] + tok_k16["seconds"]
    ok = ratio >= 5.0 and w1 <= f16 and seconds <= 600.0
    check(5, ok, f"K=64 mse {w0:.3f}->{w1:.4f} ({ratio:.1f}x, need >=5x); "
                 f"K=16 final {f16:.4f} (need K64 <= K16); {seconds:.0f}s of 600")


# ---------------------------------------------------------------------------
# 6. one-step renderer: determinism and held-out PSNR vs the t=0 decode


def test_criterion_06_renderer(corpus, tok_k64, renderer64):
    tok = tok_k64["state"]
    rend = renderer64["state"]
    hold = corpus["hold"]
    tokens = tk.tokenize(tok, hold)
    out_a = rd.render(tokens, tok.codebook, rend)
    out_b = rd.render(tokens, tok.codebook, rend)
    deterministic = out_a.tobytes() == out_b.tobytes()
    noise = seeding.rng_for(993, "tokenizer", "eval_noise")
    x0 = noise.standard_normal(hold.shape)
    decoded = np.clip(tk.decode_token_ids(tok, tokens, x0, 0.0, 1), 0.0, 1.0)
    psnr_r = float(np.mean([metrics.psnr(a, b) for a, b in zip(out_a, hold)]))
    psnr_d = float(np.mean([metrics.psnr(a, b) for a, b in zip(decoded, hold)]))
    check(6, deterministic and psnr_r >= psnr_d,
          f"bit-identical renders; held-out PSNR {psnr_r:.2f} dB vs "
          f"t=0 decode {psnr_d:.2f} dB")


# ---------------------------------------------------------------------------
# 7. entropy-vs-position diagnostics across orderings


def test_criterion_07_entropy_diagnostics(entropy_runs):
    seq = entropy_runs["sequential"]
    s1 = entropy_runs["stride_one"]
    s2 = entropy_runs["stride_two"]
    seq_ok = seq["overall"] < 0.0
    seg_ok = all(t < 0.0 for t in s1["segments"] + s2["segments"])
    detail = (f"sequential rho {seq['overall']:+.3f}; stride-one segments "
              f"{[f'{t:+.2f}' for t in s1['segments']]}; stride-two "
              f"{[f'{t:+.2f}' for t in s2['segments']]}")
    check(7, seq_ok and seg_ok, detail)


# ---------------------------------------------------------------------------
# 8. adjusted sampling: degeneracies and the fired counter


def test_criterion_08_adjusted_sampling():
    rng = np.random.default_rng(11)
    lc = rng.normal(size=12)
    lu = rng.normal(size=12)
    # gamma = 1: adjusted logits bit-identical even when firing
    adj, fired, _ = am.adjust_logits(lc, lu, tau=0.0, gamma=1.0)
    gamma_ok = fired and np.array_equal(adj, lc)
    # tau = inf: never fires, logits unchanged
    adj2, fired2, _ = am.adjust_logits(lc, lu, tau=math.inf, gamma=10.0)
    tau_ok = (not fired2) and np.array_equal(adj2, lc)
    # scripted model: the counter matches the H > tau positions exactly
    vocab = am.Vocabulary(16)
    fn = test_armodel.scripted_model(vocab, peak_id=7, uncond_peak_id=2)
    res = am.sample_adjusted(fn, [vocab.count_id(1)],
                             am.AdjustConfig(tau=2.0, gamma=10.0),
                             np.random.default_rng(0), max_visual=4,
                             vocab=vocab, forbid_eov=True)
    counter_ok = (np.array_equal(res.fired, res.entropies > 2.0)
                  and res.fired_count == int((res.entropies > 2.0).sum()))
    check(8, gamma_ok and tau_ok and counter_ok,
          f"degeneracies exact; fired {res.fired_count} == "
          f"H>tau count {int((res.entropies > 2.0).sum())}")


# ---------------------------------------------------------------------------
# 9. Bellman: enumeration vs backward recursion on 100 random MDPs


def test_criterion_09_bellman():
    worst = 0.0
    for i in range(100):
        rng = seeding.rng_for(9, "acceptance", "mdp", str(i))
        mdp, policy = visrl.random_mdp(rng)
        worst = max(worst, visrl.bellman_verify(mdp, policy))
    check(9, worst <= 1e-12, f"worst residual {worst:.2e} over 100 MDPs "
                             f"(tol 1e-12)")


# ---------------------------------------------------------------------------
# 10. GRPO mechanics: advantages, KL estimator, bandit improvement


def test_criterion_10_grpo_mechanics():
    rng = np.random.default_rng(17)
    adv_ok = True
    for _ in range(50):
        r = rng.normal(size=int(rng.integers(2, 12)))
        a = visrl.compute_advantages(r)
        adv_ok &= abs(a.mean()) <= 1e-12 and abs(a.std() - 1.0) <= 1e-12
    adv_ok &= np.array_equal(visrl.compute_advantages([1.0, 1.0, 1.0, 1.0]),
                             np.zeros(4))
    pair = visrl.compute_advantages([0.0, 1.0])
    adv_ok &= np.abs(pair - [-1.0, 1.0]).max() <= 1e-12

    lp = np.log(rng.uniform(0.05, 0.95, size=(3, 4)))
    kl_zero = float(np.abs(visrl.kl_estimate(Tensor(lp.copy()), lp).data).max()) == 0.0
    down = lp + rng.uniform(-0.5, -0.05, size=lp.shape)
    up = lp + rng.uniform(0.05, 0.5, size=lp.shape)
    kl_ok = (kl_zero
             and (visrl.kl_estimate(Tensor(down), lp).data > 0).all()
             and (visrl.kl_estimate(Tensor(up), lp).data > 0).all())

    state, vocab = test_visrl.bandit_setup(seed=2)
    brng = seeding.rng_for(2, "bandit")
    probs = [test_visrl.bandit_prob(state, vocab)]
    for _ in range(50):
        old = visrl.snapshot_policy(state)
        visrl.grpo_step(state, old,
                        test_visrl.bandit_group(state, vocab, brng), lam=0.01)
        probs.append(test_visrl.bandit_prob(state, vocab))
    ma = np.convolve(probs, np.ones(10) / 10, mode="valid")
    bandit_ok = (all(b >= a - 1e-9 for a, b in zip(ma, ma[1:]))
                 and probs[-1] > probs[0] + 0.3)
    check(10, adv_ok and kl_ok and bandit_ok,
          f"advantages exact; KL zero at equality, positive off it; "
          f"bandit pi(best) {probs[0]:.2f}->{probs[-1]:.2f} monotone")


# ---------------------------------------------------------------------------
# 11. end-to-end visual RL on held-out prompts


def test_criterion_11_visual_rl(rl_run):
    gain = rl_run["after"]["mean"] - rl_run["before"]["mean"]
    seconds = rl_run["seconds"]
    check(11, gain >= 0.1 and seconds <= 1800.0,
          f"held-out reward {rl_run['before']['mean']:.3f}->"
          f"{rl_run['after']['mean']:.3f} (gain {gain:+.3f}, need >=+0.1); "
          f"{seconds:.0f}s of 1800")


# ---------------------------------------------------------------------------
# 12. ordering harness: native vs permuted target orders


def test_criterion_12_ordering(ordering_run):
    native = ordering_run["native"]["final"]
    stride = ordering_run["stride_shuffled"]["final"]
    rev = ordering_run["reversed"]["final"]
    margin = min(native - stride, native - rev)
    check(12, margin >= 0.05,
          f"final reward native {native:.3f} vs stride {stride:.3f} / "
          f"reversed {rev:.3f} (margin {margin:+.3f}, need >=+0.05)")
