"""AR model: vocabulary, formats, causality, entropy, logit adjustment."""

import math

import numpy as np
import pytest

from artok import armodel as am
from artok.autodiff import ContractViolation

VOCAB = am.Vocabulary(32)
TINY = am.ARConfig(layers=2, width=64, heads=2, context=32)


def make_corpus(n=4, k=8, seed=0):
    rng = np.random.default_rng(seed)
    grid = rng.integers(32, size=(n, k))
    prompts = [[VOCAB.count_id(i % 5), VOCAB.color_id("red")] for i in range(n)]
    return am.t2i_corpus(VOCAB, prompts, grid), prompts, grid


# ---------------------------------------------------------------------------
# vocabulary and formats


def test_vocab_ranges_disjoint():
    v = VOCAB
    ids = ([getattr(v, s) for s in v.SPECIALS]
           + [v.count_id(n) for n in range(5)]
           + [v.color_id(c) for c in ("black", "magenta")]
           + [v.kind_id(k) for k in ("square", "triangle")]
           + [v.position_id(p) for p in ("left_of", "below")]
           + [v.visual_id(0), v.visual_id(31)])
    assert len(set(ids)) == len(ids)
    assert v.size == 6 + 5 + 8 + 3 + 4 + 32
    assert v.describe(v.visual_id(3)) == "v3"
    assert v.describe(v.color_id("cyan")) == "color:cyan"


def test_vocab_bounds():
    with pytest.raises(ContractViolation):
        VOCAB.visual_id(32)
    with pytest.raises(ContractViolation):
        VOCAB.count_id(5)
    with pytest.raises(ContractViolation):
        VOCAB.visual_index(VOCAB.BOS)


def test_format_and_split_round_trip():
    prompt = [VOCAB.count_id(2), VOCAB.kind_id("circle")]
    vis = [5, 0, 31, 7]
    seq = am.format_t2i(VOCAB, prompt, vis)
    assert seq[0] == VOCAB.BOS and seq[-1] == VOCAB.EOS
    p, v = am.split_sequence(VOCAB, seq)
    assert p == prompt and v == vis
    io = am.format_image_only(VOCAB, vis)
    p2, v2 = am.split_sequence(VOCAB, io)
    assert p2 == [] and v2 == vis


def test_split_rejects_malformed():
    v = VOCAB
    with pytest.raises(ContractViolation):
        am.split_sequence(v, [v.BOS, v.visual_id(0), v.EOS])          # no bracket
    with pytest.raises(ContractViolation):
        am.split_sequence(v, [v.BOS, v.BOV, v.count_id(1), v.EOV])    # non-visual inside
    with pytest.raises(ContractViolation):
        am.split_sequence(v, [v.BOS, v.visual_id(1), v.BOV, v.EOV])   # visual outside


def test_corpus_null_blanking_preserves_length():
    rng = np.random.default_rng(3)
    grid = rng.integers(32, size=(50, 4))
    prompts = [[VOCAB.count_id(1), VOCAB.color_id("blue")]] * 50
    seqs = am.t2i_corpus(VOCAB, prompts, grid, null_fraction=0.5, rng=rng)
    assert seqs.shape == (50, 4 + 2 + 4)
    nulls = (seqs[:, 1] == VOCAB.NULL_PROMPT)
    assert 5 < nulls.sum() < 45
    # blanked rows are NULL at every prompt position
    assert (seqs[nulls, 2] == VOCAB.NULL_PROMPT).all()


def test_corpus_rejects_mixed_lengths():
    grid = np.zeros((2, 4), dtype=int)
    prompts = [[VOCAB.count_id(1)], [VOCAB.count_id(1), VOCAB.color_id("red")]]
    with pytest.raises(ContractViolation):
        am.t2i_corpus(VOCAB, prompts, grid)


def test_image_only_corpus_ordering():
    grid = np.array([[10, 11, 12, 13]])
    seqs = am.image_only_corpus(VOCAB, grid, order=np.array([2, 0, 3, 1]))
    _, vis = am.split_sequence(VOCAB, seqs[0])
    assert vis == [12, 10, 13, 11]


def test_config_head_divisibility():
    with pytest.raises(ContractViolation):
        am.ARConfig(width=100, heads=3)


# ---------------------------------------------------------------------------
# training


def test_initial_loss_near_log_vocab():
    state = am.init_ar(0, VOCAB, TINY)
    seqs, _, _ = make_corpus()
    loss = float(am.ar_loss(state, seqs).data)
    assert abs(loss - math.log(VOCAB.size)) < 0.1 * math.log(VOCAB.size)


def test_overfits_four_sequences():
    # four distinct sequences carry ln(4) nats of irreducible choice, so the
    # per-position floor is ln(4)/(L-1); length 38 puts that at 0.037
    cfg = am.ARConfig(layers=2, width=64, heads=2, context=48)
    state = am.init_ar(1, VOCAB, cfg)
    seqs, _, _ = make_corpus(n=4, k=32)
    hist = am.train_ar(state, seqs, steps=700, seed=2)
    assert hist[-1] < 0.05, f"final loss {hist[-1]:.4f}"


def test_causal_mask_probe():
    state = am.init_ar(2, VOCAB, TINY)
    seqs, _, _ = make_corpus()
    ids = seqs[:2, :10]
    base = am.forward(state, ids).data
    for j in (4, 7, 9):
        mod = ids.copy()
        mod[:, j] = (mod[:, j] + 5) % VOCAB.size
        out = am.forward(state, mod).data
        assert np.array_equal(out[:, :j], base[:, :j]), f"position {j} leaks backward"
        assert not np.array_equal(out[:, j], base[:, j])


def test_forward_contract_errors():
    state = am.init_ar(3, VOCAB, TINY)
    with pytest.raises(ContractViolation):
        am.forward(state, np.zeros((1, TINY.context + 1), dtype=int))
    with pytest.raises(ContractViolation):
        am.forward(state, np.full((1, 4), VOCAB.size))


def test_sequence_logprob_matches_loss():
    state = am.init_ar(4, VOCAB, TINY)
    seqs, _, _ = make_corpus(n=1)
    assert am.sequence_logprob(state, seqs[0]) == pytest.approx(
        -float(am.ar_loss(state, seqs[:1]).data), abs=1e-12)


# ---------------------------------------------------------------------------
# entropy


def test_entropy_uniform_and_peaked():
    assert am.entropy(np.zeros(58)) == pytest.approx(math.log(58), abs=1e-12)
    peaked = np.zeros(10)
    peaked[3] = 50.0
    assert am.entropy(peaked) == pytest.approx(0.0, abs=1e-9)


def test_entropy_direct_summation_oracle():
    x = [1.0, 2.0, 3.0]
    z = sum(math.exp(v) for v in x)
    expected = -sum((math.exp(v) / z) * math.log(math.exp(v) / z) for v in x)
    assert am.entropy(np.array(x)) == pytest.approx(expected, abs=1e-12)


def test_entropy_rejects_nonfinite():
    with pytest.raises(ContractViolation):
        am.entropy(np.array([1.0, np.inf]))


# ---------------------------------------------------------------------------
# logit adjustment


def test_adjust_gamma_one_is_identity():
    rng = np.random.default_rng(5)
    lc, lu = rng.normal(size=20), rng.normal(size=20)
    out, fired, _ = am.adjust_logits(lc, lu, tau=0.0, gamma=1.0)
    assert fired and np.array_equal(out, lc + 0.0 * (lc - lu))
    assert np.allclose(out, lc, atol=0)


def test_adjust_fires_iff_entropy_exceeds_tau():
    rng = np.random.default_rng(6)
    lu = rng.normal(size=12)
    flat = np.zeros(12)                       # H = ln 12 ~ 2.48
    peaked = np.zeros(12); peaked[0] = 30.0   # H ~ 0
    out, fired, h = am.adjust_logits(flat, lu, tau=2.0, gamma=10.0)
    assert fired and h == pytest.approx(math.log(12), abs=1e-12)
    assert np.allclose(out, flat + 9.0 * (flat - lu), atol=1e-12)
    out2, fired2, h2 = am.adjust_logits(peaked, lu, tau=2.0, gamma=10.0)
    assert not fired2 and h2 < 0.1
    assert np.array_equal(out2, peaked)
    # tau = inf never fires
    _, fired3, _ = am.adjust_logits(flat, lu, tau=math.inf, gamma=10.0)
    assert not fired3


def test_adjust_config_invariants():
    with pytest.raises(ContractViolation):
        am.AdjustConfig(gamma=0.5)
    with pytest.raises(ContractViolation):
        am.AdjustConfig(tau=-1.0)


def scripted_model(vocab, peak_id, uncond_peak_id):
    """Uniform logits at the first visual step, near-one-hot afterwards."""
    def next_logits(ids):
        uncond = vocab.NULL_PROMPT in ids
        if len(ids) == 3:   # [BOS, word, BOV]: high-entropy step
            base = np.zeros(vocab.size)
            if uncond:
                base[vocab.visual_id(uncond_peak_id)] = 0.5
            return base
        out = np.full(vocab.size, -5.0)
        out[vocab.visual_id(peak_id)] = 15.0
        return out
    return next_logits


def test_scripted_model_fires_only_at_high_entropy_step():
    v = am.Vocabulary(16)
    fn = scripted_model(v, peak_id=7, uncond_peak_id=2)
    res = am.sample_adjusted(fn, [v.count_id(1)], am.AdjustConfig(tau=2.0, gamma=10.0),
                             np.random.default_rng(0), max_visual=4, vocab=v,
                             forbid_eov=True)
    assert res.fired.tolist() == [True, False, False, False]
    assert res.fired_count == 1
    assert res.entropies[0] > 2.0 and (res.entropies[1:] < 2.0).all()
    # after the first step the scripted model is deterministic
    assert res.visual_indices[1:].tolist() == [7, 7, 7]
    # the adjustment pushed mass away from the unconditional peak
    assert res.visual_indices[0] != 2


def test_gamma_one_matches_pure_conditional_sampling():
    v = am.Vocabulary(16)
    fn = scripted_model(v, peak_id=3, uncond_peak_id=9)
    never = am.sample_adjusted(fn, [v.count_id(2)], am.AdjustConfig(tau=math.inf),
                               np.random.default_rng(42), max_visual=5, vocab=v,
                               forbid_eov=True)
    noop = am.sample_adjusted(fn, [v.count_id(2)],
                              am.AdjustConfig(tau=0.0, gamma=1.0),
                              np.random.default_rng(42), max_visual=5, vocab=v,
                              forbid_eov=True)
    assert np.array_equal(never.sequence, noop.sequence)
    assert never.fired_count == 0 and noop.fired_count == 5


def test_greedy_sampling_deterministic():
    state = am.init_ar(5, VOCAB, TINY)
    prompt = [VOCAB.count_id(2), VOCAB.color_id("green")]
    adj = am.AdjustConfig(top_k=1)
    a = am.sample_adjusted(state, prompt, adj, np.random.default_rng(1), max_visual=6)
    b = am.sample_adjusted(state, prompt, adj, np.random.default_rng(2), max_visual=6)
    assert np.array_equal(a.sequence, b.sequence)


def test_sampled_sequences_always_parse():
    state = am.init_ar(6, VOCAB, TINY)
    prompt = [VOCAB.count_id(1), VOCAB.color_id("blue")]
    for seed in range(5):
        res = am.sample_adjusted(state, prompt, am.AdjustConfig(top_k=8),
                                 np.random.default_rng(seed), max_visual=6)
        p, vis = am.split_sequence(VOCAB, res.sequence)
        assert p == prompt
        assert len(vis) <= 6 and len(vis) == len(res.visual_indices)


def test_context_overflow_raises():
    state = am.init_ar(7, VOCAB, am.ARConfig(layers=1, width=32, heads=2, context=6))
    with pytest.raises(ContractViolation):
        am.sample_adjusted(state, [VOCAB.count_id(0)], am.AdjustConfig(),
                           np.random.default_rng(0), max_visual=10, forbid_eov=True)


# ---------------------------------------------------------------------------
# logs and persistence


def test_sequence_log_round_trip(tmp_path):
    v = am.Vocabulary(16)
    fn = scripted_model(v, peak_id=1, uncond_peak_id=0)
    res = am.sample_adjusted(fn, [v.count_id(3)], am.AdjustConfig(),
                             np.random.default_rng(3), max_visual=3, vocab=v,
                             forbid_eov=True)
    rec = am.log_record([v.count_id(3)], res)
    path = tmp_path / "seq.jsonl"
    am.write_sequence_log(path, [rec, rec])
    back = am.read_sequence_log(path)
    assert back == [rec, rec]
    assert set(rec) == {"prompt", "tokens", "entropy", "fired"}


def test_checkpoint_round_trip(tmp_path):
    state = am.init_ar(8, VOCAB, TINY)
    seqs, _, _ = make_corpus()
    am.train_ar(state, seqs, steps=5, seed=9)
    path = tmp_path / "ar.ckpt"
    am.save_ar(path, state, config_hash="h")
    loaded = am.load_ar(path)
    assert loaded.cfg == state.cfg and loaded.step == state.step
    assert loaded.vocab.size == state.vocab.size
    for k in state.params:
        assert np.array_equal(loaded.params[k].data, state.params[k].data), k
    assert float(am.ar_loss(loaded, seqs).data) == float(am.ar_loss(state, seqs).data)
