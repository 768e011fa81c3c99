"""Decoder-only autoregressive model over prompt + visual tokens.

A single next-token transformer covers a joint id space: a handful of
special markers, symbolic prompt words drawn from the scene grammar
(counts, colors, shape kinds, spatial relations), and the tokenizer's C
visual words.  Well-formed sequences bracket exactly K visual ids between
BOV and EOV:

    text-to-image:  [BOS, prompt..., BOV, v_1..v_K, EOV, EOS]
    image-only:     [BOS, BOV, v_1..v_K, EOV, EOS]

Training is plain teacher-forced cross entropy over every position.  A
fraction of prompts can be blanked to NULL_PROMPT so the same weights serve
as the unconditional model needed by adaptive logit adjustment: at each
sampling step the conditional logits are sharpened away from the
unconditional ones, but only when the conditional entropy exceeds a
threshold, so confident steps are left untouched.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from . import autodiff as ad
from . import nn, scenes, seeding
from .autodiff import ContractViolation, Tensor


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Joint id space: specials, prompt words, then C visual words."""

    SPECIALS = ("PAD", "BOS", "EOS", "BOV", "EOV", "NULL_PROMPT")
    MAX_COUNT = 4

    def __init__(self, codebook_size: int):
        self.codebook_size = codebook_size
        names = list(self.SPECIALS)
        self.count_base = len(names)
        names += [f"count:{n}" for n in range(self.MAX_COUNT + 1)]
        self.color_base = len(names)
        names += [f"color:{c}" for c in scenes.COLOR_NAMES]
        self.kind_base = len(names)
        names += [f"kind:{k}" for k in scenes.KINDS]
        self.position_base = len(names)
        names += [f"pos:{p}" for p in ("left_of", "right_of", "above", "below")]
        self.visual_base = len(names)
        names += [f"v{j}" for j in range(codebook_size)]
        self.names = tuple(names)

    def __len__(self) -> int:
        return len(self.names)

    @property
    def size(self) -> int:
        return len(self.names)

    def __getattr__(self, name):
        if name in self.SPECIALS:
            return self.SPECIALS.index(name)
        raise AttributeError(name)

    def count_id(self, n: int) -> int:
        if not 0 <= n <= self.MAX_COUNT:
            raise ContractViolation(f"count word {n} outside 0..{self.MAX_COUNT}")
        return self.count_base + n

    def color_id(self, name: str) -> int:
        return self.color_base + scenes.COLOR_NAMES.index(name)

    def kind_id(self, name: str) -> int:
        return self.kind_base + scenes.KINDS.index(name)

    def position_id(self, name: str) -> int:
        rel = ("left_of", "right_of", "above", "below")
        return self.position_base + rel.index(name)

    def visual_id(self, index: int) -> int:
        if not 0 <= index < self.codebook_size:
            raise ContractViolation(f"visual index {index} outside codebook")
        return self.visual_base + index

    def is_visual(self, token: int) -> bool:
        return self.visual_base <= token < self.visual_base + self.codebook_size

    def visual_index(self, token: int) -> int:
        if not self.is_visual(token):
            raise ContractViolation(f"id {token} is not a visual word")
        return token - self.visual_base

    def describe(self, token: int) -> str:
        return self.names[token]


def format_t2i(vocab: Vocabulary, prompt_ids, visual_indices) -> np.ndarray:
    """[BOS, prompt..., BOV, v..., EOV, EOS] with visual codebook indices."""
    v = [vocab.visual_id(int(j)) for j in visual_indices]
    return np.array([vocab.BOS, *map(int, prompt_ids), vocab.BOV, *v,
                     vocab.EOV, vocab.EOS], dtype=np.int64)


def format_image_only(vocab: Vocabulary, visual_indices) -> np.ndarray:
    return format_t2i(vocab, [], visual_indices)


def split_sequence(vocab: Vocabulary, seq) -> tuple:
    """Sequence -> (prompt ids, visual codebook indices); rejects malformed spans."""
    seq = list(map(int, seq))
    try:
        bov = seq.index(vocab.BOV)
        eov = seq.index(vocab.EOV)
    except ValueError:
        raise ContractViolation("sequence lacks BOV/EOV bracket") from None
    if not (0 < bov < eov):
        raise ContractViolation("BOV/EOV out of order")
    span = seq[bov + 1:eov]
    if any(not vocab.is_visual(t) for t in span):
        raise ContractViolation("non-visual id inside BOV..EOV span")
    if any(vocab.is_visual(t) for t in seq[:bov] + seq[eov + 1:]):
        raise ContractViolation("visual id outside BOV..EOV span")
    return seq[1:bov], [vocab.visual_index(t) for t in span]


def t2i_corpus(vocab: Vocabulary, prompts, token_grid: np.ndarray,
               null_fraction: float = 0.0,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Stack text-to-image sequences; optionally blank a fraction of prompts.

    Blanking replaces every prompt word with NULL_PROMPT (length preserved),
    which trains the unconditional branch used by logit adjustment.
    """
    rows = []
    for prompt, vis in zip(prompts, token_grid):
        prompt = list(prompt)
        if null_fraction > 0.0 and rng is not None and rng.random() < null_fraction:
            prompt = [vocab.NULL_PROMPT] * len(prompt)
        rows.append(format_t2i(vocab, prompt, vis))
    lengths = {len(r) for r in rows}
    if len(lengths) > 1:
        raise ContractViolation(f"mixed sequence lengths in one corpus: {sorted(lengths)}")
    return np.stack(rows)


def image_only_corpus(vocab: Vocabulary, token_grid: np.ndarray,
                      order: np.ndarray | None = None) -> np.ndarray:
    """Stack image-only sequences, optionally permuting each token row."""
    grid = np.asarray(token_grid)
    if order is not None:
        grid = grid[:, np.asarray(order)]
    return np.stack([format_image_only(vocab, row) for row in grid])


# ---------------------------------------------------------------------------
# model


@dataclasses.dataclass(frozen=True)
class ARConfig:
    layers: int = 4
    width: int = 128
    heads: int = 4
    context: int = 96
    mlp_mult: int = 2
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 16

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ContractViolation(f"width {self.width} not divisible by heads {self.heads}")


@dataclasses.dataclass
class ARState:
    cfg: ARConfig
    vocab: Vocabulary
    params: dict
    optimizer: object
    step: int = 0


def init_ar(seed: int, vocab: Vocabulary, cfg: ARConfig = ARConfig()) -> ARState:
    rng = seeding.rng_for(seed, "armodel", "init")
    d, v = cfg.width, vocab.size
    p = {
        "emb": nn.param(rng, (v, d), std=0.02),
        "pos": nn.param(rng, (cfg.context, d), std=0.01),
        "lnf_g": nn.ones_param((d,)),
        "lnf_b": nn.zeros_param((d,)),
        # small head keeps the initial loss near ln(vocab)
        "head.w": nn.param(rng, (d, v), std=0.005),
        "head.b": nn.zeros_param((v,)),
    }
    for i in range(cfg.layers):
        p[f"b{i}.ln1_g"] = nn.ones_param((d,))
        p[f"b{i}.ln1_b"] = nn.zeros_param((d,))
        for proj in ("wq", "wk", "wv"):
            p[f"b{i}.{proj}"] = nn.param(rng, (d, d), std=0.05)
        p[f"b{i}.wo"] = nn.param(rng, (d, d), std=0.02)
        p[f"b{i}.ln2_g"] = nn.ones_param((d,))
        p[f"b{i}.ln2_b"] = nn.zeros_param((d,))
        nn.init_mlp(rng, p, f"b{i}.mlp", d, cfg.mlp_mult * d, d)
    opt = nn.make_optimizer(p, cfg.optimizer, cfg.lr)
    return ARState(cfg=cfg, vocab=vocab, params=p, optimizer=opt)


def forward(state: ARState, ids: np.ndarray) -> Tensor:
    """Token ids (B, T) -> next-token logits (B, T, V) under a causal mask."""
    ids = np.asarray(ids)
    cfg, p = state.cfg, state.params
    b, t = ids.shape
    if t > cfg.context:
        raise ContractViolation(f"sequence length {t} exceeds context {cfg.context}")
    if ids.min() < 0 or ids.max() >= state.vocab.size:
        raise ContractViolation("token id outside vocabulary")
    h = ad.add(ad.embedding_lookup(p["emb"], ids), p["pos"][:t])
    mask = nn.causal_mask(t)
    for i in range(cfg.layers):
        a = nn.affine_norm(h, p[f"b{i}.ln1_g"], p[f"b{i}.ln1_b"])
        att = nn.attention(nn.linear(a, p[f"b{i}.wq"]), nn.linear(a, p[f"b{i}.wk"]),
                           nn.linear(a, p[f"b{i}.wv"]), cfg.heads, mask=mask)
        h = ad.add(h, nn.linear(att, p[f"b{i}.wo"]))
        m = nn.affine_norm(h, p[f"b{i}.ln2_g"], p[f"b{i}.ln2_b"])
        h = ad.add(h, nn.mlp(m, p, f"b{i}.mlp"))
    out = nn.affine_norm(h, p["lnf_g"], p["lnf_b"])
    return nn.linear(out, p["head.w"], p["head.b"])


def ar_loss(state: ARState, batch: np.ndarray) -> Tensor:
    """Mean next-token cross entropy over every position (no masking)."""
    logits = forward(state, batch[:, :-1])
    b, t, v = logits.shape
    return ad.cross_entropy(ad.reshape(logits, (b * t, v)), batch[:, 1:].reshape(-1))


def train_ar(state: ARState, sequences: np.ndarray, steps: int, seed: int = 0,
             batch_size: int | None = None, log_every: int = 0) -> list:
    """Teacher-forced training on a fixed corpus of same-length sequences."""
    bs = batch_size or state.cfg.batch_size
    rng = seeding.rng_for(seed, "armodel", "batches")
    history = []
    for _ in range(steps):
        batch = sequences[rng.choice(len(sequences), size=min(bs, len(sequences)),
                                     replace=False)]
        loss = ar_loss(state, batch)
        if not np.isfinite(loss.data):
            raise ContractViolation(f"armodel step {state.step}: non-finite loss")
        ad.backward(loss)
        state.optimizer.step()
        state.step += 1
        history.append(float(loss.data))
        if log_every and state.step % log_every == 0:
            print(f"ar step {state.step}: loss {history[-1]:.4f}")
    return history


# ---------------------------------------------------------------------------
# inference


def entropy(logits: np.ndarray) -> float:
    """Shannon entropy of softmax(logits), in nats."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ContractViolation("entropy: non-finite logits")
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return float(-(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)).sum())


@dataclasses.dataclass(frozen=True)
class AdjustConfig:
    tau: float = 2.0        # entropy threshold, nats
    gamma: float = 10.0     # sharpening scale
    top_k: int = 0          # 0 = full distribution

    def __post_init__(self):
        if self.gamma < 1.0:
            raise ContractViolation(f"gamma {self.gamma} must be >= 1")
        if self.tau < 0.0:
            raise ContractViolation(f"tau {self.tau} must be >= 0")


def adjust_logits(logit_c: np.ndarray, logit_u: np.ndarray,
                  tau: float, gamma: float) -> tuple:
    """(adjusted logits, fired, conditional entropy).

    Fires exactly when H(softmax(logit_c)) > tau; then the conditional
    logits are pushed away from the unconditional ones by (gamma - 1) times
    their difference.  gamma = 1 leaves the logits bit-identical.
    """
    h = entropy(logit_c)
    if h > tau:
        return logit_c + (gamma - 1.0) * (logit_c - logit_u), True, h
    return logit_c.copy(), False, h


def _sample_from(logits: np.ndarray, top_k: int, rng: np.random.Generator) -> int:
    if top_k and top_k < logits.size:
        keep = np.argpartition(logits, -top_k)[-top_k:]
    else:
        keep = np.arange(logits.size)
    if top_k == 1:
        return int(keep[np.argmax(logits[keep])])
    z = logits[keep] - logits[keep].max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(keep, p=p))


@dataclasses.dataclass
class SampleResult:
    sequence: np.ndarray        # full id sequence including specials
    visual_indices: np.ndarray  # codebook indices, length <= K
    entropies: np.ndarray       # conditional entropy per visual step
    fired: np.ndarray           # adjustment-applied flag per step
    stopped_early: bool

    @property
    def fired_count(self) -> int:
        return int(self.fired.sum())


def sample_adjusted(state, prompt_ids, adj: AdjustConfig, rng: np.random.Generator,
                    max_visual: int, vocab: Vocabulary | None = None,
                    forbid_eov: bool = False) -> SampleResult:
    """Adaptive logit-adjustment sampling of one visual sequence.

    Maintains two contexts, conditional and NULL_PROMPT unconditional, fed
    through the same weights.  Sampling support is the visual words plus EOV
    (a validity mask, so rollouts always parse); ``forbid_eov`` pins the
    length to exactly ``max_visual`` tokens for renderer consumers.

    ``state`` is an ARState, or any callable mapping an id list to next-token
    logits — the hook used by scripted-model tests.
    """
    if callable(state) and not isinstance(state, ARState):
        next_logits, v = state, vocab
        if v is None:
            raise ContractViolation("callable model needs an explicit vocabulary")
        context_cap = 10 ** 9
    else:
        next_logits = lambda ids: forward(state, np.array([ids])).data[0, -1]
        v = state.vocab
        context_cap = state.cfg.context
    ctx_c = [v.BOS, *map(int, prompt_ids), v.BOV]
    ctx_u = [v.BOS, *([v.NULL_PROMPT] * len(list(prompt_ids))), v.BOV]
    support = np.arange(v.visual_base, v.visual_base + v.codebook_size)
    if not forbid_eov:
        support = np.concatenate([[v.EOV], support])
    visual, ents, fired = [], [], []
    stopped_early = False
    for _ in range(max_visual):
        if len(ctx_c) >= context_cap:
            raise ContractViolation(f"context overflow at length {len(ctx_c)}")
        lc = np.asarray(next_logits(ctx_c), dtype=np.float64)[support]
        lu = np.asarray(next_logits(ctx_u), dtype=np.float64)[support]
        adjusted, hit, h = adjust_logits(lc, lu, adj.tau, adj.gamma)
        token = int(support[_sample_from(adjusted, adj.top_k, rng)])
        ents.append(h)
        fired.append(hit)
        if token == v.EOV and not forbid_eov:
            stopped_early = True
            break
        visual.append(v.visual_index(token))
        ctx_c.append(token)
        ctx_u.append(token)
    seq = np.array([*ctx_c[:len(ctx_c) - len(visual)], *(v.visual_id(j) for j in visual),
                    v.EOV, v.EOS], dtype=np.int64)
    return SampleResult(sequence=seq,
                        visual_indices=np.array(visual, dtype=np.int64),
                        entropies=np.array(ents), fired=np.array(fired, dtype=bool),
                        stopped_early=stopped_early)


def sequence_logprob(state: ARState, seq: np.ndarray) -> float:
    """Mean per-token log-likelihood of one sequence under the model."""
    seq = np.asarray(seq)[None, :]
    return -float(ar_loss(state, seq).data)


def sample_conditional_batch(state: ARState, prompt_ids, batch: int,
                             max_visual: int, rng: np.random.Generator) -> tuple:
    """Plain conditional ancestral sampling of a whole group at once.

    No logit adjustment, no top-k, support restricted to visual words, and
    every row draws exactly ``max_visual`` tokens — the rollout distribution
    for RL, where the renderer needs full sequences and the update needs
    log-probs of the actual sampling policy.  Returns (sequences (B, T),
    visual codebook indices (B, K)).
    """
    v = state.vocab
    prefix = np.array([v.BOS, *map(int, prompt_ids), v.BOV], dtype=np.int64)
    if len(prefix) + max_visual + 2 > state.cfg.context + 2:
        raise ContractViolation(
            f"context overflow: {len(prefix) + max_visual} > {state.cfg.context}")
    ctx = np.tile(prefix, (batch, 1))
    support = np.arange(v.visual_base, v.visual_base + v.codebook_size)
    for _ in range(max_visual):
        logits = forward(state, ctx).data[:, -1, :][:, support]
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        cum = np.cumsum(p, axis=1)
        draw = (rng.random((batch, 1)) > cum).sum(axis=1)
        draw = np.minimum(draw, len(support) - 1)
        ctx = np.concatenate([ctx, support[draw][:, None]], axis=1)
    visual = ctx[:, len(prefix):] - v.visual_base
    tail = np.tile(np.array([v.EOV, v.EOS], dtype=np.int64), (batch, 1))
    return np.concatenate([ctx, tail], axis=1), visual


# ---------------------------------------------------------------------------
# sequence logs


def log_record(prompt_ids, result: SampleResult) -> dict:
    return {
        "prompt": [int(t) for t in prompt_ids],
        "tokens": result.sequence.tolist(),
        "entropy": [round(float(e), 6) for e in result.entropies],
        "fired": [bool(f) for f in result.fired],
    }


def write_sequence_log(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_sequence_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# persistence


def save_ar(path, state: ARState, config_hash: str = "none") -> None:
    from . import checkpoint
    arrays = checkpoint.params_to_arrays(state.params, "ar")
    config = {"ar": dataclasses.asdict(state.cfg),
              "codebook_size": state.vocab.codebook_size, "step": state.step}
    checkpoint.save_checkpoint(path, config, arrays, config_hash)


def load_ar(path) -> ARState:
    from . import checkpoint
    config, arrays, _ = checkpoint.load_checkpoint(path)
    vocab = Vocabulary(config["codebook_size"])
    state = init_ar(0, vocab, ARConfig(**config["ar"]))
    for k in state.params:
        state.params[k].data = arrays[f"ar.{k}"].copy()
    state.step = config["step"]
    return state
