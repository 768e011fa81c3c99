"""Diffusion-recursion visual tokenizer.

An image is encoded into K discrete tokens whose order mirrors a diffusion
trajectory: a token with index k participates in reconstructing the image
from x_t only when k >= k(t), where k(t) is a monotone schedule with k(0)=1
and k(1)=K+1.  Early tokens therefore specialize to the coarse content needed
when x_t is mostly noise, late tokens to fine detail, and the stream acquires
an autoregressive coarse-to-fine structure.

Pieces:

* dual-stream encoder (image patches + K learnable token slots) whose
  attention is masked so the image stream never reads the token stream,
* cosine-similarity vector quantizer with straight-through gradients, an
  EMA-updated codebook and dead-word reactivation,
* token schedules (uniform / custom / logit_normal) with exact per-token
  inclusion probabilities computed from the schedule's discrete time table,
* a gradient re-weighting wrapper that multiplies each surviving token's
  backward signal by alpha / p_k while leaving the forward values untouched,
* dual-stream decoder that regresses x1 from x_t plus the token tail.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.stats import norm

from . import autodiff as ad
from . import nn
from .autodiff import ContractViolation, Tensor


@dataclasses.dataclass(frozen=True)
class TokenizerConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: int = 4
    token_count: int = 64        # K
    width_dim: int = 64          # stream width D
    code_dim: int = 16           # bottleneck width D'
    codebook_size: int = 512     # C
    blocks: int = 2
    heads: int = 4
    mlp_mult: int = 2
    schedule_kind: str = "uniform"        # uniform | custom | logit_normal
    time_sampler: str = "uniform"         # uniform | logit_normal
    quant_temperature: float = 0.1
    ema_gamma: float = 0.8
    usage_eta: float = 0.99
    dead_fraction: float = 0.0125
    reweight_alpha: float = 0.5
    commit_weight: float = 0.05
    entropy_weight: float = 0.02
    optimizer: str = "adam"
    lr: float = 2e-3
    batch_size: int = 8

    def __post_init__(self):
        if self.token_count < 1:
            raise ContractViolation(f"token_count must be >= 1, got {self.token_count}")
        if self.code_dim >= self.width_dim:
            raise ContractViolation(
                f"code_dim {self.code_dim} must be < width_dim {self.width_dim}")
        if self.codebook_size < self.token_count:
            raise ContractViolation(
                f"codebook_size {self.codebook_size} must be >= token_count {self.token_count}")

    @property
    def patch_count(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


# ---------------------------------------------------------------------------
# token schedules


def schedule_k(kind: str, t: float, token_count: int) -> int:
    """Continuous schedule: the first token index still decoded at time t.

    All schedules pin k(0) = 1 and k(1) = K + 1 and are nondecreasing.
    uniform spends equal time per token; custom keeps k = 1 over a dead zone
    near t = 0 and then ramps with power 1.5, so it allocates strictly fewer
    tokens than uniform at every 0 < t < 0.5; logit_normal follows the mass
    of a logit-normal density, moving slowly near both endpoints.
    """
    if not 0.0 <= t <= 1.0:
        raise ContractViolation(f"schedule time {t} outside [0, 1]")
    k = token_count
    if kind == "uniform":
        frac = t
    elif kind == "custom":
        a = 0.1
        frac = max(0.0, (t - a) / (1.0 - a)) ** 1.5
    elif kind == "logit_normal":
        if t <= 0.0:
            frac = 0.0
        elif t >= 1.0:
            frac = 1.0
        else:
            frac = float(norm.cdf(math.log(t / (1.0 - t))))
    else:
        raise ContractViolation(f"unknown schedule kind {kind!r}")
    return int(math.ceil(frac * k - 1e-12)) + 1 if frac > 0 else 1


@dataclasses.dataclass(frozen=True)
class TokenSchedule:
    kind: str
    token_count: int
    grid_t: np.ndarray       # discrete time table, K+1 points
    grid_k: np.ndarray       # k(t) on the table
    inclusion: np.ndarray    # p_k for k = 1..K, exact over the table

    def k_of(self, t: float) -> int:
        return schedule_k(self.kind, t, self.token_count)


def make_schedule(kind: str, token_count: int, resolution: int | None = None) -> TokenSchedule:
    """Build the schedule table and exact inclusion probabilities.

    The table doubles as the training-time discretization of t, so
    p_k = P(token k is in the decoded tail) holds exactly under training.
    Raises if any p_k would be zero.
    """
    res = token_count if resolution is None else resolution
    grid_t = np.arange(res + 1) / res
    grid_k = np.array([schedule_k(kind, t, token_count) for t in grid_t])
    if grid_k[0] != 1:
        raise ContractViolation(f"schedule {kind}: k(0) = {grid_k[0]}, expected 1")
    if grid_k[-1] != token_count + 1:
        raise ContractViolation(
            f"schedule {kind}: k(1) = {grid_k[-1]}, expected {token_count + 1}")
    if (np.diff(grid_k) < 0).any():
        raise ContractViolation(f"schedule {kind}: k(t) not monotone")
    ks = np.arange(1, token_count + 1)
    inclusion = (grid_k[None, :] <= ks[:, None]).mean(axis=1)
    if (inclusion <= 0).any():
        bad = int(ks[inclusion <= 0][0])
        raise ContractViolation(f"schedule {kind}: token {bad} has zero inclusion probability")
    return TokenSchedule(kind, token_count, grid_t, grid_k, inclusion)


def sample_time(schedule: TokenSchedule, rng: np.random.Generator,
                sampler: str = "uniform") -> tuple:
    """Draw (t, k_start) from the schedule's time table."""
    n = len(schedule.grid_t)
    if sampler == "uniform":
        j = int(rng.integers(n))
    elif sampler == "logit_normal":
        z = rng.normal()
        t_cont = 1.0 / (1.0 + math.exp(-z))
        j = int(np.argmin(np.abs(schedule.grid_t - t_cont)))
    else:
        raise ContractViolation(f"unknown time sampler {sampler!r}")
    return float(schedule.grid_t[j]), int(schedule.grid_k[j])


# ---------------------------------------------------------------------------
# quantizer


class Codebook:
    """C words of dimension D' assigned by cosine similarity, learned by EMA."""

    def __init__(self, rng: np.random.Generator, size: int, dim: int,
                 ema_gamma: float = 0.8, usage_eta: float = 0.99,
                 dead_fraction: float = 0.0125):
        self.words = rng.normal(size=(size, dim))
        self.usage = np.full(size, 1.0 / size)   # EMA of assignment mass
        self.batch_usage = np.full(size, 1.0 / size)
        self.ema_gamma = ema_gamma
        self.usage_eta = usage_eta
        self.dead_fraction = dead_fraction

    @property
    def size(self) -> int:
        return self.words.shape[0]

    def warm_start(self, vectors: np.ndarray, rng: np.random.Generator) -> None:
        """Seed every word from actual encoder outputs before training.

        Randomly initialized words sit far from the encoder's output cloud,
        which makes the initial commitment distance huge; its gradient then
        steamrolls the reconstruction signal and the encoder degenerates to
        a single point.  Sampling the words from a real batch (the same move
        dead-code revival makes later) keeps the commitment term small from
        the first step.  Usage restarts uniform.
        """
        flat = vectors.reshape(-1, self.words.shape[1])
        if len(flat) >= self.size:
            self.words = flat[rng.choice(len(flat), self.size, replace=False)].copy()
        else:
            picks = flat[rng.choice(len(flat), self.size, replace=True)]
            jitter = 0.01 * flat.std(axis=0, keepdims=True)
            self.words = picks + jitter * rng.standard_normal(picks.shape)
        self.usage = np.full(self.size, 1.0 / self.size)
        self.batch_usage = np.full(self.size, 1.0 / self.size)

    def ema_update(self, assigned: np.ndarray, tokens: np.ndarray) -> None:
        """Pull each used word toward the centroid of its assigned vectors.

        words_c <- gamma * words_c + (1 - gamma) * centroid_c for used words;
        untouched words keep their value exactly.
        """
        flat = assigned.reshape(-1, self.words.shape[1])
        ids = tokens.reshape(-1)
        counts = np.bincount(ids, minlength=self.size).astype(np.float64)
        sums = np.zeros_like(self.words)
        np.add.at(sums, ids, flat)
        used = counts > 0
        centroids = sums[used] / counts[used, None]
        g = self.ema_gamma
        self.words[used] = g * self.words[used] + (1.0 - g) * centroids

    def usage_update(self, batch_usage: np.ndarray) -> None:
        eta = self.usage_eta
        self.batch_usage = np.asarray(batch_usage, dtype=np.float64)
        self.usage = eta * self.usage + (1.0 - eta) * self.batch_usage

    def revive_dead(self, batch_vectors: np.ndarray, rng: np.random.Generator) -> int:
        """Reset words whose usage EMA fell under dead_fraction / C to random
        batch vectors; their usage restarts at 1 / C.  Returns revived count."""
        threshold = self.dead_fraction / self.size
        dead = np.flatnonzero(self.usage < threshold)
        if dead.size == 0:
            return 0
        flat = batch_vectors.reshape(-1, self.words.shape[1])
        picks = rng.integers(flat.shape[0], size=dead.size)
        self.words[dead] = flat[picks]
        self.usage[dead] = 1.0 / self.size
        return int(dead.size)


@dataclasses.dataclass
class QuantizeResult:
    tokens: np.ndarray        # (B, K) int
    quantized: Tensor         # (B, K, D') straight-through codebook rows
    commit: Tensor            # scalar, sum_k ||v_k - c_k||^2 averaged over batch
    entropy_term: Tensor      # scalar, sum_c p_bar_c log p_bar_c
    p_bar: np.ndarray         # (C,) soft assignment mass, detached


def quantize(v: Tensor, codebook: Codebook, temperature: float = 0.1) -> QuantizeResult:
    """Assign each embedding to its nearest word by cosine similarity.

    The forward value of ``quantized`` is the selected codebook rows exactly;
    gradients pass straight through to ``v``.  The commitment term is the
    batch mean of the per-sample sum of squared distances; the entropy term
    is sum_c p_bar_c log p_bar_c with p_bar the batch-mean soft assignment
    softmax(cos / temperature), minimized when usage is uniform.
    """
    if v.ndim != 3:
        raise ContractViolation(f"quantize: expected (B, K, D'), got {v.shape}")
    b, k, d = v.shape
    flat = ad.reshape(v, (b * k, d))
    words = Tensor(codebook.words)
    cos = ad.cosine_similarity(flat, words)                  # (BK, C)
    tokens = np.argmax(cos.data, axis=1)
    selected = Tensor(codebook.words[tokens])
    vq = ad.straight_through(flat, selected)
    diff = ad.sub(flat, selected)
    commit = ad.scale(ad.tsum(ad.mul(diff, diff)), 1.0 / b)
    soft = ad.softmax(ad.scale(cos, 1.0 / temperature), axis=1)
    p_bar = ad.tmean(soft, axis=0)                           # (C,)
    entropy_term = ad.tsum(ad.mul(p_bar, ad.log(p_bar)))
    return QuantizeResult(
        tokens=tokens.reshape(b, k),
        quantized=ad.reshape(vq, (b, k, d)),
        commit=commit,
        entropy_term=entropy_term,
        p_bar=p_bar.data.copy(),
    )


def entropy_loss_from_mass(p_bar: np.ndarray) -> float:
    """Closed-form value of the entropy term for a given assignment mass."""
    p = np.asarray(p_bar, dtype=np.float64)
    return float((p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# gradient re-weighting


def reweight_tail(tail: Tensor, inclusion_tail: np.ndarray, alpha: float = 0.5) -> Tensor:
    """Scale each token's backward gradient by alpha / p_k; forward unchanged.

    Implemented as straight_through(tail * s, tail): the forward emits the
    original tail bit-exactly while the backward path runs through the
    multiplication, so upstream gradients are scaled by s = alpha / p_k.
    """
    if tail.shape[1] != len(inclusion_tail):
        raise ContractViolation(
            f"reweight: tail length {tail.shape[1]} vs {len(inclusion_tail)} probabilities")
    if (np.asarray(inclusion_tail) <= 0).any():
        raise ContractViolation("reweight: zero inclusion probability in tail")
    if tail.shape[1] == 0:
        return tail
    s = (alpha / np.asarray(inclusion_tail, dtype=np.float64))[None, :, None]
    scaled = ad.mul(tail, Tensor(np.broadcast_to(s, tail.shape).copy()))
    return ad.straight_through(scaled, tail)


# ---------------------------------------------------------------------------
# encoder


def init_encoder(rng: np.random.Generator, cfg: TokenizerConfig) -> dict:
    p = {}
    d, k = cfg.width_dim, cfg.token_count
    # The patch projection starts strong enough that image content is
    # comparable to the O(1) sinusoidal positions.  At a small init the
    # positions dominate every slot, images encode almost identically, and
    # the quantizer organizes its cells around slot identity instead of
    # content (different scenes then share whole token sequences).
    p["patch.w"] = nn.param(rng, (cfg.patch_dim, d), std=0.25)
    p["patch.b"] = nn.zeros_param((d,))
    # Small slot-identity term: the anchor pooled from patch features carries
    # the image content, so the base must not drown it at init (a large base
    # makes every image quantize identically and the codebook locks up).
    p["tok.base"] = nn.param(rng, (k, d), std=0.05)
    for i in range(cfg.blocks):
        for site in ("attn", "mlp"):
            p[f"b{i}.img.{site}_gain"] = nn.ones_param((d,))
            p[f"b{i}.img.{site}_bias"] = nn.zeros_param((d,))
            p[f"b{i}.tok.{site}_alpha"] = nn.ones_param((k, d))
            p[f"b{i}.tok.{site}_beta"] = nn.zeros_param((k, d))
        for stream in ("img", "tok"):
            for proj in ("wq", "wk", "wv"):
                p[f"b{i}.{stream}.{proj}"] = nn.param(rng, (d, d), std=0.05)
            p[f"b{i}.{stream}.wo"] = nn.param(rng, (d, d), std=0.02)
            nn.init_mlp(rng, p, f"b{i}.{stream}.mlp", d, cfg.mlp_mult * d, d)
    p["out.alpha"] = nn.ones_param((k, d))
    p["out.beta"] = nn.zeros_param((k, d))
    p["bottleneck.w"] = nn.param(rng, (d, cfg.code_dim), std=0.05)
    p["bottleneck.b"] = nn.zeros_param((cfg.code_dim,))
    return p


def _token_adaln(x: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """Token-aware modulation: each token index has its own scale and shift."""
    return ad.add(ad.mul(ad.layer_norm(x), alpha), beta)


def encode(images: np.ndarray, params: dict, cfg: TokenizerConfig,
           return_streams: bool = False):
    """Images (B, H, W, C) -> continuous token embeddings (B, K, D').

    The image stream never attends to the token stream, so the returned
    tokens are a pure function of the image while image activations are
    independent of the token slots.  No diffusion time enters here.
    ``return_streams`` additionally returns the final image-stream activations
    (useful for verifying the attention mask direction).
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise ContractViolation(
            f"encode: expected (B, {cfg.height}, {cfg.width}, {cfg.channels}), got {images.shape}")
    b = images.shape[0]
    d = cfg.width_dim
    pos = nn.sinusoidal_2d(cfg.height // cfg.patch, cfg.width // cfg.patch, d)
    h_img = ad.add(nn.linear(nn.patchify(Tensor(images), cfg.patch),
                             params["patch.w"], params["patch.b"]), Tensor(pos))
    # Each token slot starts anchored to its own group of image patches, so
    # slot contents are image-dependent and spatially distinct from step 0;
    # cross-attention then refines them globally.  Without the anchor the
    # slots begin as image-independent constants and the quantizer collapses.
    patches = h_img.shape[1]
    if patches % cfg.token_count == 0:
        group = patches // cfg.token_count
        anchor = ad.tmean(ad.reshape(h_img, (b, cfg.token_count, group, d)),
                          axis=2)
        h_tok = ad.add(anchor, params["tok.base"])
    else:
        h_tok = ad.add(Tensor(np.zeros((b, cfg.token_count, d))),
                       params["tok.base"])
    for i in range(cfg.blocks):
        h_img, h_tok = _encoder_block(h_img, h_tok, params, cfg, i)
    out = _token_adaln(h_tok, params["out.alpha"], params["out.beta"])
    v = nn.linear(out, params["bottleneck.w"], params["bottleneck.b"])
    if return_streams:
        return v, h_img
    return v


def _encoder_block(h_img: Tensor, h_tok: Tensor, p: dict, cfg: TokenizerConfig, i: int):
    a_img = nn.affine_norm(h_img, p[f"b{i}.img.attn_gain"], p[f"b{i}.img.attn_bias"])
    a_tok = _token_adaln(h_tok, p[f"b{i}.tok.attn_alpha"], p[f"b{i}.tok.attn_beta"])
    q_i = nn.linear(a_img, p[f"b{i}.img.wq"])
    k_i = nn.linear(a_img, p[f"b{i}.img.wk"])
    v_i = nn.linear(a_img, p[f"b{i}.img.wv"])
    q_t = nn.linear(a_tok, p[f"b{i}.tok.wq"])
    k_t = nn.linear(a_tok, p[f"b{i}.tok.wk"])
    v_t = nn.linear(a_tok, p[f"b{i}.tok.wv"])
    # image queries see image keys only; token queries see everything
    att_i = nn.attention(q_i, k_i, v_i, cfg.heads)
    att_t = nn.attention(q_t, ad.concat([k_i, k_t], axis=1),
                         ad.concat([v_i, v_t], axis=1), cfg.heads)
    h_img = ad.add(h_img, nn.linear(att_i, p[f"b{i}.img.wo"]))
    h_tok = ad.add(h_tok, nn.linear(att_t, p[f"b{i}.tok.wo"]))
    m_img = nn.affine_norm(h_img, p[f"b{i}.img.mlp_gain"], p[f"b{i}.img.mlp_bias"])
    m_tok = _token_adaln(h_tok, p[f"b{i}.tok.mlp_alpha"], p[f"b{i}.tok.mlp_beta"])
    h_img = ad.add(h_img, nn.mlp(m_img, p, f"b{i}.img.mlp"))
    h_tok = ad.add(h_tok, nn.mlp(m_tok, p, f"b{i}.tok.mlp"))
    return h_img, h_tok


# ---------------------------------------------------------------------------
# decoder


TIME_FEATURES = 32


def init_decoder(rng: np.random.Generator, cfg: TokenizerConfig) -> dict:
    p = {}
    d, k = cfg.width_dim, cfg.token_count
    p["patch.w"] = nn.param(rng, (cfg.patch_dim, d), std=0.05)
    p["patch.b"] = nn.zeros_param((d,))
    p["tokin.w"] = nn.param(rng, (cfg.code_dim, d), std=0.05)
    p["tokin.b"] = nn.zeros_param((d,))
    p["time.w"] = nn.param(rng, (TIME_FEATURES, d), std=0.05)
    p["time.b"] = nn.zeros_param((d,))
    for i in range(cfg.blocks):
        for site in ("attn", "mlp"):
            # zero-init time modulation: starts as plain LayerNorm
            p[f"b{i}.img.{site}_tmod.w"] = nn.zeros_param((d, 2 * d))
            p[f"b{i}.img.{site}_tmod.b"] = nn.zeros_param((2 * d,))
            p[f"b{i}.tok.{site}_alpha"] = nn.ones_param((k, d))
            p[f"b{i}.tok.{site}_beta"] = nn.zeros_param((k, d))
        for stream in ("img", "tok"):
            for proj in ("wq", "wk", "wv"):
                p[f"b{i}.{stream}.{proj}"] = nn.param(rng, (d, d), std=0.05)
            p[f"b{i}.{stream}.wo"] = nn.param(rng, (d, d), std=0.02)
            nn.init_mlp(rng, p, f"b{i}.{stream}.mlp", d, cfg.mlp_mult * d, d)
    p["head_gain"] = nn.ones_param((d,))
    p["head_bias"] = nn.zeros_param((d,))
    p["head.w"] = nn.param(rng, (d, cfg.patch_dim), std=0.02)
    p["head.b"] = nn.zeros_param((cfg.patch_dim,))
    return p


def _time_adaln(x: Tensor, temb: Tensor, p: dict, key: str, d: int) -> Tensor:
    mod = nn.linear(temb, p[f"{key}.w"], p[f"{key}.b"])   # (2D,)
    gain = ad.add(mod[:d], Tensor(np.ones(d)))
    bias = mod[d:]
    return ad.add(ad.mul(ad.layer_norm(x), gain), bias)


def decode(x_t, tail: Tensor, t: float, k_start: int, params: dict,
           cfg: TokenizerConfig) -> Tensor:
    """Regress x1 from the noisy image x_t and the token tail v_{k_start..K}.

    Args:
        x_t: (B, H, W, C) array or Tensor, the interpolant (1-t) x0 + t x1.
        tail: (B, K - k_start + 1, D') quantized embeddings; may be empty.
        t: diffusion time in [0, 1].
        k_start: first token index present (1-based).
    """
    if not 0.0 <= t <= 1.0:
        raise ContractViolation(f"decode: time {t} outside [0, 1]")
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=np.float64))
    if x_t.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise ContractViolation(
            f"decode: x_t {x_t.shape} does not match configured "
            f"({cfg.height}, {cfg.width}, {cfg.channels})")
    expect = cfg.token_count - k_start + 1
    if not 1 <= k_start <= cfg.token_count + 1:
        raise ContractViolation(f"decode: k_start {k_start} outside 1..{cfg.token_count + 1}")
    if tail.shape[1] != expect:
        raise ContractViolation(
            f"decode: tail length {tail.shape[1]}, schedule requires {expect}")
    d = cfg.width_dim
    pos = nn.sinusoidal_2d(cfg.height // cfg.patch, cfg.width // cfg.patch, d)
    h_img = ad.add(nn.linear(nn.patchify(x_t, cfg.patch),
                             params["patch.w"], params["patch.b"]), Tensor(pos))
    temb = ad.relu(nn.linear(Tensor(nn.timestep_features(t, TIME_FEATURES)),
                             params["time.w"], params["time.b"]))
    has_tail = tail.shape[1] > 0
    if has_tail:
        pos1d = nn.sinusoidal_1d(cfg.token_count, d)[k_start - 1:]
        h_tok = ad.add(nn.linear(tail, params["tokin.w"], params["tokin.b"]), Tensor(pos1d))
    else:
        h_tok = None
    for i in range(cfg.blocks):
        h_img, h_tok = _decoder_block(h_img, h_tok, temb, params, cfg, i, k_start)
    out = ad.add(ad.mul(ad.layer_norm(h_img), params["head_gain"]), params["head_bias"])
    patches = nn.linear(out, params["head.w"], params["head.b"])
    return nn.unpatchify(patches, cfg.patch, cfg.height, cfg.width, cfg.channels)


def _decoder_block(h_img, h_tok, temb, p: dict, cfg: TokenizerConfig, i: int, k_start: int):
    d = cfg.width_dim
    a_img = _time_adaln(h_img, temb, p, f"b{i}.img.attn_tmod", d)
    q_i = nn.linear(a_img, p[f"b{i}.img.wq"])
    k_i = nn.linear(a_img, p[f"b{i}.img.wk"])
    v_i = nn.linear(a_img, p[f"b{i}.img.wv"])
    if h_tok is not None:
        sl = slice(k_start - 1, None)
        a_tok = _token_adaln(h_tok, p[f"b{i}.tok.attn_alpha"][sl], p[f"b{i}.tok.attn_beta"][sl])
        k_all = ad.concat([k_i, nn.linear(a_tok, p[f"b{i}.tok.wk"])], axis=1)
        v_all = ad.concat([v_i, nn.linear(a_tok, p[f"b{i}.tok.wv"])], axis=1)
        att_i = nn.attention(q_i, k_all, v_all, cfg.heads)
        att_t = nn.attention(nn.linear(a_tok, p[f"b{i}.tok.wq"]), k_all, v_all, cfg.heads)
        h_tok = ad.add(h_tok, nn.linear(att_t, p[f"b{i}.tok.wo"]))
    else:
        att_i = nn.attention(q_i, k_i, v_i, cfg.heads)
    h_img = ad.add(h_img, nn.linear(att_i, p[f"b{i}.img.wo"]))
    m_img = _time_adaln(h_img, temb, p, f"b{i}.img.mlp_tmod", d)
    h_img = ad.add(h_img, nn.mlp(m_img, p, f"b{i}.img.mlp"))
    if h_tok is not None:
        sl = slice(k_start - 1, None)
        m_tok = _token_adaln(h_tok, p[f"b{i}.tok.mlp_alpha"][sl], p[f"b{i}.tok.mlp_beta"][sl])
        h_tok = ad.add(h_tok, nn.mlp(m_tok, p, f"b{i}.tok.mlp"))
    return h_img, h_tok


# ---------------------------------------------------------------------------
# training


@dataclasses.dataclass
class TokenizerState:
    cfg: TokenizerConfig
    encoder: dict
    decoder: dict
    codebook: Codebook
    schedule: TokenSchedule
    optimizer: object
    rng_time: np.random.Generator
    rng_noise: np.random.Generator
    rng_revive: np.random.Generator
    step: int = 0


def init_tokenizer(seed: int, cfg: TokenizerConfig = TokenizerConfig()) -> TokenizerState:
    from . import seeding
    rng_init = seeding.rng_for(seed, "tokenizer", "init")
    encoder = init_encoder(rng_init, cfg)
    decoder = init_decoder(rng_init, cfg)
    codebook = Codebook(rng_init, cfg.codebook_size, cfg.code_dim,
                        cfg.ema_gamma, cfg.usage_eta, cfg.dead_fraction)
    schedule = make_schedule(cfg.schedule_kind, cfg.token_count)
    merged = {f"encoder.{k}": t for k, t in encoder.items()}
    merged.update({f"decoder.{k}": t for k, t in decoder.items()})
    opt = nn.make_optimizer(merged, cfg.optimizer, cfg.lr)
    return TokenizerState(
        cfg=cfg, encoder=encoder, decoder=decoder, codebook=codebook,
        schedule=schedule, optimizer=opt,
        rng_time=seeding.rng_for(seed, "tokenizer", "time"),
        rng_noise=seeding.rng_for(seed, "tokenizer", "noise"),
        rng_revive=seeding.rng_for(seed, "tokenizer", "revive"),
    )


def train_step(state: TokenizerState, images: np.ndarray) -> dict:
    """One joint update: reconstruction at a sampled time plus codebook terms.

    The time t is drawn from the schedule's own table (one t per step), the
    decoded tail is v_{k(t)..K} with gradients re-weighted by alpha / p_k,
    and the codebook is updated by EMA with dead-word revival; the codebook
    never receives gradient updates.
    """
    cfg = state.cfg
    images = np.asarray(images, dtype=np.float64)
    t, k_start = sample_time(state.schedule, state.rng_time, cfg.time_sampler)
    v = encode(images, state.encoder, cfg)
    if state.step == 0:
        state.codebook.warm_start(v.data, state.rng_revive)
    qr = quantize(v, state.codebook, cfg.quant_temperature)
    tail = qr.quantized[:, k_start - 1:]
    tail = reweight_tail(tail, state.schedule.inclusion[k_start - 1:], cfg.reweight_alpha)
    x0 = state.rng_noise.standard_normal(images.shape)
    x_t = (1.0 - t) * x0 + t * images
    pred = decode(x_t, tail, t, k_start, state.decoder, cfg)
    recon = ad.mse(pred, Tensor(images))
    loss = ad.add(recon, ad.add(ad.scale(qr.commit, cfg.commit_weight),
                                ad.scale(qr.entropy_term, cfg.entropy_weight)))
    if not np.isfinite(loss.data):
        raise ContractViolation(f"tokenizer step {state.step}: non-finite loss")
    ad.backward(loss)
    state.optimizer.step()
    state.codebook.ema_update(v.data, qr.tokens)
    state.codebook.usage_update(qr.p_bar)
    revived = state.codebook.revive_dead(v.data, state.rng_revive)
    state.step += 1
    return {
        "loss": float(loss.data), "mse": float(recon.data),
        "commit": float(qr.commit.data), "entropy_term": float(qr.entropy_term.data),
        "t": t, "k_start": k_start, "revived": revived,
        "codes_used": int(len(np.unique(qr.tokens))),
    }


def tokenize(state: TokenizerState, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Image batch -> integer token grid (B, K); inference only."""
    out = []
    for lo in range(0, len(images), chunk):
        v = encode(images[lo:lo + chunk], state.encoder, state.cfg)
        flat = v.data.reshape(-1, state.cfg.code_dim)
        cos = _cosine_np(flat, state.codebook.words)
        out.append(np.argmax(cos, axis=1).reshape(v.shape[0], state.cfg.token_count))
    return np.concatenate(out, axis=0)


def _cosine_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    return an @ bn.T


def decode_token_ids(state: TokenizerState, tokens: np.ndarray, x_t: np.ndarray,
                     t: float, k_start: int) -> np.ndarray:
    """Decode integer tokens (already cut to the tail) through the codebook."""
    tail = Tensor(state.codebook.words[tokens])
    return decode(x_t, tail, t, k_start, state.decoder, state.cfg).data


def reconstruction_mse(state: TokenizerState, images: np.ndarray, noise_seed: int = 993,
                       chunk: int = 32) -> float:
    """Decode-from-pure-noise (t = 0) reconstruction error with frozen noise."""
    from . import seeding
    rng = seeding.rng_for(noise_seed, "tokenizer", "eval_noise")
    total, count = 0.0, 0
    for lo in range(0, len(images), chunk):
        batch = np.asarray(images[lo:lo + chunk], dtype=np.float64)
        tokens = tokenize(state, batch)
        x0 = rng.standard_normal(batch.shape)
        pred = decode_token_ids(state, tokens, x0, 0.0, 1)
        total += float(((pred - batch) ** 2).sum())
        count += batch.size
    return total / count


# ---------------------------------------------------------------------------
# persistence


def save_tokenizer(path, state: TokenizerState, config_hash: str = "none") -> None:
    from . import checkpoint
    arrays = checkpoint.params_to_arrays(state.encoder, "encoder")
    arrays.update(checkpoint.params_to_arrays(state.decoder, "decoder"))
    arrays["codebook.words"] = state.codebook.words
    arrays["codebook.usage"] = state.codebook.usage
    config = dataclasses.asdict(state.cfg)
    config["step"] = state.step
    checkpoint.save_checkpoint(path, config, arrays, config_hash)


def load_tokenizer(path, seed: int = 0) -> TokenizerState:
    from . import checkpoint
    config, arrays, _ = checkpoint.load_checkpoint(path)
    step = config.pop("step", 0)
    cfg = TokenizerConfig(**config)
    state = init_tokenizer(seed, cfg)
    for k in state.encoder:
        state.encoder[k].data = arrays[f"encoder.{k}"].copy()
    for k in state.decoder:
        state.decoder[k].data = arrays[f"decoder.{k}"].copy()
    state.codebook.words = arrays["codebook.words"].copy()
    state.codebook.usage = arrays["codebook.usage"].copy()
    state.step = step
    return state
