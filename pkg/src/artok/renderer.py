"""One-step renderer: tokens to image in a single forward pass.

The timestep-conditioned decoder needs a noisy input x_t and a time value;
the renderer replaces both with a learnable canvas of image-stream
embeddings, so rendering is deterministic and costs one forward pass
regardless of any step-count parameter.  It is initialized from trained
decoder weights so that, before any renderer training, rendering is
bit-identical to decoding from an all-zero x_t at t = 0.

Training minimizes MSE plus a small perceptual term (a fixed, seeded
random-feature distance standing in for a pretrained perceptual net) and an
optional adversarial term with a tiny strided-conv discriminator.  The loss
weights follow a two-phase schedule; the adversarial phase is off by default.
Encoder and codebook are never touched: the renderer consumes integer tokens
through a frozen codebook lookup.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from . import nn, seeding, tokenizer
from .autodiff import ContractViolation, Tensor


@dataclasses.dataclass(frozen=True)
class RendererConfig:
    phase_boundary: int = 1000          # step at which the loss weights switch
    phase1: tuple = (0.1, 0.0)          # (perceptual, adversarial) weights
    phase2: tuple = (0.5, 0.5)
    gan: bool = False                   # adversarial term off by default
    optimizer: str = "adam"
    lr: float = 1e-3
    disc_lr: float = 1e-3
    perceptual_channels: int = 32


def loss_weights(step: int, cfg: RendererConfig) -> tuple:
    """(lambda1, lambda2) for the given step; lambda2 is zeroed when gan is off."""
    l1, l2 = cfg.phase1 if step < cfg.phase_boundary else cfg.phase2
    if not cfg.gan:
        l2 = 0.0
    return l1, l2


@dataclasses.dataclass
class RendererState:
    cfg: RendererConfig
    tok_cfg: tokenizer.TokenizerConfig
    params: dict               # decoder-shaped params plus "canvas"
    disc: dict
    perceptual: dict           # fixed, never trained
    optimizer: object
    opt_disc: object
    step: int = 0


def init_renderer(tok_state: tokenizer.TokenizerState, seed: int = 0,
                  cfg: RendererConfig = RendererConfig()) -> RendererState:
    """Copy the trained decoder and attach a canvas matching its image stream.

    The canvas starts at exactly the image-stream activations the decoder
    would compute for x_t = 0, so the initial renderer output equals
    decode(0, full tail, t=0) bit for bit.
    """
    tcfg = tok_state.cfg
    params = {k: Tensor(t.data.copy(), requires_grad=True)
              for k, t in tok_state.decoder.items()}
    pos = nn.sinusoidal_2d(tcfg.height // tcfg.patch, tcfg.width // tcfg.patch,
                           tcfg.width_dim)
    params["canvas"] = Tensor(params["patch.b"].data + pos, requires_grad=True)
    rng = seeding.rng_for(seed, "renderer", "init")
    disc = _init_discriminator(rng, tcfg)
    perceptual = _init_perceptual(seeding.rng_for(seed, "renderer", "perceptual"),
                                  tcfg, cfg.perceptual_channels)
    opt = nn.make_optimizer(params, cfg.optimizer, cfg.lr)
    opt_disc = nn.make_optimizer(disc, cfg.optimizer, cfg.disc_lr)
    return RendererState(cfg=cfg, tok_cfg=tcfg, params=params, disc=disc,
                         perceptual=perceptual, optimizer=opt, opt_disc=opt_disc)


def render_raw(tail: Tensor, state: RendererState) -> Tensor:
    """Differentiable forward pass from quantized embeddings; unclamped."""
    tcfg = state.tok_cfg
    p = state.params
    b = tail.shape[0]
    if tail.shape[1] != tcfg.token_count:
        raise ContractViolation(
            f"render: expected all {tcfg.token_count} tokens, got {tail.shape[1]}")
    h_img = ad.add(Tensor(np.zeros((b,) + p["canvas"].shape)), p["canvas"])
    temb = ad.relu(nn.linear(Tensor(nn.timestep_features(0.0, tokenizer.TIME_FEATURES)),
                             p["time.w"], p["time.b"]))
    pos1d = nn.sinusoidal_1d(tcfg.token_count, tcfg.width_dim)
    h_tok = ad.add(nn.linear(tail, p["tokin.w"], p["tokin.b"]), Tensor(pos1d))
    for i in range(tcfg.blocks):
        h_img, h_tok = tokenizer._decoder_block(h_img, h_tok, temb, p, tcfg, i, 1)
    out = ad.add(ad.mul(ad.layer_norm(h_img), p["head_gain"]), p["head_bias"])
    patches = nn.linear(out, p["head.w"], p["head.b"])
    return nn.unpatchify(patches, tcfg.patch, tcfg.height, tcfg.width, tcfg.channels)


def render(tokens: np.ndarray, codebook: tokenizer.Codebook,
           state: RendererState) -> np.ndarray:
    """Integer tokens (B, K) -> images (B, H, W, C), clamped to [0, 1]."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ContractViolation(f"render: tokens must be (B, K), got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= codebook.size:
        raise ContractViolation(
            f"render: token ids outside codebook range 0..{codebook.size - 1}")
    tail = Tensor(codebook.words[tokens])
    return np.clip(render_raw(tail, state).data, 0.0, 1.0)


# ---------------------------------------------------------------------------
# perceptual proxy: fixed random features at two scales


def _init_perceptual(rng: np.random.Generator, tcfg, channels: int) -> dict:
    d1 = 4 * 4 * tcfg.channels
    return {
        "w1": rng.normal(size=(d1, channels)) / np.sqrt(d1),
        "w2": rng.normal(size=(4 * channels, channels)) / np.sqrt(4 * channels),
    }


def _perceptual_features(x: Tensor, weights: dict, tcfg) -> tuple:
    f1 = ad.relu(ad.matmul(nn.patchify(x, 4), Tensor(weights["w1"])))
    side = tcfg.height // 4
    c = f1.shape[-1]
    grid = ad.reshape(f1, (x.shape[0], side, side, c))
    f2 = ad.relu(ad.matmul(nn.patchify(grid, 2), Tensor(weights["w2"])))
    return f1, f2


def perceptual_distance(a: Tensor, b: Tensor, weights: dict, tcfg) -> Tensor:
    """Mean squared distance in a fixed two-scale random feature space."""
    fa1, fa2 = _perceptual_features(a, weights, tcfg)
    fb1, fb2 = _perceptual_features(b, weights, tcfg)
    return ad.add(ad.mse(fa1, fb1), ad.mse(fa2, fb2))


# ---------------------------------------------------------------------------
# discriminator (used only when the adversarial term is enabled)


def _init_discriminator(rng: np.random.Generator, tcfg) -> dict:
    c = tcfg.channels
    return {
        "w1": nn.param(rng, (2 * 2 * c, 16), std=0.1),
        "w2": nn.param(rng, (2 * 2 * 16, 32), std=0.1),
        "w3": nn.param(rng, (2 * 2 * 32, 32), std=0.1),
        "head.w": nn.param(rng, (32, 1), std=0.1),
        "head.b": nn.zeros_param((1,)),
    }


def discriminate(x: Tensor, disc: dict, tcfg) -> Tensor:
    """Three stride-2 patch convolutions, global mean, linear logit: (B, 1)."""
    h = ad.relu(ad.matmul(nn.patchify(x, 2), disc["w1"]))
    side = tcfg.height // 2
    for w, ch in ((disc["w2"], 16), (disc["w3"], 32)):
        h = ad.reshape(h, (x.shape[0], side, side, ch))
        h = ad.relu(ad.matmul(nn.patchify(h, 2), w))
        side //= 2
    pooled = ad.tmean(h, axis=1)
    return nn.linear(pooled, disc["head.w"], disc["head.b"])


def _softplus(x: Tensor) -> Tensor:
    # log(1 + e^x); desk-scale logits stay small enough for the naive form
    return ad.log(ad.add(ad.exp(x), Tensor(np.ones(x.shape))))


# ---------------------------------------------------------------------------
# training


def train_renderer_step(state: RendererState, tok_state: tokenizer.TokenizerState,
                        images: np.ndarray) -> dict:
    """One renderer update on a batch; encoder and codebook are never written.

    Tokens come from the frozen tokenizer; the gradient path starts at the
    codebook lookup output, so freezing is structural, not just policy.
    """
    images = np.asarray(images, dtype=np.float64)
    tokens = tokenizer.tokenize(tok_state, images)
    tail = Tensor(tok_state.codebook.words[tokens])
    raw = render_raw(tail, state)
    target = Tensor(images)
    recon = ad.mse(raw, target)
    l1, l2 = loss_weights(state.step, state.cfg)
    perc = perceptual_distance(raw, target, state.perceptual, state.tok_cfg)
    loss = ad.add(recon, ad.scale(perc, l1))
    adv_val = 0.0
    if l2 > 0.0:
        fake_logit = discriminate(raw, state.disc, state.tok_cfg)
        adv = ad.tmean(_softplus(ad.scale(fake_logit, -1.0)))
        adv_val = float(adv.data)
        loss = ad.add(loss, ad.scale(adv, l2))
    if not np.isfinite(loss.data):
        raise ContractViolation(f"renderer step {state.step}: non-finite loss")
    ad.backward(loss)
    state.optimizer.step()
    if l2 > 0.0:
        d_real = discriminate(target, state.disc, state.tok_cfg)
        d_fake = discriminate(Tensor(raw.data.copy()), state.disc, state.tok_cfg)
        d_loss = ad.add(ad.tmean(_softplus(ad.scale(d_real, -1.0))),
                        ad.tmean(_softplus(d_fake)))
        ad.backward(d_loss)
        state.opt_disc.step()
    state.step += 1
    return {"loss": float(loss.data), "mse": float(recon.data),
            "perceptual": float(perc.data), "adversarial": adv_val,
            "lambda1": l1, "lambda2": l2}


def train_renderer(tok_state: tokenizer.TokenizerState, images: np.ndarray,
                   steps: int, seed: int = 0, batch_size: int = 8,
                   cfg: RendererConfig = RendererConfig(),
                   log_every: int = 0) -> tuple:
    """Train a fresh renderer against a frozen tokenizer; returns (state, history)."""
    state = init_renderer(tok_state, seed, cfg)
    rng = seeding.rng_for(seed, "renderer", "batches")
    history = []
    for _ in range(steps):
        batch = images[rng.choice(len(images), size=min(batch_size, len(images)),
                                  replace=False)]
        m = train_renderer_step(state, tok_state, batch)
        history.append(m)
        if log_every and state.step % log_every == 0:
            print(f"renderer step {state.step}: mse {m['mse']:.5f} "
                  f"perc {m['perceptual']:.5f}")
    return state, history


# ---------------------------------------------------------------------------
# persistence


def save_renderer(path, state: RendererState, config_hash: str = "none") -> None:
    from . import checkpoint
    arrays = checkpoint.params_to_arrays(state.params, "renderer")
    arrays.update(checkpoint.params_to_arrays(state.disc, "disc"))
    config = {"renderer": dataclasses.asdict(state.cfg),
              "tokenizer": dataclasses.asdict(state.tok_cfg),
              "step": state.step}
    checkpoint.save_checkpoint(path, config, arrays, config_hash)


def load_renderer(path, tok_state: tokenizer.TokenizerState) -> RendererState:
    from . import checkpoint
    config, arrays, _ = checkpoint.load_checkpoint(path)
    rcfg = RendererConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in config["renderer"].items()})
    state = init_renderer(tok_state, 0, rcfg)
    for k in state.params:
        state.params[k].data = arrays[f"renderer.{k}"].copy()
    for k in state.disc:
        state.disc[k].data = arrays[f"disc.{k}"].copy()
    state.step = config["step"]
    return state
