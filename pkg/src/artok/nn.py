"""Network building blocks on top of the autodiff core.

Parameters live in plain dicts mapping names to leaf Tensors; insertion order
is the canonical parameter order for checkpoints and optimizers.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor


def param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(scale=std, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = ad.matmul(x, w)
    if b is not None:
        out = ad.add(out, b)
    return out


def mlp(x: Tensor, params: dict, prefix: str) -> Tensor:
    """Two-layer relu MLP; weights under ``{prefix}.w1/b1/w2/b2``."""
    h = ad.relu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def init_mlp(rng, params: dict, prefix: str, d_in: int, d_hidden: int, d_out: int,
             out_std: float = 0.02) -> None:
    params[f"{prefix}.w1"] = param(rng, (d_in, d_hidden))
    params[f"{prefix}.b1"] = zeros_param((d_hidden,))
    params[f"{prefix}.w2"] = param(rng, (d_hidden, d_out), std=out_std)
    params[f"{prefix}.b2"] = zeros_param((d_out,))


def affine_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """LayerNorm followed by a static learned affine."""
    return ad.add(ad.mul(ad.layer_norm(x), gain), bias)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
              mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    Args:
        q: (B, Lq, D) queries.
        k, v: (B, Lk, D) keys and values.
        heads: head count; D must divide evenly.
        mask: optional additive float mask (Lq, Lk); use -1e30 to block.

    Returns:
        (B, Lq, D).
    """
    b, lq, d = q.shape
    lk = k.shape[1]
    if d % heads:
        raise ContractViolation(f"attention: width {d} not divisible by {heads} heads")
    hd = d // heads

    def split(t, length):
        t = ad.reshape(t, (b, length, heads, hd))
        return ad.transpose(t, (0, 2, 1, 3))  # (B, H, L, hd)

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    if mask is not None:
        scores = ad.add(scores, Tensor(mask))
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, vh)  # (B, H, Lq, hd)
    out = ad.transpose(out, (0, 2, 1, 3))
    return ad.reshape(out, (b, lq, d))


def causal_mask(length: int) -> np.ndarray:
    """Additive mask blocking attention to future positions."""
    m = np.zeros((length, length))
    m[np.triu_indices(length, k=1)] = -1e30
    return m


# ---------------------------------------------------------------------------
# position and timestep embeddings


def sinusoidal_1d(n: int, d: int) -> np.ndarray:
    """Standard sin/cos position table, (n, d)."""
    if d % 2:
        raise ContractViolation(f"sinusoidal_1d: width {d} must be even")
    pos = np.arange(n)[:, None]
    freq = np.exp(-np.log(10000.0) * np.arange(d // 2) / max(1, d // 2 - 1))
    ang = pos * freq[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def sinusoidal_2d(h: int, w: int, d: int) -> np.ndarray:
    """Grid position table (h*w, d): first half encodes rows, second half columns."""
    if d % 2:
        raise ContractViolation(f"sinusoidal_2d: width {d} must be even")
    row = sinusoidal_1d(h, d // 2)
    col = sinusoidal_1d(w, d // 2)
    out = np.zeros((h, w, d))
    out[:, :, : d // 2] = row[:, None, :]
    out[:, :, d // 2:] = col[None, :, :]
    return out.reshape(h * w, d)


def timestep_features(t: float, d: int) -> np.ndarray:
    """Sin/cos features of a scalar diffusion time in [0, 1]."""
    freq = np.exp(np.linspace(0.0, np.log(1000.0), d // 2))
    ang = t * freq
    return np.concatenate([np.sin(ang), np.cos(ang)])


# ---------------------------------------------------------------------------
# patch grid


def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, H, W, C) -> (B, H/p * W/p, p*p*C), differentiable."""
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise ContractViolation(f"patchify: {h}x{w} not divisible by {patch}")
    gh, gw = h // patch, w // patch
    x = ad.reshape(x, (b, gh, patch, gw, patch, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, gh * gw, patch * patch * c))


def unpatchify(x: Tensor, patch: int, h: int, w: int, c: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    b = x.shape[0]
    gh, gw = h // patch, w // patch
    x = ad.reshape(x, (b, gh, gw, patch, patch, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, h, w, c))


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    """Momentum-free gradient descent with a fixed step."""

    def __init__(self, params: dict, lr: float = 1e-3):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for t in self.params.values():
            if t.grad is not None:
                t.data -= self.lr * t.grad


class Adam:
    """Adam with bias correction; betas default to the generation recipe (0.9, 0.95)."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.95, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, tensor in self.params.items():
            g = tensor.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            tensor.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def make_optimizer(params: dict, kind: str, lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ContractViolation(f"unknown optimizer {kind!r}")


def clone_params(params: dict) -> dict:
    """Value-semantic snapshot (fresh leaf tensors, copied arrays)."""
    return {k: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for k, t in params.items()}


def params_bytes(params: dict) -> bytes:
    """Canonical byte string of all parameter values, for freeze checks."""
    return b"".join(k.encode() + t.data.tobytes() for k, t in sorted(params.items()))
