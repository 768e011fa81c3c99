"""Evidence that the token stream is autoregressive in a useful order.

Three executable probes:

* entropy curves — per-position conditional entropy of an AR model over the
  visual span.  Earlier tokens settle coarse content, so entropy should fall
  with position; models trained on stride-shuffled orderings should show the
  falling trend within each stride segment instead.
* progressive reconstruction — decode with only the token tail v_{>=k(t)}
  while the image input carries no scene information (fixed noise blended
  toward neutral gray), so PSNR against the ground truth measures how much
  of the image the surviving tokens alone pin down.
* token interpolation — replace a growing prefix of one image's tokens with
  another's and render each hybrid in one step.

Plot-ready tables go out as tab-separated columns, images as PPM files.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import spearmanr

from . import armodel as am
from . import renderer as rd
from . import scenes, seeding
from . import tokenizer
from .autodiff import ContractViolation, Tensor

ORDER_KINDS = ("sequential", "stride_one", "stride_two", "custom")


def make_order(kind: str, k: int, custom=None) -> np.ndarray:
    """Permutation of 0..K-1 (applied as row[order]).

    sequential is the identity; stride_one interleaves odds after evens
    (positions 0,2,4,... then 1,3,5,...); stride_two makes three strided
    subsequences; custom passes a caller permutation through validation.
    """
    if k < 3:
        raise ContractViolation(f"orderings need K >= 3, got {k}")
    if kind == "sequential":
        order = np.arange(k)
    elif kind == "stride_one":
        order = np.concatenate([np.arange(0, k, 2), np.arange(1, k, 2)])
    elif kind == "stride_two":
        order = np.concatenate([np.arange(s, k, 3) for s in range(3)])
    elif kind == "custom":
        if custom is None:
            raise ContractViolation("custom ordering needs a permutation")
        order = np.asarray(custom, dtype=np.int64)
    else:
        raise ContractViolation(f"unknown ordering kind {kind!r}")
    if sorted(order.tolist()) != list(range(k)):
        raise ContractViolation(f"not a permutation of 0..{k - 1}: {order}")
    return order


def inverse_order(order: np.ndarray) -> np.ndarray:
    return np.argsort(np.asarray(order))


def segment_bounds(kind: str, k: int) -> list:
    """Contiguous runs of the permuted sequence that are stride subsequences."""
    if kind == "stride_one":
        cut = len(np.arange(0, k, 2))
        return [(0, cut), (cut, k)]
    if kind == "stride_two":
        sizes = [len(np.arange(s, k, 3)) for s in range(3)]
        edges = np.concatenate([[0], np.cumsum(sizes)])
        return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]
    return [(0, k)]


def spearman_trend(values) -> float:
    """Spearman rank correlation of values against their positions."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 3:
        raise ContractViolation("trend needs at least 3 positions")
    rho = spearmanr(np.arange(len(values)), values).statistic
    return float(rho)


def segment_trends(curve, bounds) -> list:
    return [spearman_trend(np.asarray(curve)[a:b]) for a, b in bounds]


# ---------------------------------------------------------------------------
# entropy curves


def entropy_curve(state: am.ARState, sequences: np.ndarray,
                  chunk: int = 32) -> np.ndarray:
    """Mean per-position conditional entropy over the visual span, in nats.

    Logits are cut to the visual words and renormalized before the entropy,
    so ln(C) is an exact upper bound.  All rows must share one layout; the
    visual span is located from the first row's BOV/EOV markers.
    """
    seqs = np.asarray(sequences)
    v = state.vocab
    row = seqs[0].tolist()
    bov, eov = row.index(v.BOV), row.index(v.EOV)
    k = eov - bov - 1
    if k <= 0:
        raise ContractViolation("no visual span between BOV and EOV")
    if not ((seqs[:, bov] == v.BOV) & (seqs[:, eov] == v.EOV)).all():
        raise ContractViolation("rows disagree on the visual span layout")
    total = np.zeros(k)
    for lo in range(0, len(seqs), chunk):
        batch = seqs[lo:lo + chunk]
        logits = am.forward(state, batch[:, :-1]).data
        window = logits[:, bov:bov + k, v.visual_base:v.visual_base + v.codebook_size]
        z = window - window.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        h = -(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)).sum(axis=-1)
        total += h.sum(axis=0)
    return total / len(seqs)


def write_entropy_table(path, curve, bounds) -> None:
    """Tab-separated (position, mean_entropy, segment) rows."""
    seg_of = np.zeros(len(curve), dtype=int)
    for s, (a, b) in enumerate(bounds):
        seg_of[a:b] = s
    with open(path, "w") as fh:
        fh.write("position\tmean_entropy\tsegment\n")
        for i, h in enumerate(curve):
            fh.write(f"{i}\t{h:.6f}\t{seg_of[i]}\n")


def read_entropy_table(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            rows.append(float(line.split("\t")[1]))
    return np.array(rows)


# ---------------------------------------------------------------------------
# progressive reconstruction


def progressive_reconstruction(tok_state: tokenizer.TokenizerState,
                               image: np.ndarray, t_grid,
                               noise_seed: int = 177) -> tuple:
    """(images, psnrs) decoding with only the tail v_{>=k(t)} at each t.

    The decoder's image input is fixed-seed noise blended toward neutral
    gray, (1-t) * noise + t * 0.5 — never the true image — so everything
    the output gets right is carried by the surviving tokens.
    """
    from . import metrics
    t_grid = [float(t) for t in t_grid]
    if any(not 0.0 <= t <= 1.0 for t in t_grid):
        raise ContractViolation("t grid outside [0, 1]")
    image = np.asarray(image, dtype=np.float64)
    tokens = tokenizer.tokenize(tok_state, image[None])[0]
    x0 = seeding.rng_for(noise_seed, "diagnostics", "noise").standard_normal(
        (1,) + image.shape)
    gray = np.full((1,) + image.shape, 0.5)
    out_images, psnrs = [], []
    for t in t_grid:
        k_start = tok_state.schedule.k_of(t)
        x_t = (1.0 - t) * x0 + t * gray
        tail = Tensor(tok_state.codebook.words[tokens[k_start - 1:]][None])
        pred = tokenizer.decode(x_t, tail, t, k_start, tok_state.decoder,
                                tok_state.cfg).data[0]
        pred = np.clip(pred, 0.0, 1.0)
        out_images.append(pred)
        psnrs.append(metrics.psnr(pred, image))
    return out_images, psnrs


def write_psnr_table(path, t_grid, psnrs) -> None:
    with open(path, "w") as fh:
        fh.write("t\tpsnr_db\n")
        for t, p in zip(t_grid, psnrs):
            fh.write(f"{t:.4f}\t{p:.4f}\n")


# ---------------------------------------------------------------------------
# token interpolation


def interpolate(rend_state: rd.RendererState, codebook, tokens_a, tokens_b,
                steps: int) -> list:
    """Render hybrids that replace a growing prefix of a's tokens with b's.

    Step j swaps the first ceil(j * K / steps) positions; step 0 is a
    unchanged and step ``steps`` is exactly b.
    """
    a = np.asarray(tokens_a)
    b = np.asarray(tokens_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractViolation(f"token sequences differ: {a.shape} vs {b.shape}")
    k = len(a)
    out = []
    for j in range(steps + 1):
        cut = -(-j * k // steps)   # ceil
        hybrid = a.copy()
        hybrid[:cut] = b[:cut]
        out.append(rd.render(hybrid[None], codebook, rend_state)[0])
    return out


def save_image_strip(path_prefix, images, config_hash: str = "none") -> list:
    """Write each image as a PPM; returns the file names."""
    paths = []
    for i, img in enumerate(images):
        p = f"{path_prefix}_{i:03d}.ppm"
        scenes.save_ppm(p, img, config_hash)
        paths.append(p)
    return paths
