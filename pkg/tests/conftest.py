"""Shared fixtures and the acceptance report.

The acceptance tests train real (small) artifacts: a 576-scene corpus, two
tokenizers, a renderer, and a few AR models.  That work lives in
session-scoped fixtures here so it happens at most once per session, and
only when an acceptance test actually asks for it — unit-test runs stay
fast.  Fixtures record their own wall time because some acceptance checks
carry explicit budgets.

Each acceptance test reports through ``record``; the summary hook prints
one line per criterion at the end of the run.
"""

import dataclasses
import time

import numpy as np
import pytest

from artok import armodel as am
from artok import diagnostics as dg
from artok import renderer as rd
from artok import scenes, seeding, visrl
from artok import tokenizer as tk

CRITERIA = {
    1: "gradient correctness",
    2: "quantizer mechanics",
    3: "schedule contracts",
    4: "gradient re-weighting",
    5: "tokenizer smoke training",
    6: "one-step renderer",
    7: "entropy diagnostics",
    8: "adjusted sampling",
    9: "bellman verification",
    10: "grpo mechanics",
    11: "visual rl gain",
    12: "ordering comparison",
}

_RESULTS = {}


def record(num: int, ok: bool, detail: str = "") -> None:
    _RESULTS[num] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, name in sorted(CRITERIA.items()):
        if num in _RESULTS:
            ok, detail = _RESULTS[num]
            line = f"criterion {num:2d} [{'PASS' if ok else 'FAIL'}] {name}"
            if detail:
                line += f" — {detail}"
        else:
            line = f"criterion {num:2d} [ -- ] {name} (not run)"
        terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# trained artifacts, shared across acceptance tests


@pytest.fixture(scope="session")
def corpus():
    """576 scenes: 512 train + 64 held out, with ground-truth specs."""
    t0 = time.perf_counter()
    rng = seeding.rng_for(4242, "acceptance", "corpus")
    specs, images = scenes.sample_corpus(rng, 576)
    return {
        "specs": specs,
        "train": images[:512],
        "hold": images[512:],
        "hold_specs": specs[512:],
        "seconds": time.perf_counter() - t0,
    }


def _train_tokenizer(tag: str, cfg: tk.TokenizerConfig, train: np.ndarray,
                     steps: int = 2000) -> dict:
    state = tk.init_tokenizer(11, cfg)
    rngb = seeding.rng_for(11, "acceptance", "tok-batches", tag)
    mses = []
    t0 = time.perf_counter()
    for _ in range(steps):
        batch = train[rngb.choice(len(train), cfg.batch_size, replace=False)]
        mses.append(tk.train_step(state, batch)["mse"])
    return {"state": state, "mse": mses,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def tok_k64(corpus):
    return _train_tokenizer("k64", tk.TokenizerConfig(), corpus["train"])


@pytest.fixture(scope="session")
def tok_k16(corpus):
    cfg = dataclasses.replace(tk.TokenizerConfig(), token_count=16)
    return _train_tokenizer("k16", cfg, corpus["train"])


@pytest.fixture(scope="session")
def renderer64(corpus, tok_k64):
    t0 = time.perf_counter()
    state, history = rd.train_renderer(tok_k64["state"], corpus["train"],
                                       600, seed=2)
    return {"state": state, "history": history,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def entropy_runs(corpus, tok_k64):
    """Per-ordering entropy curves from small AR models.

    Trains one model per ordering on the 512 training sequences and
    evaluates the per-position entropy on 256 freshly sampled scenes.
    """
    t0 = time.perf_counter()
    state = tok_k64["state"]
    k = state.cfg.token_count
    extra_rng = seeding.rng_for(4242, "acceptance", "entropy-extra")
    _, eval_images = scenes.sample_corpus(extra_rng, 256)
    grid_train = tk.tokenize(state, corpus["train"])
    grid_eval = tk.tokenize(state, eval_images)
    vocab = am.Vocabulary(state.cfg.codebook_size)
    cfg = am.ARConfig(layers=2, width=64, heads=2, context=96)
    runs = {}
    for kind in ("sequential", "stride_one", "stride_two"):
        order = dg.make_order(kind, k)
        seqs = am.image_only_corpus(vocab, grid_train, order=order)
        ar = am.init_ar(21, vocab, cfg)
        am.train_ar(ar, seqs, 400, seed=21)
        curve = dg.entropy_curve(
            ar, am.image_only_corpus(vocab, grid_eval, order=order))
        runs[kind] = {
            "curve": curve,
            "overall": dg.spearman_trend(curve),
            "segments": dg.segment_trends(curve, dg.segment_bounds(kind, k)),
        }
    runs["seconds"] = time.perf_counter() - t0
    return runs


@pytest.fixture(scope="session")
def rl_run(tok_k64, renderer64):
    """SFT on the full count/color suite, RL on the training split,
    reward measured on the held-out prompt split before and after."""
    t0 = time.perf_counter()
    tok = tok_k64["state"]
    rend = renderer64["state"]
    tasks = visrl.make_count_color_tasks(
        [1, 2, 3], ["red", "green", "blue", "yellow"])
    train_tasks, eval_tasks = visrl.split_tasks(tasks)
    vocab = am.Vocabulary(tok.cfg.codebook_size)
    prompts, grid, _ = visrl.build_sft_data(tok, tasks, 12, seed=31)
    seqs = visrl.sft_corpus(vocab, prompts, grid, seed=31)
    ar = am.init_ar(31, vocab, am.ARConfig())
    am.train_ar(ar, seqs, 400, seed=31)
    before = visrl.evaluate_tasks(ar, tok, rend, eval_tasks, 16, seed=77)
    history = visrl.rl_train(ar, tok, rend, train_tasks, 60, batch=8, seed=31)
    after = visrl.evaluate_tasks(ar, tok, rend, eval_tasks, 16, seed=78)
    return {"before": before, "after": after, "history": history,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def ordering_run(tok_k64, renderer64):
    """Same SFT + RL budget under three target-token orderings."""
    t0 = time.perf_counter()
    tok = tok_k64["state"]
    k = tok.cfg.token_count
    tasks = visrl.make_count_color_tasks(
        [1, 2, 3], ["red", "green", "blue", "yellow"])
    train_tasks, eval_tasks = visrl.split_tasks(tasks)
    orders = {
        "native": None,
        "stride_shuffled": dg.make_order("stride_one", k),
        "reversed": np.arange(k)[::-1].copy(),
    }
    results = visrl.ordering_harness(
        tok, renderer64["state"], train_tasks, eval_tasks, orders,
        sft_per_task=12, sft_steps=300, rl_steps=40, batch=8, seed=31,
        samples_per_task=8)
    results["seconds"] = time.perf_counter() - t0
    return results
