"""Config-driven batch entry point: one stage per run.

    python -m artok --config run.ini [--seed N] [--out DIR]

The stage comes from the config's [run] section.  Before anything is
written, every input the stage needs is checked; a missing input aborts
with no partial outputs.  Once inputs pass, the fully resolved config is
echoed to <out>/config_resolved.ini and the stage runs.  All metrics
logs are line-delimited JSON with sorted keys, so two runs with the same
config and seed produce byte-identical files.  Any contract violation —
bad config, missing input, non-finite loss — exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import armodel as am
from . import config as cfgmod
from . import diagnostics as dg
from . import renderer as rd
from . import scenes
from . import seeding
from . import tokenizer as tk
from . import visrl
from .autodiff import ContractViolation


def _input_path(cfg, section: str, key: str, default_name: str) -> Path:
    """Resolve a stage input; empty config value falls back to the out dir."""
    raw = cfg[section][key]
    path = Path(raw) if raw else Path(cfg.out) / default_name
    if not path.exists():
        raise ContractViolation(f"missing input {section}.{key}: {path}")
    return path


def _echo_config(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.ini").write_text(cfg.text)
    return out


def _write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":"), sort_keys=True) + "\n")


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(cfg) -> None:
    out = _echo_config(cfg)
    n = cfg["data"]["count"]
    rng = seeding.rng_for(cfg.seed, "cli", "gen-data")
    specs, images = scenes.sample_corpus(rng, n)
    scenes.save_corpus(out / "corpus.bin", specs, images, cfg.hash)
    print(f"gen-data: wrote {n} scenes to {out / 'corpus.bin'}")


def stage_train_tokenizer(cfg) -> None:
    corpus = _input_path(cfg, "tokenizer", "corpus", "corpus.bin")
    out = _echo_config(cfg)
    _, images, _ = scenes.load_corpus(corpus)
    sec = cfg["tokenizer"]
    tok_cfg = tk.TokenizerConfig(
        schedule_kind=sec["schedule"], token_count=sec["token_count"],
        codebook_size=sec["codebook_size"], optimizer=sec["optimizer"],
        lr=sec["lr"], batch_size=sec["batch_size"])
    state = tk.init_tokenizer(cfg.seed, tok_cfg)
    rng = seeding.rng_for(cfg.seed, "cli", "tokenizer-batches")
    log, every = [], max(1, sec["log_every"])
    for step in range(sec["steps"]):
        batch = images[rng.choice(len(images), size=min(tok_cfg.batch_size,
                                                        len(images)),
                                  replace=False)]
        m = tk.train_step(state, batch)
        if (step + 1) % every == 0 or step + 1 == sec["steps"]:
            log.append({"step": state.step, **m})
            print(f"tokenizer step {state.step}: loss {m['loss']:.5f} "
                  f"mse {m['mse']:.5f} codes {m['codes_used']}")
    tk.save_tokenizer(out / "tokenizer.ckpt", state, cfg.hash)
    _write_jsonl(out / "tokenizer_metrics.jsonl", log)


def stage_train_renderer(cfg) -> None:
    corpus = _input_path(cfg, "renderer", "corpus", "corpus.bin")
    tok_path = _input_path(cfg, "renderer", "tokenizer", "tokenizer.ckpt")
    out = _echo_config(cfg)
    _, images, _ = scenes.load_corpus(corpus)
    tok_state = tk.load_tokenizer(tok_path, cfg.seed)
    sec = cfg["renderer"]
    rend_cfg = rd.RendererConfig(phase_boundary=sec["phase_boundary"],
                                 gan=sec["gan"])
    state, history = rd.train_renderer(tok_state, images, sec["steps"],
                                       seed=cfg.seed,
                                       batch_size=sec["batch_size"],
                                       cfg=rend_cfg,
                                       log_every=max(1, sec["log_every"]))
    every = max(1, sec["log_every"])
    log = [{"step": i + 1, **m} for i, m in enumerate(history)
           if (i + 1) % every == 0 or i + 1 == len(history)]
    rd.save_renderer(out / "renderer.ckpt", state, cfg.hash)
    _write_jsonl(out / "renderer_metrics.jsonl", log)


def _ar_tasks(cfg):
    sec = cfg["ar"]
    counts = cfgmod.parse_list(sec["counts"], int)
    colors = cfgmod.parse_list(sec["colors"])
    return visrl.make_count_color_tasks(counts, colors)


def stage_train_ar(cfg) -> None:
    tok_path = _input_path(cfg, "ar", "tokenizer", "tokenizer.ckpt")
    out = _echo_config(cfg)
    tok_state = tk.load_tokenizer(tok_path, cfg.seed)
    sec = cfg["ar"]
    tasks = _ar_tasks(cfg)
    visrl.write_prompt_suite(out / "tasks.txt", tasks)
    prompts, grid, _ = visrl.build_sft_data(tok_state, tasks, sec["per_task"],
                                            cfg.seed)
    vocab = am.Vocabulary(tok_state.cfg.codebook_size)
    seqs = visrl.sft_corpus(vocab, prompts, grid,
                            null_fraction=sec["null_fraction"], seed=cfg.seed)
    ar_cfg = am.ARConfig(layers=sec["layers"], width=sec["width"],
                         heads=sec["heads"], context=sec["context"],
                         lr=sec["lr"], batch_size=sec["batch_size"])
    state = am.init_ar(cfg.seed, vocab, ar_cfg)
    history = am.train_ar(state, seqs, sec["steps"], seed=cfg.seed,
                          log_every=max(1, sec["log_every"]))
    every = max(1, sec["log_every"])
    log = [{"step": i + 1, "loss": loss} for i, loss in enumerate(history)
           if (i + 1) % every == 0 or i + 1 == len(history)]
    am.save_ar(out / "ar.ckpt", state, cfg.hash)
    _write_jsonl(out / "ar_metrics.jsonl", log)


def _named_rewards(result: dict) -> dict:
    """JSON-friendly evaluation record (tuple keys become joined names)."""
    return {"mean": result["mean"],
            "per_task": {" ".join(names): r
                         for names, r in result["per_task"].items()}}


def stage_rl(cfg) -> None:
    tok_path = _input_path(cfg, "rl", "tokenizer", "tokenizer.ckpt")
    rend_path = _input_path(cfg, "rl", "renderer", "renderer.ckpt")
    ar_path = _input_path(cfg, "rl", "ar", "ar.ckpt")
    task_path = _input_path(cfg, "rl", "tasks", "tasks.txt")
    out = _echo_config(cfg)
    tok_state = tk.load_tokenizer(tok_path, cfg.seed)
    rend_state = rd.load_renderer(rend_path, tok_state)
    state = am.load_ar(ar_path)
    tasks = visrl.read_prompt_suite(task_path)
    sec = cfg["rl"]
    # training prompts are deduplicated from the held-out eval prompts
    train_tasks, eval_tasks = visrl.split_tasks(tasks, sec["holdout_every"])
    before = visrl.evaluate_tasks(state, tok_state, rend_state, eval_tasks,
                                  sec["eval_samples"], cfg.seed)
    history = visrl.rl_train(state, tok_state, rend_state, train_tasks,
                             sec["steps"], batch=sec["group"],
                             lam=sec["kl_weight"], seed=cfg.seed,
                             log_every=max(1, sec["log_every"]))
    after = visrl.evaluate_tasks(state, tok_state, rend_state, eval_tasks,
                                 sec["eval_samples"], cfg.seed + 1)
    am.save_ar(out / "ar_rl.ckpt", state, cfg.hash)
    _write_jsonl(out / "rl_metrics.jsonl", history)
    _write_json(out / "rl_summary.json", {
        "before": _named_rewards(before), "after": _named_rewards(after),
        "delta": after["mean"] - before["mean"]})
    print(f"rl: mean reward {before['mean']:.3f} -> {after['mean']:.3f}")


def stage_diagnose(cfg) -> None:
    tok_path = _input_path(cfg, "diagnose", "tokenizer", "tokenizer.ckpt")
    corpus = _input_path(cfg, "diagnose", "corpus", "corpus.bin")
    out = _echo_config(cfg)
    tok_state = tk.load_tokenizer(tok_path, cfg.seed)
    _, images, _ = scenes.load_corpus(corpus)
    sec = cfg["diagnose"]
    grid = tk.tokenize(tok_state, images)
    hold = min(sec["eval_count"], len(grid) // 4)
    vocab = am.Vocabulary(tok_state.cfg.codebook_size)
    ar_cfg = am.ARConfig(layers=sec["layers"], width=sec["width"],
                         heads=sec["heads"], context=sec["context"])
    k = tok_state.cfg.token_count
    summary = {}
    for kind in cfgmod.parse_list(sec["orders"]):
        order = dg.make_order(kind, k)
        seqs = am.image_only_corpus(vocab, grid, order=order)
        state = am.init_ar(cfg.seed, vocab, ar_cfg)
        am.train_ar(state, seqs[:-hold] if hold else seqs, sec["steps"],
                    seed=cfg.seed)
        curve = dg.entropy_curve(state, seqs[-hold:] if hold else seqs)
        bounds = dg.segment_bounds(kind, k)
        dg.write_entropy_table(out / f"entropy_{kind}.tsv", curve, bounds)
        summary[kind] = {"overall_trend": dg.spearman_trend(curve),
                         "segment_trends": dg.segment_trends(curve, bounds)}
        print(f"diagnose {kind}: overall trend "
              f"{summary[kind]['overall_trend']:+.3f}")
    _write_json(out / "diagnose_summary.json", summary)


def stage_reconstruct(cfg) -> None:
    tok_path = _input_path(cfg, "reconstruct", "tokenizer", "tokenizer.ckpt")
    corpus = _input_path(cfg, "reconstruct", "corpus", "corpus.bin")
    sec = cfg["reconstruct"]
    rend_path = None
    if sec["renderer"]:
        rend_path = _input_path(cfg, "reconstruct", "renderer", "renderer.ckpt")
    out = _echo_config(cfg)
    tok_state = tk.load_tokenizer(tok_path, cfg.seed)
    _, images, _ = scenes.load_corpus(corpus)
    for idx in (sec["image_index"], sec["second_index"]):
        if not 0 <= idx < len(images):
            raise ContractViolation(f"image index {idx} outside corpus "
                                    f"of {len(images)}")
    t_grid = cfgmod.parse_list(sec["t_grid"], float)
    frames, psnrs = dg.progressive_reconstruction(tok_state,
                                                  images[sec["image_index"]],
                                                  t_grid)
    dg.write_psnr_table(out / "psnr.tsv", t_grid, psnrs)
    dg.save_image_strip(out / "progressive", frames, cfg.hash)
    if rend_path is not None:
        rend_state = rd.load_renderer(rend_path, tok_state)
        pair = tk.tokenize(tok_state, images[[sec["image_index"],
                                              sec["second_index"]]])
        hybrids = dg.interpolate(rend_state, tok_state.codebook,
                                 pair[0], pair[1], sec["interp_steps"])
        dg.save_image_strip(out / "interp", hybrids, cfg.hash)
    print("reconstruct: psnr " +
          " ".join(f"{t:.2f}:{p:.1f}dB" for t, p in zip(t_grid, psnrs)))


def stage_bellman_check(cfg) -> None:
    out = _echo_config(cfg)
    sec = cfg["bellman"]
    rng = seeding.rng_for(cfg.seed, "cli", "bellman")
    records = []
    for trial in range(sec["trials"]):
        mdp, policy = visrl.random_mdp(rng)
        residual = visrl.bellman_verify(mdp, policy)
        records.append({"trial": trial, "horizon": mdp.horizon,
                        "actions": mdp.n_actions, "residual": residual})
    _write_jsonl(out / "bellman.jsonl", records)
    worst = max(records, key=lambda r: r["residual"])
    print(f"bellman-check: {sec['trials']} MDPs, worst residual "
          f"{worst['residual']:.3e}")
    if worst["residual"] > sec["tolerance"]:
        raise ContractViolation(
            f"bellman trial {worst['trial']}: residual {worst['residual']:.3e} "
            f"exceeds {sec['tolerance']:.1e}")


_STAGES = {
    "gen-data": stage_gen_data,
    "train-tokenizer": stage_train_tokenizer,
    "train-renderer": stage_train_renderer,
    "train-ar": stage_train_ar,
    "rl": stage_rl,
    "diagnose": stage_diagnose,
    "reconstruct": stage_reconstruct,
    "bellman-check": stage_bellman_check,
}


def run_stage(cfg) -> None:
    _STAGES[cfg.stage](cfg)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="artok",
        description="Run one pipeline stage described by a sectioned "
                    "key=value config file.")
    parser.add_argument("--config", required=True, help="path to the run config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override [run] seed")
    parser.add_argument("--out", default=None, help="override [run] out")
    args = parser.parse_args(argv)
    try:
        cfg = cfgmod.resolve(args.config, seed=args.seed, out=args.out,
                             environ=os.environ)
        run_stage(cfg)
    except ContractViolation as exc:
        stage = ""
        try:
            stage = f" [{cfg.stage}]"
        except UnboundLocalError:
            pass
        print(f"error{stage}: {exc}", file=sys.stderr)
        return 2
    return 0
