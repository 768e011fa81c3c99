"""Config resolution rules and the stage runner's filesystem contracts."""

import json

import pytest

from artok import cli, config
from artok.autodiff import ContractViolation

# Toy-sized settings so every stage runs in seconds.
BASE = {
    "run": {"seed": 3},
    "data": {"count": 8},
    "tokenizer": {"steps": 3, "token_count": 8, "codebook_size": 32},
    "renderer": {"steps": 2},
    "ar": {"steps": 3, "per_task": 1, "counts": "1,2,3", "colors": "red",
           "layers": 1, "width": 32, "heads": 2, "context": 32},
    "rl": {"steps": 2, "group": 4, "eval_samples": 2, "log_every": 1},
    "diagnose": {"steps": 2, "eval_count": 2, "orders": "sequential"},
    "reconstruct": {"t_grid": "1.0,0.0", "interp_steps": 2},
    "bellman": {"trials": 5},
}


def write_cfg(tmp_path, stage, out=None, overrides=None):
    """Render BASE + overrides ({'section.key': value}) to an INI file."""
    out = out or (tmp_path / "out")
    sections = {sec: dict(keys) for sec, keys in BASE.items()}
    sections["run"].update(stage=stage, out=out)
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".")
        sections.setdefault(section, {})[key] = value
    text = "\n".join(f"[{sec}]\n" + "".join(f"{k} = {v}\n" for k, v in keys.items())
                     for sec, keys in sections.items())
    path = tmp_path / f"{stage}.ini"
    path.write_text(text)
    return path, out


# ---------------------------------------------------------------------------
# config resolution


def test_defaults_resolve_without_file():
    cfg = config.resolve(seed=0, out="x", environ={"ARTOK_RUN_STAGE": "gen-data"})
    assert cfg.stage == "gen-data"
    assert cfg["tokenizer"]["steps"] == 2000
    assert cfg["rl"]["kl_weight"] == 0.01


def test_file_overrides_defaults(tmp_path):
    path, out = write_cfg(tmp_path, "gen-data")
    cfg = config.resolve(path)
    assert cfg.seed == 3
    assert cfg["data"]["count"] == 8
    assert cfg["tokenizer"]["token_count"] == 8
    assert cfg["renderer"]["phase_boundary"] == 1000  # untouched default


def test_env_overrides_file_and_flags_override_env(tmp_path):
    path, _ = write_cfg(tmp_path, "gen-data")
    env = {"ARTOK_DATA_COUNT": "21", "ARTOK_RUN_SEED": "9"}
    cfg = config.resolve(path, environ=env)
    assert cfg["data"]["count"] == 21
    assert cfg.seed == 9
    cfg = config.resolve(path, seed=5, environ=env)
    assert cfg.seed == 5  # flag beats env


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[run]\nstage = gen-data\n\n[mystery]\nx = 1\n")
    with pytest.raises(ContractViolation, match="mystery"):
        config.resolve(path)


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[run]\nstage = gen-data\nspeed = 9\n")
    with pytest.raises(ContractViolation, match="run.speed"):
        config.resolve(path)


def test_unknown_env_key_rejected():
    with pytest.raises(ContractViolation, match="ARTOK_RUN_TURBO"):
        config.resolve(environ={"ARTOK_RUN_TURBO": "1"})


def test_type_errors_named(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[run]\nstage = gen-data\nseed = soon\n")
    with pytest.raises(ContractViolation, match="run.seed"):
        config.resolve(path)


def test_bool_coercion(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nstage = gen-data\n\n[renderer]\ngan = yes\n")
    assert config.resolve(path)["renderer"]["gan"] is True
    path.write_text("[run]\nstage = gen-data\n\n[renderer]\ngan = maybe\n")
    with pytest.raises(ContractViolation, match="boolean"):
        config.resolve(path)


def test_bad_stage_rejected(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nstage = deploy\n")
    with pytest.raises(ContractViolation, match="deploy"):
        config.resolve(path)
    path.write_text("[run]\nseed = 1\n")  # no stage at all
    with pytest.raises(ContractViolation, match="stage"):
        config.resolve(path)


def test_all_stage_names_accepted():
    for stage in config.STAGES:
        cfg = config.resolve(environ={"ARTOK_RUN_STAGE": stage})
        assert cfg.stage == stage


def test_hash_tracks_content():
    a = config.resolve(environ={"ARTOK_RUN_STAGE": "gen-data"})
    b = config.resolve(environ={"ARTOK_RUN_STAGE": "gen-data"})
    c = config.resolve(environ={"ARTOK_RUN_STAGE": "gen-data",
                                "ARTOK_DATA_COUNT": "99"})
    assert a.hash == b.hash and a.text == b.text
    assert a.hash != c.hash
    assert len(a.hash) == 16


def test_canonical_text_covers_every_key():
    cfg = config.resolve(environ={"ARTOK_RUN_STAGE": "rl"})
    for section, keys in config.DEFAULTS.items():
        assert f"[{section}]" in cfg.text
        for key in keys:
            assert f"\n{key} = " in cfg.text or cfg.text.startswith(f"{key} = ")


def test_parse_list():
    assert config.parse_list("1, 2,3", int) == [1, 2, 3]
    assert config.parse_list("red,, green") == ["red", "green"]
    assert config.parse_list("") == []


def test_missing_config_file(tmp_path):
    with pytest.raises(ContractViolation, match="not found"):
        config.resolve(tmp_path / "ghost.ini")


# ---------------------------------------------------------------------------
# stage runner


def test_gen_data_writes_corpus_and_echo(tmp_path):
    path, out = write_cfg(tmp_path, "gen-data")
    assert cli.main(["--config", str(path)]) == 0
    assert (out / "corpus.bin").exists()
    echoed = (out / "config_resolved.ini").read_text()
    assert "stage = gen-data" in echoed
    assert echoed == config.resolve(path).text


def test_missing_input_no_partial_outputs(tmp_path, capsys):
    path, out = write_cfg(tmp_path, "train-tokenizer")
    assert cli.main(["--config", str(path)]) == 2
    assert not out.exists()  # nothing written, not even the echo
    assert "tokenizer.corpus" in capsys.readouterr().err


def test_rl_without_ar_checkpoint_is_input_error(tmp_path, capsys):
    fake_tok, fake_rend = tmp_path / "t.ckpt", tmp_path / "r.ckpt"
    fake_tok.write_bytes(b"x")
    fake_rend.write_bytes(b"x")
    path, out = write_cfg(tmp_path, "rl",
                          overrides={"rl.tokenizer": fake_tok,
                                     "rl.renderer": fake_rend})
    assert cli.main(["--config", str(path)]) == 2
    err = capsys.readouterr().err
    assert "rl.ar" in err and "[rl]" in err
    assert not out.exists()


def test_seed_and_out_flags_override(tmp_path):
    path, _ = write_cfg(tmp_path, "bellman-check")
    other = tmp_path / "elsewhere"
    assert cli.main(["--config", str(path), "--seed", "11",
                     "--out", str(other)]) == 0
    echoed = (other / "config_resolved.ini").read_text()
    assert "seed = 11" in echoed
    assert (other / "bellman.jsonl").exists()


def test_bellman_check_runs_and_logs(tmp_path):
    path, out = write_cfg(tmp_path, "bellman-check")
    assert cli.main(["--config", str(path)]) == 0
    lines = (out / "bellman.jsonl").read_text().splitlines()
    assert len(lines) == 5
    recs = [json.loads(line) for line in lines]
    assert all(r["residual"] <= 1e-12 for r in recs)


def test_bellman_tolerance_violation_exits_nonzero(tmp_path, capsys):
    path, out = write_cfg(tmp_path, "bellman-check",
                          overrides={"bellman.tolerance": "-1.0"})
    assert cli.main(["--config", str(path)]) == 2
    assert (out / "bellman.jsonl").exists()  # the computed log still lands
    assert "residual" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_nonfinite_loss_aborts_with_stage_and_step(tmp_path, capsys):
    gen, out = write_cfg(tmp_path, "gen-data")
    assert cli.main(["--config", str(gen)]) == 0
    blowup, _ = write_cfg(tmp_path, "train-tokenizer",
                          overrides={"tokenizer.optimizer": "sgd",
                                     "tokenizer.lr": "1.0e12",
                                     "tokenizer.steps": 40})
    assert cli.main(["--config", str(blowup)]) == 2
    err = capsys.readouterr().err
    assert "[train-tokenizer]" in err and "tokenizer step" in err
    assert not (out / "tokenizer_metrics.jsonl").exists()
    assert not (out / "tokenizer.ckpt").exists()


def test_metrics_logs_byte_identical_across_reruns(tmp_path):
    gen, out = write_cfg(tmp_path, "gen-data")
    assert cli.main(["--config", str(gen)]) == 0
    train, _ = write_cfg(tmp_path, "train-tokenizer")
    assert cli.main(["--config", str(train)]) == 0
    first = (out / "tokenizer_metrics.jsonl").read_bytes()
    ckpt_first = (out / "tokenizer.ckpt").read_bytes()
    assert cli.main(["--config", str(train)]) == 0
    assert (out / "tokenizer_metrics.jsonl").read_bytes() == first
    assert (out / "tokenizer.ckpt").read_bytes() == ckpt_first
    assert cli.main(["--config", str(train), "--seed", "4"]) == 0
    assert (out / "tokenizer_metrics.jsonl").read_bytes() != first


def test_full_micro_pipeline(tmp_path):
    """Every stage end to end at toy size, chained through one out dir."""
    stages = ["gen-data", "train-tokenizer", "train-renderer", "train-ar",
              "rl", "diagnose", "reconstruct", "bellman-check"]
    out = tmp_path / "out"
    for stage in stages:
        overrides = {}
        if stage == "reconstruct":
            overrides["reconstruct.renderer"] = out / "renderer.ckpt"
        path, _ = write_cfg(tmp_path, stage, out=out, overrides=overrides)
        assert cli.main(["--config", str(path)]) == 0, stage
    for artifact in ["corpus.bin", "tokenizer.ckpt", "tokenizer_metrics.jsonl",
                     "renderer.ckpt", "renderer_metrics.jsonl", "tasks.txt",
                     "ar.ckpt", "ar_metrics.jsonl", "ar_rl.ckpt",
                     "rl_metrics.jsonl", "rl_summary.json",
                     "entropy_sequential.tsv", "diagnose_summary.json",
                     "psnr.tsv", "progressive_000.ppm", "interp_000.ppm",
                     "bellman.jsonl"]:
        assert (out / artifact).exists(), artifact
    summary = json.loads((out / "rl_summary.json").read_text())
    assert set(summary) == {"before", "after", "delta"}
    rl_lines = (out / "rl_metrics.jsonl").read_text().splitlines()
    assert len(rl_lines) == 2
    assert {"kl", "loss", "prompt", "reward_mean", "step"} <= set(
        json.loads(rl_lines[0]))


def test_reconstruct_rejects_bad_index(tmp_path, capsys):
    out = tmp_path / "out"
    for stage in ["gen-data", "train-tokenizer"]:
        path, _ = write_cfg(tmp_path, stage, out=out)
        assert cli.main(["--config", str(path)]) == 0
    rec, _ = write_cfg(tmp_path, "reconstruct", out=out,
                       overrides={"reconstruct.image_index": 99})
    assert cli.main(["--config", str(rec)]) == 2
    assert "image index 99" in capsys.readouterr().err
