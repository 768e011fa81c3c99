"""Run configuration: sectioned key=value files with a strict schema.

A run is described by a plain INI file.  Every key must appear in the
schema below — unknown sections or keys are rejected, not ignored, so a
typo can never silently fall back to a default.  Values are coerced to
the type of the schema default.

Precedence, lowest to highest: schema defaults, config file, environment
variables, command-line flags.  An environment variable ARTOK_<SECTION>_<KEY>
(upper case) overrides any key, e.g. ARTOK_TOKENIZER_STEPS=50 or
ARTOK_RUN_SEED=7.

The fully resolved configuration has a canonical text form; its SHA-256
prefix is the run's config hash, stamped into every artifact header.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib

from .autodiff import ContractViolation

STAGES = (
    "gen-data",
    "train-tokenizer",
    "train-renderer",
    "train-ar",
    "rl",
    "diagnose",
    "reconstruct",
    "bellman-check",
)

# Schema: section -> {key: default}.  The default's type is the key's type.
# Empty-string path values mean "use the conventional file in the out dir".
DEFAULTS = {
    "run": {
        "stage": "",
        "seed": 0,
        "out": "out",
    },
    "data": {
        "count": 512,
    },
    "tokenizer": {
        "corpus": "",
        "steps": 2000,
        "log_every": 20,
        "schedule": "uniform",
        "token_count": 64,
        "codebook_size": 512,
        "optimizer": "adam",
        "lr": 2e-3,
        "batch_size": 8,
    },
    "renderer": {
        "corpus": "",
        "tokenizer": "",
        "steps": 600,
        "log_every": 20,
        "batch_size": 8,
        "phase_boundary": 1000,
        "gan": False,
    },
    "ar": {
        "tokenizer": "",
        "counts": "1,2,3",
        "colors": "red,green,blue,yellow",
        "per_task": 12,
        "steps": 400,
        "log_every": 50,
        "null_fraction": 0.2,
        "layers": 4,
        "width": 128,
        "heads": 4,
        "context": 96,
        "lr": 1e-3,
        "batch_size": 16,
    },
    "rl": {
        "tokenizer": "",
        "renderer": "",
        "ar": "",
        "tasks": "",
        "steps": 60,
        "group": 8,
        "kl_weight": 0.01,
        "holdout_every": 3,
        "eval_samples": 16,
        "log_every": 10,
    },
    "diagnose": {
        "tokenizer": "",
        "corpus": "",
        "orders": "sequential,stride_one,stride_two",
        "steps": 300,
        "eval_count": 64,
        "layers": 2,
        "width": 64,
        "heads": 2,
        "context": 96,
    },
    "reconstruct": {
        "tokenizer": "",
        "corpus": "",
        "renderer": "",
        "image_index": 0,
        "second_index": 1,
        "t_grid": "1.0,0.75,0.5,0.25,0.0",
        "interp_steps": 6,
    },
    "bellman": {
        "trials": 100,
        "tolerance": 1e-12,
    },
}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """A fully resolved run: stage, seed, out dir, and every typed key."""

    stage: str
    seed: int
    out: str
    sections: dict
    text: str
    hash: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractViolation(
                f"stage {self.stage!r} not one of {', '.join(STAGES)}")

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]


def _coerce(raw: str, default, where: str):
    """Parse raw text as the same type as the schema default."""
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ContractViolation(f"{where}: {raw!r} is not a boolean")
    try:
        if isinstance(default, int):
            return int(raw.strip())
        if isinstance(default, float):
            return float(raw.strip())
    except ValueError:
        kind = "integer" if isinstance(default, int) else "number"
        raise ContractViolation(f"{where}: {raw!r} is not an {kind}") from None
    return raw.strip()


def _fresh_defaults() -> dict:
    return {sec: dict(keys) for sec, keys in DEFAULTS.items()}


def read_config_file(path) -> dict:
    """Parse an INI file into {section: {key: raw string}}, schema-checked."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ContractViolation(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ContractViolation(f"config file {path}: {exc}") from None
    out = {}
    for section in cp.sections():
        if section not in DEFAULTS:
            raise ContractViolation(f"unknown config section [{section}]")
        out[section] = {}
        for key, raw in cp.items(section):
            if key not in DEFAULTS[section]:
                raise ContractViolation(f"unknown config key {section}.{key}")
            out[section][key] = raw
    return out


def env_overrides(environ) -> dict:
    """Collect ARTOK_<SECTION>_<KEY> overrides as raw strings."""
    out = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith("ARTOK_"):
            continue
        rest = name[len("ARTOK_"):].lower()
        section, _, key = rest.partition("_")
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ContractViolation(f"environment variable {name} matches no config key")
        out.setdefault(section, {})[key] = raw
    return out


def canonical_text(sections: dict) -> str:
    """Deterministic INI rendering, schema order, used for hashing and echo."""
    lines = []
    for section in DEFAULTS:
        lines.append(f"[{section}]")
        for key, default in DEFAULTS[section].items():
            value = sections[section][key]
            if isinstance(default, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def resolve(path=None, seed: int | None = None, out: str | None = None,
            environ: dict | None = None) -> RunConfig:
    """Merge defaults, file, environment, and flags into a RunConfig."""
    sections = _fresh_defaults()
    raw_layers = []
    if path is not None:
        raw_layers.append(read_config_file(path))
    if environ is not None:
        raw_layers.append(env_overrides(environ))
    for layer in raw_layers:
        for section, keys in layer.items():
            for key, raw in keys.items():
                sections[section][key] = _coerce(raw, DEFAULTS[section][key],
                                                 f"{section}.{key}")
    if seed is not None:
        sections["run"]["seed"] = int(seed)
    if out is not None:
        sections["run"]["out"] = str(out)
    text = canonical_text(sections)
    digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    return RunConfig(stage=sections["run"]["stage"], seed=sections["run"]["seed"],
                     out=sections["run"]["out"], sections=sections,
                     text=text, hash=digest)


def parse_list(raw: str, kind=str) -> list:
    """Split a comma-separated config value, dropping empty pieces."""
    items = [piece.strip() for piece in raw.split(",")]
    return [kind(piece) for piece in items if piece]
