"""Flat dotted-key experiment configuration: defaults < JSON file < PLM_ environment < flags."""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

STAGES = ("prepare", "cluster", "pretrain-lm", "pretrain-planner", "finetune", "eval", "probe",
          "generate", "sweep")

DEFAULTS: dict = {
    "run.name": "default",
    "run.dir": "runs",
    "run.seed": 0,
    "run.stages": ["prepare", "cluster", "pretrain-planner", "finetune", "eval"],

    "corpus.source": "synthetic",        # "synthetic" or a path to .txt files / JSON lines
    "corpus.n_docs": 5000,
    "corpus.n_templates": 16,
    "corpus.n_genres": 4,
    "corpus.window": 128,
    "corpus.val_frac": 0.05,
    "corpus.test_frac": 0.05,

    "actions.K": 32,
    "actions.dim": 64,
    "actions.hash_dim": 4096,
    "actions.max_sentences": None,

    "planner.d": 128,
    "planner.layers": 2,
    "planner.heads": 4,
    "planner.max_sentences": 64,
    "planner.pretrain": "nap",           # "nap" or "e2e" (planner trained through the frozen LM)
    "planner.steps": 1000,
    "planner.lr": 1e-4,
    "planner.batch_size": 32,

    "lm.d_model": 128,
    "lm.layers": 4,
    "lm.heads": 4,
    "lm.context": 128,
    "lm.adapter_layers": None,
    "lm.pretrain_steps": 0,
    "lm.pretrain_lr": 1e-3,

    "trainer.steps": 2000,
    "trainer.lr": 1e-4,
    "trainer.planner_lr": None,
    "trainer.batch_size": 32,
    "trainer.unfreeze": "halfway",
    "trainer.mode": "soft",
    "trainer.predicted_fraction": 1.0,
    "trainer.nap_finetune": False,       # add the next-action loss during fine-tuning
    "trainer.nap_weight": 1.0,           # its weight when enabled
    "trainer.log_every": 50,

    "eval.split": "test",
    "eval.max_windows": None,
    "eval.lengths": [64, 128, 256],
    "eval.norm_base": 64,
    "eval.prefix_sentences": 2,
    "eval.n_docs": 20,
    "eval.n_unconditional": 10,
    "eval.temperature": 1.0,
    "eval.top_p": 0.9,
    "eval.hmm_states": 8,

    "probe.split": "val",
    "probe.distances": [1, 2, 4, 8],
    "probe.steps": 2000,
    "probe.lr": 1e-3,
    "probe.train_windows": 200,
    "probe.eval_windows": 100,

    "generate.prefix": "",
    "generate.n_tokens": 256,
    "generate.temperature": 1.0,
    "generate.top_p": 0.9,
    "generate.count": 1,

    "sweep.fractions": [0.0, 0.25, 0.5, 0.75, 1.0],
}

_CHOICES = {
    "planner.pretrain": ("nap", "e2e"),
    "trainer.unfreeze": ("immediate", "halfway", "never"),
    "trainer.mode": ("hard", "st", "soft", "uniform", "oracle"),
    "eval.split": ("train", "val", "test"),
    "probe.split": ("train", "val", "test"),
}
_POSITIVE = ("corpus.n_docs", "corpus.window", "actions.dim", "actions.hash_dim", "planner.d",
             "planner.layers", "planner.heads", "planner.max_sentences", "planner.batch_size",
             "lm.d_model", "lm.layers", "lm.heads", "lm.context", "trainer.batch_size",
             "eval.norm_base", "eval.hmm_states", "probe.steps", "generate.n_tokens")
_NON_NEGATIVE = ("planner.steps", "lm.pretrain_steps", "trainer.steps", "trainer.nap_weight",
                 "trainer.log_every", "eval.n_docs", "eval.n_unconditional", "eval.temperature",
                 "generate.temperature", "eval.prefix_sentences")

ENV_PREFIX = "PLM_"


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    """Interpret a string from the environment or command line (JSON first, else raw string)."""
    try:
        return json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return text


def env_overrides(environ=None) -> dict:
    """``PLM_TRAINER__UNFREEZE=never`` -> ``{"trainer.unfreeze": "never"}``."""
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].replace("__", ".")
            out[_canonical(key)] = parse_value(value)
    return out


def _canonical(key: str) -> str:
    key = key.replace("-", "_")
    lowered = {k.lower(): k for k in DEFAULTS}
    return lowered.get(key.lower(), key)


def resolve_alias(key: str) -> str:
    """Full dotted key for a flag name; unique leaf names (``unfreeze``) are accepted."""
    key = _canonical(key)
    if key in DEFAULTS:
        return key
    hits = [k for k in DEFAULTS if k.split(".", 1)[1].lower() == key.lower()]
    if len(hits) == 1:
        return hits[0]
    if len(hits) > 1:
        raise ConfigError(f"flag --{key} is ambiguous: use one of {', '.join('--' + h for h in hits)}")
    raise ConfigError(f"unknown config key {key!r}")


class ExperimentConfig:
    """Resolved configuration; every key has a default and unknown keys are rejected."""

    def __init__(self, values: dict | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        if values:
            self.update(values)

    @classmethod
    def resolve(cls, path=None, environ=None, flags: dict | None = None) -> "ExperimentConfig":
        cfg = cls()
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config file {path}: {e}") from None
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: config must be a JSON object of dotted keys")
            cfg.update(data)
        cfg.update(env_overrides(environ))
        cfg.update({resolve_alias(k): v for k, v in (flags or {}).items()})
        cfg.validate()
        return cfg

    def update(self, values: dict) -> None:
        unknown = sorted(k for k in values if k not in DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in values.items():
            self.values[k] = v

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **changes) -> "ExperimentConfig":
        out = ExperimentConfig(self.values)
        out.update({k.replace("__", "."): v for k, v in changes.items()})
        out.validate()
        return out

    def section(self, name: str) -> dict:
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def validate(self) -> None:
        """Check every key; raises one error listing all problems."""
        problems = []
        v = self.values
        for key, default in DEFAULTS.items():
            val = v[key]
            if default is None or key == "trainer.predicted_fraction":
                continue
            if val is None:
                problems.append(f"{key}: must not be null")
                continue
            if isinstance(default, bool) != isinstance(val, bool):
                problems.append(f"{key}: expected {type(default).__name__}, got {val!r}")
            elif isinstance(default, (int, float)) and not isinstance(val, (int, float)):
                problems.append(f"{key}: expected a number, got {val!r}")
            elif isinstance(default, int) and not isinstance(default, bool) and isinstance(val, float) \
                    and not val.is_integer():
                problems.append(f"{key}: expected an integer, got {val!r}")
            elif isinstance(default, list) and not isinstance(val, list):
                problems.append(f"{key}: expected a list, got {val!r}")
            elif isinstance(default, str) and not isinstance(val, str):
                problems.append(f"{key}: expected a string, got {val!r}")
        for key, choices in _CHOICES.items():
            if v[key] not in choices:
                problems.append(f"{key}: {v[key]!r} not in {choices}")
        for key in _POSITIVE:
            if isinstance(v[key], (int, float)) and v[key] <= 0:
                problems.append(f"{key}: must be > 0")
        for key in _NON_NEGATIVE:
            if isinstance(v[key], (int, float)) and v[key] < 0:
                problems.append(f"{key}: must be >= 0")
        f = v["trainer.predicted_fraction"]
        if not (f == "linear" or (isinstance(f, (int, float)) and 0 <= f <= 1)):
            problems.append("trainer.predicted_fraction: must be in [0, 1] or \"linear\"")
        if isinstance(v["actions.K"], int) and v["actions.K"] < 2:
            problems.append("actions.K: must be >= 2")
        for key in ("lm.d_model", "planner.d"):
            heads = v[key.split(".")[0] + ".heads"]
            if isinstance(v[key], int) and isinstance(heads, int) and heads > 0 and v[key] % heads:
                problems.append(f"{key}: must be divisible by the head count")
        bad = [s for s in v["run.stages"] if s not in STAGES] if isinstance(v["run.stages"], list) else []
        if bad:
            problems.append(f"run.stages: unknown stages {bad}")
        if isinstance(v["sweep.fractions"], list) and \
                any(not isinstance(x, (int, float)) or not 0 <= x <= 1 for x in v["sweep.fractions"]):
            problems.append("sweep.fractions: values must be in [0, 1]")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, indent=2)
