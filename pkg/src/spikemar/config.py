"""Run configuration: JSON file + ``section.key=value`` overrides.

Every key has a default (``DEFAULTS``); unknown sections or keys are
rejected. The top-level ``seed`` drives parameter init, corpus generation
and batch order.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .data import Corpus, gen_copy_task, gen_markov_text, load_text_file
from .distill import DistillConfig, TeacherTrainConfig
from .energy import CostModel
from .errors import ConfigError
from .model import SITES, ModelConfig
from .numerics import ContractError

DEFAULTS = {
    "seed": 0,
    "model": {
        "vocab_size": 258, "d_model": 128, "n_layers": 4, "n_heads": 4, "d_state": 16, "d_ffn": 384,
        "T": 4, "tau": 2.0, "surrogate_width": 1.0, "injection": "per_step", "rms_eps": 1e-6,
    },
    "spiking": {"sites": list(SITES), "neuron": "atmn"},
    "data": {
        "kind": "copy", "n_sequences": 2000, "length": 17, "eval_sequences": 64,
        "markov_order": 2, "n_tokens": 50000, "path": None,
    },
    "teacher_train": {
        "lr": 3e-3, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8, "grad_clip": 1.0,
        "steps": 2000, "batch": 8, "seq_len": 16,
    },
    "distill": {
        "alpha": 0.2, "beta": 0.7, "feature_align": "pre_norm", "feature_weight": 1.0,
        "lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8, "grad_clip": 1.0,
        "steps": 500, "batch": 8, "seq_len": 16, "norm_eps": 1e-6, "eval_batches": 4,
    },
    "ablation": {"steps": 150, "eval_batches": 4},
    "cost": {"e_mac": 4.6, "e_mult": 3.7, "e_ac": 0.9},
    "energy": {"lengths": [16, 32, 64, 128, 256], "exp_mult": 4, "svg": True},
}


def _merge(base: dict, update: dict, where: str = "") -> dict:
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k} must be a section")
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v
    return base


def parse_override(text: str) -> dict:
    """``a.b=value`` -> ``{"a": {"b": value}}``; value parsed as JSON, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override must be KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"malformed override key {key!r}")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


@dataclass
class RunConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def teacher(self) -> ModelConfig:
        return ModelConfig(**self.raw["model"])

    @property
    def student(self) -> ModelConfig:
        sp = self.raw["spiking"]
        return self.teacher.student(sites=tuple(sp["sites"]), neuron=sp["neuron"])

    @property
    def teacher_train(self) -> TeacherTrainConfig:
        return TeacherTrainConfig(**self.raw["teacher_train"], seed=self.seed)

    @property
    def distill(self) -> DistillConfig:
        d = {k: v for k, v in self.raw["distill"].items() if k != "eval_batches"}
        return DistillConfig(**d, seed=self.seed)

    @property
    def cost(self) -> CostModel:
        return CostModel.from_dict(self.raw["cost"])

    def corpora(self) -> tuple[Corpus, Corpus]:
        """Training corpus and a held-out corpus from a different seed."""
        d = self.raw["data"]
        kind = d["kind"]
        if kind == "copy":
            return (gen_copy_task(self.seed, d["n_sequences"], d["length"]),
                    gen_copy_task(self.seed + 1, d["eval_sequences"], d["length"]))
        if kind == "markov":
            return (gen_markov_text(self.seed, d["markov_order"], d["n_tokens"]),
                    gen_markov_text(self.seed + 1, d["markov_order"], max(d["n_tokens"] // 10, 1)))
        if kind == "file":
            if not d["path"]:
                raise ConfigError("data.kind=file needs data.path")
            full = load_text_file(d["path"])
            if not full.sequences:
                return full, full
            seq = full.sequences[0]
            cut = int(seq.size * 0.9)
            return Corpus([seq[:cut]], "file", None, cut), Corpus([seq[cut:]], "file", None, seq.size - cut)
        raise ConfigError(f"unknown data.kind {kind!r} (copy | markov | file)")

    def validate(self) -> "RunConfig":
        try:
            self.teacher, self.student, self.teacher_train, self.distill, self.cost
        except (ContractError, ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e
        if self.raw["data"]["kind"] == "copy" and self.raw["data"]["length"] - 1 < self.raw["distill"]["seq_len"]:
            raise ConfigError("copy task length must exceed distill.seq_len")
        return self

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def load_run_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(raw, user)
    for text in overrides:
        _merge(raw, parse_override(text))
    if seed is not None:
        raw["seed"] = seed
    return RunConfig(raw).validate()


def config_fields_match() -> bool:
    """Defaults cover exactly the dataclass fields they feed (seed excepted)."""
    model = {f.name for f in dataclasses.fields(ModelConfig)} - {"spiking", "spike_sites", "neuron"}
    distill = {f.name for f in dataclasses.fields(DistillConfig)} - {"seed"}
    teacher = {f.name for f in dataclasses.fields(TeacherTrainConfig)} - {"seed"}
    return (set(DEFAULTS["model"]) == model and set(DEFAULTS["distill"]) - {"eval_batches"} == distill
            and set(DEFAULTS["teacher_train"]) == teacher)
