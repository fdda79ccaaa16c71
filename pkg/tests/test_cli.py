import csv
import hashlib
import json

import numpy as np
import pytest

from spikemar.checkpoint import load_checkpoint, save_checkpoint
from spikemar.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, run
from spikemar.config import DEFAULTS, config_fields_match, load_run_config, parse_override
from spikemar.errors import ConfigError
from spikemar.model import init_params

SMALL = {
    "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_state": 4, "d_ffn": 24},
    "data": {"n_sequences": 48, "eval_sequences": 16},
    "teacher_train": {"steps": 5},
    "distill": {"steps": 3, "eval_batches": 1},
    "ablation": {"steps": 1, "eval_batches": 1},
    "energy": {"lengths": [4, 8]},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture
def teacher_ckpt(tmp_path, small_config):
    out = tmp_path / "teacher"
    assert run(["train-teacher", "--config", str(small_config), "--out", str(out)]) == EXIT_OK
    return out / "teacher.ckpt"


def test_parse_override_values():
    assert parse_override("distill.alpha=0.5") == {"distill": {"alpha": 0.5}}
    assert parse_override("spiking.sites=[\"ffn_in\"]") == {"spiking": {"sites": ["ffn_in"]}}
    assert parse_override("model.injection=initial") == {"model": {"injection": "initial"}}
    with pytest.raises(ConfigError):
        parse_override("distill.alpha")
    with pytest.raises(ConfigError):
        parse_override("distill..alpha=1")


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="distill.gamma"):
        load_run_config(overrides=["distill.gamma=1"])
    with pytest.raises(ConfigError):
        load_run_config(overrides=["model=3"])
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(bad)
    with pytest.raises(ConfigError):
        load_run_config(overrides=["distill.alpha=-1"])
    with pytest.raises(ConfigError):
        load_run_config(overrides=["data.kind=file"]).corpora()


def test_defaults_cover_dataclass_fields():
    assert config_fields_match()
    cfg = load_run_config(seed=7)
    assert cfg.seed == 7 and cfg.distill.seed == 7
    assert cfg.student.spike_sites == tuple(DEFAULTS["spiking"]["sites"])
    assert cfg.distill.alpha == 0.2 and cfg.distill.beta == 0.7 and cfg.distill.feature_align == "pre_norm"


def test_crossover_command(tmp_path, capsys):
    assert run(["crossover", "--out", str(tmp_path)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert printed.count("count-rules-v1") == 2
    with open(tmp_path / "crossover.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and all(int(r["crossover"]) > 0 for r in rows)


def test_manifest_hashes_and_echoed_config(tmp_path, small_config):
    out = tmp_path / "energy"
    assert run(["energy", "--config", str(small_config), "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["files"]) == {"config.json", "energy.csv", "energy.svg"}
    for name, digest in manifest["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["model"]["d_model"] == 16 and echoed["cost"]["e_mac"] == 4.6


def test_usage_and_config_errors_exit_1(tmp_path, small_config):
    assert run(["no-such-command"]) == EXIT_USAGE
    assert run(["distill", "--out", str(tmp_path)]) == EXIT_USAGE  # missing --teacher
    assert run(["crossover", "--override", "cost.e_flop=1", "--out", str(tmp_path)]) == EXIT_USAGE
    assert run(["distill", "--config", str(small_config), "--teacher", str(tmp_path / "missing.ckpt"),
                "--out", str(tmp_path / "d")]) == EXIT_USAGE


def test_threads_env_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("SPIKEMAR_THREADS", "zero")
    assert run(["crossover", "--out", str(tmp_path)]) == EXIT_USAGE
    monkeypatch.setenv("SPIKEMAR_THREADS", "1")
    assert run(["crossover", "--out", str(tmp_path)]) == EXIT_OK


def test_numeric_failure_exit_2(tmp_path, small_config, teacher_ckpt):
    params, cfg, meta = load_checkpoint(teacher_ckpt)
    params["head"].data[0, 0] = np.nan
    bad = save_checkpoint(tmp_path / "nan.ckpt", params, cfg, meta)
    assert run(["distill", "--config", str(small_config), "--teacher", str(bad),
                "--out", str(tmp_path / "d")]) == EXIT_NUMERIC


def test_distill_zero_steps_returns_teacher_copy(tmp_path, small_config, teacher_ckpt):
    out = tmp_path / "d0"
    assert run(["distill", "--config", str(small_config), "--teacher", str(teacher_ckpt),
                "--override", "distill.steps=0", "--out", str(out)]) == EXIT_OK
    assert (out / "metrics.csv").read_text() == "step,l1,l2,total,firing_rate_mean,lr\n"
    teacher, _, _ = load_checkpoint(teacher_ckpt)
    student, s_cfg, _ = load_checkpoint(out / "student.ckpt")
    assert s_cfg.spike_sites
    assert all(np.array_equal(student[k].data, teacher[k].data) for k in teacher)
    assert all(np.all(student[k].data == 0.0) for k in student if ".spike." in k)


def test_commands_are_byte_reproducible(tmp_path, small_config, teacher_ckpt):
    outputs = []
    for tag in ("a", "b"):
        base = tmp_path / tag
        assert run(["distill", "--config", str(small_config), "--teacher", str(teacher_ckpt),
                    "--out", str(base / "d")]) == EXIT_OK
        assert run(["ablate", "--config", str(small_config), "--teacher", str(teacher_ckpt),
                    "--out", str(base / "ab")]) == EXIT_OK
        assert run(["energy", "--config", str(small_config), "--checkpoint", str(base / "d" / "student.ckpt"),
                    "--out", str(base / "en")]) == EXIT_OK
        outputs.append(base)
    for rel in ("d/metrics.csv", "d/eval.json", "d/student.ckpt", "ab/ablation.csv", "en/energy.csv",
                "en/energy.svg", "d/manifest.json"):
        assert (outputs[0] / rel).read_bytes() == (outputs[1] / rel).read_bytes(), rel
    with open(outputs[0] / "ab" / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12
    assert [r["group"] for r in rows] == ["components"] * 4 + ["alignment"] * 4 + ["kl_weights"] * 4


def test_seed_changes_outputs(tmp_path, small_config):
    texts = []
    for seed in (1, 2):
        out = tmp_path / f"s{seed}"
        assert run(["energy", "--config", str(small_config), "--seed", str(seed), "--out", str(out)]) == EXIT_OK
        texts.append((out / "energy.csv").read_text())
    assert texts[0] != texts[1]


def test_energy_checkpoint_from_seeded_init(tmp_path, small_config):
    cfg = load_run_config(small_config)
    ck = save_checkpoint(tmp_path / "dense.ckpt", init_params(cfg.teacher, 0), cfg.teacher)
    out = tmp_path / "en"
    assert run(["energy", "--config", str(small_config), "--checkpoint", str(ck), "--lengths", "3",
                "--out", str(out)]) == EXIT_OK
    lines = (out / "energy.csv").read_text().splitlines()
    assert lines[0] == "length,component,n_mac,n_mult,n_ac,firing_rate,total_pJ"
    assert all(line.startswith("3,dense:") for line in lines[1:])
