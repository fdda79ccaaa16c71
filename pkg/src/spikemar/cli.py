"""``spikemar`` command line.

Subcommands: ``train-teacher``, ``distill``, ``ablate``, ``energy``, ``crossover``.
Every command writes under ``--out``: its artifacts, ``config.json`` (effective
config), ``manifest.json`` (artifact hashes) and ``run.log`` (the only file
with timestamps).

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import energy as en
from .ablation import COLUMNS as ABLATION_COLUMNS
from .ablation import render_table, run_ablation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import load_run_config
from .distill import DivergenceError, evaluate, train_distill, train_teacher
from .errors import ConfigError, DataError
from .model import init_params, student_from_teacher
from .numerics import ContractError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
log = logging.getLogger("spikemar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, default=Path("runs/out"), help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, e.g. distill.alpha=0.5 (repeatable)")
    p = _Parser(prog="spikemar", description="Ternary spiking SSM distillation and energy accounting.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train-teacher", parents=[common], help="train the dense teacher")
    d = sub.add_parser("distill", parents=[common], help="distill a spiking student from a teacher checkpoint")
    d.add_argument("--teacher", type=Path, required=True)
    a = sub.add_parser("ablate", parents=[common], help="run the 12-row ablation matrix")
    a.add_argument("--teacher", type=Path, required=True)
    e = sub.add_parser("energy", parents=[common], help="energy sweep over sequence lengths")
    e.add_argument("--checkpoint", type=Path, help="model to profile (default: seeded init)")
    e.add_argument("--lengths", type=int, nargs="+", help="overrides energy.lengths")
    sub.add_parser("crossover", parents=[common], help="crossover lengths of the shipped 1B-shaped specs")
    return p


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _finish(out: Path, command: str, cfg, artifacts: list[Path]) -> None:
    _write(out / "config.json", cfg.to_json())
    files = sorted({p.name for p in artifacts} | {"config.json"})
    manifest = {
        "command": command,
        "rules_version": en.RULES_VERSION,
        "files": {name: _sha256(out / name) for name in files},
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_teacher(path: Path, cfg):
    params, t_cfg, _ = load_checkpoint(path, requires_grad=False)
    if t_cfg.spike_sites:
        raise ConfigError(f"{path} holds a spiking model, expected a dense teacher")
    t_cfg.check_alignment(cfg.student)
    return params, t_cfg


def _progress(every: int, fmt):
    def report(step, value):
        if step % every == 0:
            log.info(fmt(step, value))
    return report


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train_teacher(cfg, out: Path) -> list[Path]:
    corpus, eval_corpus = cfg.corpora()
    t_cfg = cfg.teacher
    params = init_params(t_cfg, cfg.seed)
    tt = cfg.teacher_train
    params, rows = train_teacher(params, t_cfg, corpus, tt, metrics_path=out / "teacher_metrics.csv",
                                 progress=_progress(100, lambda s, v: f"teacher step {s} ce {v:.4f}"))
    dcfg = cfg.distill
    m = evaluate(params, t_cfg, params, t_cfg, eval_corpus, dcfg, cfg.raw["distill"]["eval_batches"])
    ev = _write(out / "teacher_eval.json", json.dumps({"ce": m["ce"], "acc": m["acc"], "copy_acc": m["copy_acc"]},
                                                       indent=2, sort_keys=True) + "\n")
    ck = save_checkpoint(out / "teacher.ckpt", params, t_cfg, {"role": "teacher", "steps": tt.steps})
    return [out / "teacher_metrics.csv", ev, ck]


def cmd_distill(cfg, out: Path, teacher_path: Path) -> list[Path]:
    teacher, t_cfg = _load_teacher(teacher_path, cfg)
    corpus, eval_corpus = cfg.corpora()
    s_cfg = cfg.student
    dcfg = cfg.distill
    n_eval = cfg.raw["distill"]["eval_batches"]
    student = student_from_teacher(teacher, s_cfg)
    before = evaluate(teacher, t_cfg, student, s_cfg, eval_corpus, dcfg, n_eval)
    student, _ = train_distill(teacher, t_cfg, student, s_cfg, corpus, dcfg, metrics_path=out / "metrics.csv",
                               progress=_progress(25, lambda s, b: f"distill step {s} total {b.total:.4f}"))
    after = evaluate(teacher, t_cfg, student, s_cfg, eval_corpus, dcfg, n_eval)
    ev = _write(out / "eval.json", json.dumps({"initial": before, "final": after}, indent=2, sort_keys=True) + "\n")
    ck = save_checkpoint(out / "student.ckpt", student, s_cfg, {"role": "student", "steps": dcfg.steps})
    log.info("eval total %.4f -> %.4f", before["total"], after["total"])
    return [out / "metrics.csv", ev, ck]


def cmd_ablate(cfg, out: Path, teacher_path: Path) -> list[Path]:
    teacher, t_cfg = _load_teacher(teacher_path, cfg)
    corpus, eval_corpus = cfg.corpora()
    ab = cfg.raw["ablation"]
    rows = run_ablation(teacher, t_cfg, cfg.student, corpus, eval_corpus, cfg.distill, ab["steps"],
                        ab["eval_batches"],
                        progress=lambda r: log.info("ablation %s/%s kl %.4f", r["group"], r["row"], r["eval_kl"]))
    csv_path = _write(out / "ablation.csv", _csv_text(ABLATION_COLUMNS, rows))
    txt_path = _write(out / "ablation.txt", render_table(rows))
    print(render_table(rows), end="")
    return [csv_path, txt_path]


def cmd_energy(cfg, out: Path, checkpoint: Path | None, lengths) -> list[Path]:
    ecfg = cfg.raw["energy"]
    lengths = list(lengths or ecfg["lengths"])
    cost = cfg.cost
    if checkpoint is not None:
        params, m_cfg, _ = load_checkpoint(checkpoint, requires_grad=False)
        targets = {"student" if m_cfg.spike_sites else "dense": (params, m_cfg)}
        if m_cfg.spike_sites:
            targets = {"dense": (params, m_cfg.teacher()), **targets}
    else:
        s_cfg = cfg.student
        params = init_params(s_cfg, cfg.seed)
        targets = {"dense": (params, s_cfg.teacher()), "student": (params, s_cfg)}
    rows = []
    series = {}
    for name, target in targets.items():
        r = en.energy_sweep(target, lengths, cost, name=name, exp_mult=ecfg["exp_mult"])
        rows.extend(r)
        series[name] = [(x["length"], x["total_pJ"]) for x in r if x["component"].endswith(":total")]
    csv_path = _write(out / "energy.csv", en.rows_to_csv(rows))
    paths = [csv_path]
    log.info("decoder energy excludes embedding and output head; rules %s", en.RULES_VERSION)
    if ecfg["svg"]:
        title = "decoder energy per sequence (embedding and head excluded)"
        paths.append(_write(out / "energy.svg", en.render_svg(series, title=title)))
    return paths


def cmd_crossover(cfg, out: Path) -> list[Path]:
    rows = en.crossover_report(cfg.cost, cfg.raw["energy"]["exp_mult"])
    cols = ("rules_version", "spec_a", "spec_b", "crossover", "crossover_exact")
    path = _write(out / "crossover.csv", _csv_text(cols, rows))
    for r in rows:
        print(f"[{r['rules_version']}] {r['spec_a']} vs {r['spec_b']}: crossover at M = {r['crossover']}")
    return [path]


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _threads_limit():
    raw = os.environ.get("SPIKEMAR_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SPIKEMAR_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("SPIKEMAR_THREADS must be >= 1")
    return threadpool_limits(limits=n)


def _setup_logging(out: Path) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"spikemar: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    handler = None
    try:
        cfg = load_run_config(args.config, args.override, args.seed)
        out = args.out
        handler = _setup_logging(out)
        log.info("command %s seed %d", args.command, cfg.seed)
        started = time.time()
        with _threads_limit():
            if args.command == "train-teacher":
                artifacts = cmd_train_teacher(cfg, out)
            elif args.command == "distill":
                artifacts = cmd_distill(cfg, out, args.teacher)
            elif args.command == "ablate":
                artifacts = cmd_ablate(cfg, out, args.teacher)
            elif args.command == "energy":
                artifacts = cmd_energy(cfg, out, args.checkpoint, args.lengths)
            else:
                artifacts = cmd_crossover(cfg, out)
        _finish(out, args.command, cfg, artifacts)
        log.info("done in %.1f s", time.time() - started)
        return EXIT_OK
    except (ConfigError, DataError, ContractError, CheckpointError, FileNotFoundError) as e:
        print(f"spikemar: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, DivergenceError, FloatingPointError, en.AccountingError) as e:
        print(f"spikemar: numeric failure: {e}", file=sys.stderr)
        if isinstance(e, DivergenceError) and handler is not None:
            m_cfg = cfg.teacher if args.command == "train-teacher" else cfg.student
            save_checkpoint(args.out / "last_good.ckpt", e.last_good, m_cfg, {"diverged_at": e.step})
        return EXIT_NUMERIC
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
