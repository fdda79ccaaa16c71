"""Ablation matrix over neuron type, KL weighting and feature alignment.

Three row groups share one teacher and one corpus:

* ``components``: binary + forward KL, ternary + forward KL, ternary +
  bidirectional KL, ternary + bidirectional KL + pre-norm alignment;
* ``alignment``: ternary + bidirectional KL with none / pre / post / both;
* ``kl_weights``: ternary, no feature alignment, (alpha, beta) in
  (0, 1), (1, 0), (0.7, 0.2), (0.2, 0.7).

Rows with identical settings are trained once and reported in each group.
"""
from __future__ import annotations

import dataclasses
import io
import math

from .data import Corpus
from .distill import DistillConfig, evaluate, train_distill
from .model import ModelConfig, student_from_teacher

COLUMNS = ("group", "row", "neuron", "alpha", "beta", "feature_align", "eval_total", "eval_l1", "eval_l2",
           "eval_kl", "eval_ce", "eval_acc", "eval_copy_acc", "firing_rate", "train_final_total")

BIDIR = (0.2, 0.7)

ROWS = [
    ("components", "binary", "binary", 1.0, 0.0, "none"),
    ("components", "+ternary", "atmn", 1.0, 0.0, "none"),
    ("components", "+reverse_kl", "atmn", *BIDIR, "none"),
    ("components", "+pre_norm", "atmn", *BIDIR, "pre_norm"),
    ("alignment", "none", "atmn", *BIDIR, "none"),
    ("alignment", "pre_norm", "atmn", *BIDIR, "pre_norm"),
    ("alignment", "post_norm", "atmn", *BIDIR, "post_norm"),
    ("alignment", "both", "atmn", *BIDIR, "both"),
    ("kl_weights", "a0_b1", "atmn", 0.0, 1.0, "none"),
    ("kl_weights", "a1_b0", "atmn", 1.0, 0.0, "none"),
    ("kl_weights", "a0.7_b0.2", "atmn", 0.7, 0.2, "none"),
    ("kl_weights", "a0.2_b0.7", "atmn", 0.2, 0.7, "none"),
]


def run_ablation(teacher_params, teacher_cfg: ModelConfig, student_template: ModelConfig, corpus: Corpus,
                 eval_corpus: Corpus, base: DistillConfig, steps: int, eval_batches: int = 4,
                 progress=None) -> list[dict]:
    """Train and evaluate every row; returns one dict per row in ``ROWS`` order."""
    cache: dict[tuple, dict] = {}
    out = []
    for group, name, neuron, alpha, beta, align in ROWS:
        key = (neuron, alpha, beta, align)
        if key not in cache:
            dcfg = dataclasses.replace(base, alpha=alpha, beta=beta, feature_align=align, steps=steps)
            s_cfg = dataclasses.replace(student_template, neuron=neuron)
            student = student_from_teacher(teacher_params, s_cfg)
            student, log = train_distill(teacher_params, teacher_cfg, student, s_cfg, corpus, dcfg)
            m = evaluate(teacher_params, teacher_cfg, student, s_cfg, eval_corpus, dcfg, max_batches=eval_batches)
            m["train_final_total"] = log[-1]["total"] if log else math.nan
            cache[key] = m
        m = cache[key]
        out.append({
            "group": group, "row": name, "neuron": neuron, "alpha": alpha, "beta": beta, "feature_align": align,
            "eval_total": m["total"], "eval_l1": m["l1"], "eval_l2": m["l2"], "eval_kl": m["kl"],
            "eval_ce": m["ce"], "eval_acc": m["acc"], "eval_copy_acc": m["copy_acc"],
            "firing_rate": m["firing_rate"], "train_final_total": m["train_final_total"],
        })
        if progress:
            progress(out[-1])
    return out


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def render_table(rows: list[dict]) -> str:
    """Fixed-width text table, one block per group."""
    cols = ("row", "neuron", "alpha", "beta", "feature_align", "eval_kl", "eval_ce", "eval_acc", "eval_copy_acc",
            "firing_rate")
    buf = io.StringIO()
    for group in dict.fromkeys(r["group"] for r in rows):
        sub = [r for r in rows if r["group"] == group]
        cells = [[_cell(r[c]) for c in cols] for r in sub]
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
        buf.write(f"[{group}]\n")
        buf.write("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip() + "\n")
        for row in cells:
            buf.write("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() + "\n")
        buf.write("\n")
    return buf.getvalue()
