"""Teacher-to-student distillation.

Loss per batch::

    total = l1 + feature_weight * l2
    l1 = mean over (t, n, m) of sum_k (alpha p_k - beta q_k)(log p_k - log q_k)
    l2 = mean over (t, layer, n) of || rms(h_teacher) - rms(h_student) ||_F

``p`` is the (frozen) teacher distribution, ``q`` the student's per-step
distribution, and ``rms`` a parameter-free RMS normalization per position.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import SEP, Corpus, batches
from .errors import ConfigError
from .model import LayerTrace, ModelConfig, copy_params, model_forward
from .numerics import ContractError, GradTape, NumericError, Tensor

FEATURE_MODES = ("none", "pre_norm", "post_norm", "both")
METRIC_COLUMNS = ("step", "l1", "l2", "total", "firing_rate_mean", "lr")


class DivergenceError(ArithmeticError):
    """Loss or gradient went non-finite; carries the last finite parameters."""

    def __init__(self, step: int, last_good: dict, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.last_good = last_good


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.2
    beta: float = 0.7
    feature_align: str = "pre_norm"
    feature_weight: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    steps: int = 500
    batch: int = 8
    seq_len: int = 16
    seed: int = 0
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.alpha + self.beta <= 0:
            raise ConfigError("alpha + beta must be > 0")
        if self.feature_align not in FEATURE_MODES:
            raise ConfigError(f"feature_align must be one of {FEATURE_MODES}")
        if self.feature_weight < 0 or self.lr <= 0 or self.steps < 0:
            raise ConfigError("feature_weight >= 0, lr > 0 and steps >= 0 required")
        if self.batch < 1 or self.seq_len < 1:
            raise ConfigError("batch and seq_len must be >= 1")


@dataclass(frozen=True)
class TeacherTrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    steps: int = 2000
    batch: int = 8
    seq_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 0 or self.batch < 1 or self.seq_len < 1:
            raise ConfigError("invalid teacher training settings")


@dataclass
class LossBreakdown:
    l1_logit: float
    l2_feature: float
    total: float
    per_layer_l2: list = field(default_factory=list)
    loss: Tensor | None = None  # differentiable total


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _logits_array(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=nx.DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite logits")
    return arr


def bidirectional_kl(p_logits, q_logits, alpha: float, beta: float) -> Tensor:
    """Per-position ``sum_k (alpha p - beta q)(log p - log q)`` over the last axis.

    ``p_logits`` is treated as a constant (teacher); gradients flow into
    ``q_logits`` only. Shapes broadcast over leading axes.
    """
    if alpha < 0 or beta < 0:
        raise ContractError("alpha and beta must be >= 0")
    p_arr = _logits_array(p_logits)
    q = q_logits if isinstance(q_logits, Tensor) else Tensor(q_logits)
    _logits_array(q)
    if p_arr.shape[-1] < 2 or p_arr.shape[-1] != q.shape[-1]:
        raise ContractError(f"need matching distributions with D >= 2, got {p_arr.shape} and {q.shape}")
    lp = nx.log_softmax(Tensor._wrap(p_arr)).data
    lq = nx.log_softmax(q)
    weight = Tensor._wrap(alpha * np.exp(lp)) - nx.exp(lq) * beta
    return nx.tsum(weight * (Tensor._wrap(lp) - lq), axis=-1)


def rms_normalize(x, eps: float = 1e-6) -> Tensor:
    return nx.rmsnorm(x if isinstance(x, Tensor) else Tensor(x), None, eps)


def prenorm_align(h_teacher, h_student, eps: float = 1e-6, axes=None) -> Tensor:
    """``|| rms(h_teacher) - rms(h_student) ||_2``; teacher side constant.

    RMS is taken per position over the last axis; the norm over ``axes``
    (default: all axes).
    """
    ht = h_teacher.data if isinstance(h_teacher, Tensor) else np.asarray(h_teacher, dtype=nx.DTYPE)
    hs = h_student if isinstance(h_student, Tensor) else Tensor(h_student)
    if ht.shape[-1] != hs.shape[-1]:
        raise ContractError(f"feature dims differ: teacher {ht.shape[-1]}, student {hs.shape[-1]}")
    target = rms_normalize(Tensor._wrap(ht), eps).data
    return nx.l2norm(rms_normalize(hs, eps) - Tensor._wrap(target), axes=axes)


def _feature_pairs(mode: str, t: LayerTrace, s: LayerTrace):
    if mode in ("pre_norm", "both"):
        yield t.pre_norm_input, s.pre_norm_input
    if mode in ("post_norm", "both"):
        yield t.post_norm, s.post_norm


def total_distill_loss(teacher_logits, teacher_traces, student_logits, student_traces,
                       cfg: DistillConfig) -> LossBreakdown:
    """Logit term averaged over (t, n, m); feature term over (t, layer, n)."""
    if len(teacher_traces) != len(student_traces):
        raise ContractError(f"layer count mismatch: teacher {len(teacher_traces)}, student {len(student_traces)}")
    t_log = _logits_array(teacher_logits)
    if t_log.shape[0] not in (1, student_logits.shape[0]) or t_log.shape[1:] != student_logits.shape[1:]:
        raise ContractError(f"logit shapes incompatible: {t_log.shape} vs {student_logits.shape}")
    l1 = nx.mean(bidirectional_kl(t_log, student_logits, cfg.alpha, cfg.beta))
    per_layer = []
    l2 = None
    if cfg.feature_align != "none" and student_traces:
        terms = []
        for t, s in zip(teacher_traces, student_traces):
            layer_terms = [nx.mean(prenorm_align(ht, hs, cfg.norm_eps, axes=(-2, -1)))
                           for ht, hs in _feature_pairs(cfg.feature_align, t, s)]
            term = layer_terms[0] if len(layer_terms) == 1 else layer_terms[0] + layer_terms[1]
            per_layer.append(term.item())
            terms.append(term)
        l2 = terms[0]
        for term in terms[1:]:
            l2 = l2 + term
        l2 = l2 * (1.0 / len(terms))
    total = l1 if l2 is None else l1 + l2 * cfg.feature_weight
    return LossBreakdown(
        l1_logit=l1.item(),
        l2_feature=0.0 if l2 is None else l2.item(),
        total=total.item(),
        per_layer_l2=per_layer,
        loss=total,
    )


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token NLL; ``logits[T, N, M, V]`` averaged over T first (rate decoding)."""
    lp = nx.log_softmax(nx.mean(logits, axis=0))
    onehot = np.zeros(lp.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    return nx.tsum(lp * Tensor._wrap(onehot)) * (-1.0 / targets.size)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment descent over a dict of leaf tensors, with global-norm clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8, clip=None):
        self.params = {k: v for k, v in sorted(params.items()) if v.requires_grad}
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in self.params.values() if p.grad is not None))

    def step(self) -> float:
        norm = self.grad_norm()
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return norm


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _cycle_batches(corpus: Corpus, batch: int, seq_len: int, seed: int):
    epoch = 0
    while True:
        yield from batches(corpus, batch, seq_len, seed + epoch)
        epoch += 1


def mean_firing_rate(traces) -> float:
    rates = [tr.firing_rate for t in traces for tr in t.spike_trains.values()]
    return float(np.mean(rates)) if rates else 0.0


class MetricsLog:
    """Append-only CSV; ``path=None`` keeps rows in memory only."""

    def __init__(self, path=None, columns=METRIC_COLUMNS):
        self.columns = columns
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(columns)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(row[c]) for c in self.columns])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _check_step(step, loss_value, opt: Adam, last_good):
    if not math.isfinite(loss_value):
        raise DivergenceError(step, last_good, f"loss is {loss_value}")
    if not math.isfinite(opt.grad_norm()):
        raise DivergenceError(step, last_good, "non-finite gradient")


def train_teacher(params: dict[str, Tensor], cfg: ModelConfig, corpus: Corpus, tcfg: TeacherTrainConfig,
                  metrics_path=None, progress=None):
    """Next-token cross-entropy pretraining of the dense teacher."""
    if cfg.spike_sites:
        raise ContractError("teacher must not have active spike sites")
    opt = Adam(params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.grad_clip)
    log = MetricsLog(metrics_path, ("step", "ce", "lr"))
    stream = _cycle_batches(corpus, tcfg.batch, tcfg.seq_len, tcfg.seed)
    for step in range(tcfg.steps):
        x, y = next(stream)
        last_good = copy_params(params)
        opt.zero_grad()
        try:
            with GradTape() as tape:
                logits, _ = model_forward(x, params, cfg)
                loss = cross_entropy(logits, y)
            tape.backward(loss)
        except NumericError as e:
            raise DivergenceError(step, last_good, str(e)) from e
        _check_step(step, loss.item(), opt, last_good)
        opt.step()
        log.append({"step": step, "ce": loss.item(), "lr": tcfg.lr})
        if progress:
            progress(step, loss.item())
    opt.zero_grad()
    return params, log.rows


def train_distill(teacher_params: dict[str, Tensor], teacher_cfg: ModelConfig,
                  student_params: dict[str, Tensor], student_cfg: ModelConfig,
                  corpus: Corpus, dcfg: DistillConfig, metrics_path=None, progress=None):
    """Adam on ``total_distill_loss``; the teacher is never written to."""
    teacher_cfg.check_alignment(student_cfg)
    teacher = {k: Tensor._wrap(v.data, requires_grad=False) for k, v in teacher_params.items()}
    opt = Adam(student_params, dcfg.lr, dcfg.beta1, dcfg.beta2, dcfg.adam_eps, dcfg.grad_clip)
    log = MetricsLog(metrics_path)
    if dcfg.steps == 0:
        return student_params, log.rows
    stream = _cycle_batches(corpus, dcfg.batch, dcfg.seq_len, dcfg.seed)
    for step in range(dcfg.steps):
        x, _ = next(stream)
        t_logits, t_traces = model_forward(x, teacher, teacher_cfg)
        last_good = copy_params(student_params)
        opt.zero_grad()
        try:
            with GradTape() as tape:
                s_logits, s_traces = model_forward(x, student_params, student_cfg)
                br = total_distill_loss(t_logits, t_traces, s_logits, s_traces, dcfg)
            tape.backward(br.loss)
        except NumericError as e:
            raise DivergenceError(step, last_good, str(e)) from e
        _check_step(step, br.total, opt, last_good)
        opt.step()
        log.append({"step": step, "l1": br.l1_logit, "l2": br.l2_feature, "total": br.total,
                    "firing_rate_mean": mean_firing_rate(s_traces), "lr": dcfg.lr})
        if progress:
            progress(step, br)
    opt.zero_grad()
    return student_params, log.rows


def evaluate(teacher_params, teacher_cfg: ModelConfig, student_params, student_cfg: ModelConfig,
             corpus: Corpus, dcfg: DistillConfig, max_batches: int = 4, seed: int = 12345) -> dict:
    """Held-out metrics averaged over up to ``max_batches`` batches (no gradients).

    ``total``/``l1``/``l2`` use ``dcfg``; ``kl`` is the forward KL of the
    rate-decoded student; ``ce``/``acc`` score next-token prediction, and
    ``copy_acc`` restricts accuracy to positions after a separator.
    """
    sums: dict[str, float] = {}
    count = 0
    hits = total = 0
    copy_hits = copy_total = 0
    for x, y in batches(corpus, dcfg.batch, dcfg.seq_len, seed):
        if count == max_batches:
            break
        t_logits, t_traces = model_forward(x, teacher_params, teacher_cfg)
        s_logits, s_traces = model_forward(x, student_params, student_cfg)
        br = total_distill_loss(t_logits, t_traces, s_logits, s_traces, dcfg)
        rate = Tensor._wrap(s_logits.data.mean(axis=0, keepdims=True))
        kl = nx.mean(bidirectional_kl(t_logits, rate, 1.0, 0.0)).item()
        ce = cross_entropy(s_logits, y).item()
        pred = s_logits.data.mean(axis=0).argmax(-1)
        after_sep = np.cumsum(x == SEP, axis=1) > 0
        hits += int(np.sum(pred == y))
        total += y.size
        copy_hits += int(np.sum((pred == y) & after_sep))
        copy_total += int(after_sep.sum())
        for k, v in (("total", br.total), ("l1", br.l1_logit), ("l2", br.l2_feature), ("kl", kl), ("ce", ce),
                     ("firing_rate", mean_firing_rate(s_traces))):
            sums[k] = sums.get(k, 0.0) + v
        count += 1
    out = {k: v / count for k, v in sums.items()}
    out["acc"] = hits / total
    out["copy_acc"] = copy_hits / copy_total if copy_total else float("nan")
    return out
