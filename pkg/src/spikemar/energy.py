"""Operation-level energy accounting.

Two routes produce operation counts:

* ``count_forward`` runs a real forward pass with an ``OpCounter`` installed;
  every numerics op reports its class and size, and an op without a pricing
  rule aborts the count (``AccountingError``) rather than being skipped.
* ``ArchSpec`` holds closed-form per-sequence counts as polynomials in the
  sequence length ``M`` for whole decoder families, priced by ``analytic_energy``.

Counting rules (version ``count-rules-v1``):

* one MAC per multiply-add in projections, attention scores/values and the
  state-space scan; a projection fed by spikes costs one AC per nonzero spike
  per output column (the threshold scale folds into the weights);
* additions and reductions: one AC per element; products/divisions: one mult;
* ``exp``/``log``: ``exp_mult`` mults each (default 4); sigmoid = exp + add + div;
  silu = sigmoid + mult; softplus = exp + log + add; softmax adds one AC per score
  for the normalizer and one mult per score each for scaling and division;
* RMS normalization: 2 mults + 1 AC per element, plus 1 mult when weighted;
* neuron update: 1 mult (leak) + 1 AC (input) per element-step, + 1 AC per spike (reset);
* reshapes, slices and gathers are free. Embedding and output head are not counted.
"""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import numerics as nx
from .model import ModelConfig, model_forward

RULES_VERSION = "count-rules-v1"
CSV_HEADER = ("length", "component", "n_mac", "n_mult", "n_ac", "firing_rate", "total_pJ")
SPIKE_SITES = ("mixer_in", "mixer_out", "ffn_in", "ffn_out")


class AccountingError(RuntimeError):
    pass


@dataclass(frozen=True)
class CostModel:
    """Energy per operation in picojoules."""

    e_mac: float = 4.6
    e_mult: float = 3.7
    e_ac: float = 0.9

    def __post_init__(self):
        if min(self.e_mac, self.e_mult, self.e_ac) <= 0:
            raise ValueError("operation energies must be strictly positive")

    def price(self, n_mac, n_mult, n_ac) -> float:
        return n_mac * self.e_mac + n_mult * self.e_mult + n_ac * self.e_ac

    @classmethod
    def from_dict(cls, d: dict) -> "CostModel":
        unknown = set(d) - {"e_mac", "e_mult", "e_ac"}
        if unknown:
            raise ValueError(f"unknown cost keys {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class OpCounts:
    mac: float = 0
    mult: float = 0
    ac: float = 0

    def __iadd__(self, other: "OpCounts") -> "OpCounts":
        self.mac += other.mac
        self.mult += other.mult
        self.ac += other.ac
        return self

    def energy(self, cost: CostModel) -> float:
        return cost.price(self.mac, self.mult, self.ac)


# ---------------------------------------------------------------------------
# instrumented counting
# ---------------------------------------------------------------------------

def _rules(exp_mult: int):
    e = exp_mult
    return {
        "add": lambda d: OpCounts(ac=d["n"]),
        "neg": lambda d: OpCounts(),
        "mul": lambda d: OpCounts(mult=d["n"]),
        "exp": lambda d: OpCounts(mult=e * d["n"]),
        "log": lambda d: OpCounts(mult=e * d["n"]),
        "sigmoid": lambda d: OpCounts(mult=(e + 1) * d["n"], ac=d["n"]),
        "silu": lambda d: OpCounts(mult=(e + 2) * d["n"], ac=d["n"]),
        "softplus": lambda d: OpCounts(mult=2 * e * d["n"], ac=d["n"]),
        "view": lambda d: OpCounts(),
        "gather": lambda d: OpCounts(),
        "sum": lambda d: OpCounts(ac=d["n"]),
        "matmul": lambda d: OpCounts(mac=d["rows"] * d["k"] * d["n"]),
        "spike_matmul": lambda d: OpCounts(ac=d["nnz"] * d["n"]),
        "rmsnorm": lambda d: OpCounts(mult=(3 if d["weighted"] else 2) * d["n"], ac=d["n"]),
        "log_softmax": lambda d: OpCounts(mult=e * d["n"], ac=2 * d["n"]),
        "l2norm": lambda d: OpCounts(mult=d["n"], ac=d["n"]),
        "ssm_scan": lambda d: OpCounts(
            mac=2 * d["N"] * d["M"] * d["H"] * d["S"] * d["P"],
            mult=d["N"] * d["M"] * d["H"] * (d["S"] * d["P"] + d["P"]),
            ac=d["N"] * d["M"] * d["H"] * d["P"],
        ),
        "neuron": lambda d: OpCounts(mult=d["n"], ac=d["n"] + d["spikes"]),
    }


@dataclass
class SiteStat:
    """Spike statistics and projection cost for one spike site of one layer."""

    spikes: int = 0
    elements: int = 0
    steps: int = 1
    proj_ac: float = 0
    dense_mac: float = 0

    @property
    def firing_rate(self) -> float:
        return self.spikes / self.elements if self.elements else 0.0


class OpCounter:
    """Accumulates counts per ``/``-joined scope label for one forward pass."""

    def __init__(self, exp_mult: int = 4):
        self.rules = _rules(exp_mult)
        self.labels: list[str] = []
        self.counts: dict[str, OpCounts] = defaultdict(OpCounts)
        self.sites: dict[str, SiteStat] = defaultdict(SiteStat)

    def push(self, label: str) -> None:
        self.labels.append(label)

    def pop(self) -> None:
        self.labels.pop()

    def record(self, op: str, dims: dict) -> None:
        rule = self.rules.get(op)
        if rule is None:
            raise AccountingError(f"no counting rule for op {op!r}")
        label = "/".join(self.labels) or "<root>"
        self.counts[label] += rule(dims)
        if op == "neuron":
            st = self.sites[label]
            st.spikes += dims["spikes"]
            st.elements += dims["n"]
        elif op == "spike_matmul":
            st = self.sites[label]
            st.steps = dims["steps"]
            st.proj_ac += dims["nnz"] * dims["n"]
            st.dense_mac += dims["rows"] // dims["steps"] * dims["k"] * dims["n"]


@dataclass
class EnergyReport:
    """Counts for one decoder forward pass (embedding and output head excluded)."""

    sequence_length: int
    counts: dict[str, OpCounts]
    sites: dict[str, SiteStat]
    cost: CostModel = field(default_factory=CostModel)
    config: dict = field(default_factory=dict)

    @property
    def n_mac(self) -> float:
        return sum(c.mac for c in self.counts.values())

    @property
    def n_mult(self) -> float:
        return sum(c.mult for c in self.counts.values())

    @property
    def n_ac(self) -> float:
        return sum(c.ac for c in self.counts.values())

    @property
    def total_pJ(self) -> float:
        return self.cost.price(self.n_mac, self.n_mult, self.n_ac)

    @property
    def firing_rates(self) -> dict[str, float]:
        return {k: s.firing_rate for k, s in sorted(self.sites.items()) if s.elements}

    def by_component(self) -> dict[str, OpCounts]:
        """Counts merged across layers, keyed by the innermost scope name."""
        out: dict[str, OpCounts] = defaultdict(OpCounts)
        for label, c in self.counts.items():
            out[label.split("/")[-1]] += c
        return dict(sorted(out.items()))

    def component_firing_rates(self) -> dict[str, float]:
        agg: dict[str, list] = defaultdict(lambda: [0, 0])
        for label, s in self.sites.items():
            if s.elements:
                a = agg[label.split("/")[-1]]
                a[0] += s.spikes
                a[1] += s.elements
        return {k: v[0] / v[1] for k, v in sorted(agg.items())}

    def site_energies(self) -> dict[str, tuple[float, float, float]]:
        """Per spiking projection: ``(firing_rate * T, spiking_pJ, dense_equivalent_pJ)``."""
        out = {}
        for label, s in sorted(self.sites.items()):
            if s.dense_mac:
                out[label] = (s.firing_rate * s.steps, s.proj_ac * self.cost.e_ac, s.dense_mac * self.cost.e_mac)
        return out

    def rows(self, prefix: str = "") -> list[dict]:
        rates = self.component_firing_rates()
        rows = []
        for comp, c in self.by_component().items():
            rows.append(_row(self.sequence_length, prefix + comp, c, self.cost, rates.get(comp)))
        total = OpCounts(self.n_mac, self.n_mult, self.n_ac)
        rows.append(_row(self.sequence_length, prefix + "total", total, self.cost, None))
        return rows


def _row(length, component, c: OpCounts, cost: CostModel, rate) -> dict:
    return {
        "length": length,
        "component": component,
        "n_mac": c.mac,
        "n_mult": c.mult,
        "n_ac": c.ac,
        "firing_rate": "" if rate is None else rate,
        "total_pJ": c.energy(cost),
    }


def count_forward(params, cfg: ModelConfig, tokens, cost: CostModel | None = None, exp_mult: int = 4) -> EnergyReport:
    """Instrumented forward pass; exact counts of what executed inside the decoder."""
    cost = cost or CostModel()
    tok = np.asarray(tokens)
    M = tok.shape[-1]
    counter = OpCounter(exp_mult)
    if M == 0:
        # an empty sequence runs nothing, not even the per-forward decay transform
        return EnergyReport(0, {}, {}, cost, cfg.to_dict())
    with nx.counting(counter):
        model_forward(tok, params, cfg)
    return EnergyReport(M, dict(counter.counts), dict(counter.sites), cost, cfg.to_dict())


# ---------------------------------------------------------------------------
# analytic specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchSpec:
    """Per-sequence op counts as polynomials ``c0 + c1*M + c2*M**2`` per class."""

    name: str
    family: str  # attention | ssm | spiking-ssm | ffn
    mac: tuple = (0, 0, 0)
    mult: tuple = (0, 0, 0)
    ac: tuple = (0, 0, 0)

    def __post_init__(self):
        if self.family == "attention" and not self.mac[2] > 0:
            raise ValueError("attention family needs a positive quadratic MAC coefficient")
        if self.family in ("ssm", "spiking-ssm", "ffn") and any(p[2] for p in (self.mac, self.mult, self.ac)):
            raise ValueError(f"{self.family} family must have no quadratic terms")

    def counts(self, M) -> OpCounts:
        def ev(p):
            return p[0] + p[1] * M + p[2] * M * M

        return OpCounts(ev(self.mac), ev(self.mult), ev(self.ac))


def analytic_energy(arch: ArchSpec, M, cost: CostModel | None = None) -> float:
    return arch.counts(M).energy(cost or CostModel())


def attention_spec(name, d_model, n_layers, n_heads, n_kv_heads, head_dim, exp_mult=4, **_) -> ArchSpec:
    """Grouped-query softmax attention block; scores and values over the full M x M grid."""
    q = n_heads * head_dim
    kv = n_kv_heads * head_dim
    mac1 = d_model * (q + 2 * kv) + q * d_model
    mac2 = 2 * n_heads * head_dim
    mult2 = n_heads * (exp_mult + 2)
    ac2 = n_heads
    L = n_layers
    return ArchSpec(name, "attention", (0, L * mac1, L * mac2), (0, 0, L * mult2), (0, 0, L * ac2))


def ffn_spec(name, d_model, n_layers, d_ffn, exp_mult=4, **_) -> ArchSpec:
    """Gated FFN: up, gate and down projections with a silu gate."""
    L = n_layers
    return ArchSpec(
        name, "ffn",
        (0, L * 3 * d_model * d_ffn, 0),
        (0, L * (exp_mult + 3) * d_ffn, 0),
        (0, L * d_ffn, 0),
    )


def mamba2_spec(name, d_model, n_layers, n_heads, head_dim, d_state, n_qk_heads, conv_kernel=4,
                exp_mult=4, **_) -> ArchSpec:
    """Discrete multi-head state-space mixer with depthwise conv over x, B and C."""
    e = exp_mult
    di = n_heads * head_dim
    bc = n_qk_heads * d_state
    conv_ch = di + 2 * bc
    mac1 = d_model * (2 * di + 2 * bc + n_heads) + conv_kernel * conv_ch + 2 * n_heads * d_state * head_dim + di * d_model
    mult1 = (
        (e + 2) * conv_ch  # silu on conv outputs
        + (2 * e + 1 + e) * n_heads  # softplus(dt), A*dt, exp
        + n_heads * d_state * head_dim + 2 * di  # decay, dt*x, skip
        + (e + 3) * di  # silu gate and product
    )
    ac1 = conv_ch + n_heads + di + di
    L = n_layers
    return ArchSpec(name, "ssm", (0, L * mac1, 0), (0, L * mult1, 0), (0, L * ac1, 0))


def toy_dense_spec(cfg: ModelConfig, exp_mult: int = 4, name: str = "toy-dense") -> ArchSpec:
    """Closed form of what ``count_forward`` measures for a non-spiking toy model, batch 1."""
    if cfg.spike_sites:
        raise ValueError("analytic toy spec covers the dense model only")
    e = exp_mult
    d, f, H, S, P = cfg.d_model, cfg.d_ffn, cfg.n_heads, cfg.d_state, cfg.head_dim
    w_in = 2 * d + 2 * H * S + H
    mac1 = d * w_in + 2 * H * S * P + d * d + 2 * d * f + f * d
    mult1 = (
        2 * 3 * d  # two weighted norms
        + 2 * e * H + H + e * H  # softplus(dt), decay product, exp
        + H * (S * P + P)  # scan decay + skip
        + (e + 2) * d + d  # silu(z), gate product
        + (e + 2) * f + f  # ffn silu, product
    )
    ac1 = 2 * d + H + H + H * P + d + 2 * d + f
    mult0 = 2 * e * H  # softplus(A), once per forward
    ac0 = H
    L = cfg.n_layers
    return ArchSpec(name, "ssm", (0, L * mac1, 0), (L * mult0, L * mult1, 0), (L * ac0, L * ac1, 0))


_BUILDERS = {"attention": attention_spec, "ffn": ffn_spec, "mamba2": mamba2_spec}


def load_shipped_specs(exp_mult: int = 4) -> tuple[dict[str, ArchSpec], dict]:
    """Build the 1B-shaped specs from the packaged shape file."""
    raw = json.loads(resources.files("spikemar").joinpath("archspecs_1b.json").read_text())
    specs = {}
    for name, entry in raw["specs"].items():
        shape = dict(raw["shapes"][entry["shape"]])
        specs[name] = _BUILDERS[entry["block"]](name, exp_mult=exp_mult, **shape)
    return specs, raw


def crossover_root(spec_a: ArchSpec, spec_b: ArchSpec, cost: CostModel, bracket=(1, 1_000_000), rtol=1e-12):
    """Real-valued root of ``E_a(M) - E_b(M)`` by bisection, or ``None`` without a sign change."""
    lo, hi = float(bracket[0]), float(bracket[1])
    if not 0 < lo < hi:
        raise ValueError(f"invalid bracket {bracket}")

    def gap(M):
        return analytic_energy(spec_a, M, cost) - analytic_energy(spec_b, M, cost)

    g_lo, g_hi = gap(lo), gap(hi)
    if g_lo == 0:
        return lo if g_hi != 0 else None
    if g_hi == 0:
        return hi
    if (g_lo > 0) == (g_hi > 0):
        return None
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        g = gap(mid)
        if g == 0:
            return mid
        if (g > 0) == (g_lo > 0):
            lo, g_lo = mid, g
        else:
            hi = mid
    return 0.5 * (lo + hi)


def find_crossover(spec_a: ArchSpec, spec_b: ArchSpec, cost: CostModel | None = None, bracket=(1, 1_000_000)):
    """Integer-rounded crossover length, or ``None`` when the bracket has no sign change."""
    root = crossover_root(spec_a, spec_b, cost or CostModel(), bracket)
    return None if root is None else int(round(root))


def crossover_report(cost: CostModel | None = None, exp_mult: int = 4) -> list[dict]:
    cost = cost or CostModel()
    specs, raw = load_shipped_specs(exp_mult)
    rows = []
    for a, b in raw["comparisons"]:
        root = crossover_root(specs[a], specs[b], cost, raw["bracket"])
        rows.append({
            "rules_version": RULES_VERSION,
            "spec_a": a,
            "spec_b": b,
            "crossover": None if root is None else int(round(root)),
            "crossover_exact": root,
        })
    return rows


# ---------------------------------------------------------------------------
# sweeps and output
# ---------------------------------------------------------------------------

def sweep_tokens(cfg: ModelConfig, M: int, seed: int = 0, batch: int = 1) -> np.ndarray:
    rng = np.random.default_rng([seed, M])
    return rng.integers(0, min(cfg.vocab_size, 256), size=(batch, M))


def energy_sweep(target, lengths, cost: CostModel | None = None, name: str | None = None,
                 tokens_fn=None, exp_mult: int = 4) -> list[dict]:
    """CSV rows for ``target`` across ``lengths``.

    ``target`` is an ``ArchSpec`` (analytic) or a ``(params, ModelConfig)`` pair
    (instrumented; tokens from ``tokens_fn(M)`` or seeded random bytes).
    """
    cost = cost or CostModel()
    rows: list[dict] = []
    for M in lengths:
        if isinstance(target, ArchSpec):
            rows.append(_row(M, name or target.name, target.counts(M), cost, None))
        else:
            params, cfg = target
            toks = tokens_fn(M) if tokens_fn else sweep_tokens(cfg, M)
            rep = count_forward(params, cfg, toks, cost, exp_mult)
            rows.extend(rep.rows(prefix=f"{name}:" if name else ""))
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def rows_to_csv(rows: list[dict], header=CSV_HEADER) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


def render_svg(series: dict[str, list[tuple[float, float]]], title: str = "", width: int = 640,
               height: int = 400) -> str:
    """Minimal line chart; deterministic text output."""
    pad = 60
    pts = [p for s in series.values() for p in s]
    if not pts:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"></svg>\n'
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = 0.0, max(ys) or 1.0
    x1 = x1 if x1 > x0 else x0 + 1

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 15}" text-anchor="middle">sequence length</text>',
        f'<text x="15" y="{height / 2:.1f}" transform="rotate(-90 15 {height / 2:.1f})" text-anchor="middle">energy (pJ)</text>',
        f'<text x="{pad}" y="{height - pad + 15}" text-anchor="middle">{x0:g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 15}" text-anchor="middle">{x1:g}</text>',
        f'<text x="{pad - 5}" y="{pad}" text-anchor="end">{y1:.3g}</text>',
    ]
    for i, (name, s) in enumerate(series.items()):
        c = colors[i % len(colors)]
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in sorted(s))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{path}"/>')
        out.append(f'<text x="{width - pad - 5}" y="{pad + 15 * (i + 1)}" text-anchor="end" fill="{c}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def fit_polynomial(x, y, degree: int):
    """Least-squares fit; returns ``(coeffs, max relative residual, R^2)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    coeffs = np.polyfit(x, y, degree)
    pred = np.polyval(coeffs, x)
    rel = float(np.max(np.abs(pred - y) / np.abs(y)))
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot else 1.0
    return coeffs, rel, r2


def spiking_advantage(rate_times_steps: float, cost: CostModel | None = None) -> bool:
    cost = cost or CostModel()
    return rate_times_steps < cost.e_mac / cost.e_ac

