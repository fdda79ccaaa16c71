"""Toy decoder: selective state-space mixer + gated FFN, dense or spiking.

A layer computes::

    y = x + mixer(site(rmsnorm(x)))
    y = y + ffn(site(rmsnorm(y)))

and the spiking student places a neuron at up to four sites per layer:
before the mixer input projection (``mixer_in``), before the mixer output
projection (``mixer_out``), before the FFN up/gate projections (``ffn_in``)
and before the FFN down projection (``ffn_out``).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .atmn import NEURON_KINDS, SpikeTrain, Surrogate, spike_layer
from .numerics import ContractError, DimensionError, Tensor

SITES = ("mixer_in", "mixer_out", "ffn_in", "ffn_out")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 258
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_state: int = 16
    d_ffn: int = 384
    T: int = 4
    spiking: bool = False
    spike_sites: tuple = ()
    neuron: str = "atmn"
    tau: float = 2.0
    surrogate_width: float = 1.0
    injection: str = "per_step"
    rms_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_state", "d_ffn", "T"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        sites = tuple(self.spike_sites)
        unknown = set(sites) - set(SITES)
        if unknown:
            raise ContractError(f"unknown spike sites {sorted(unknown)}")
        # canonical order; disabled spiking means no sites at all
        sites = tuple(s for s in SITES if s in sites) if self.spiking else ()
        object.__setattr__(self, "spike_sites", sites)
        if self.neuron not in NEURON_KINDS:
            raise ContractError(f"unknown neuron kind {self.neuron!r}")
        if self.injection not in ("per_step", "initial"):
            raise ContractError(f"unknown injection mode {self.injection!r}")
        if self.tau <= 0 or self.rms_eps <= 0:
            raise ContractError("tau and rms_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def time_steps(self) -> int:
        """Steps actually simulated: 1 unless some spike site is active."""
        return self.T if self.spike_sites else 1

    def student(self, sites=SITES, neuron: str = "atmn") -> "ModelConfig":
        return dataclasses.replace(self, spiking=True, spike_sites=tuple(sites), neuron=neuron)

    def teacher(self) -> "ModelConfig":
        return dataclasses.replace(self, spiking=False, spike_sites=())

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["spike_sites"] = list(self.spike_sites)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown model config keys {sorted(unknown)}")
        d = dict(d)
        if "spike_sites" in d:
            d["spike_sites"] = tuple(d["spike_sites"])
        return cls(**d)

    def check_alignment(self, other: "ModelConfig") -> None:
        for name in ("vocab_size", "d_model", "n_layers"):
            if getattr(self, name) != getattr(other, name):
                raise ContractError(f"teacher/student disagree on {name}")


def in_proj_width(cfg: ModelConfig) -> int:
    # x, gate z, B, C, dt
    return 2 * cfg.d_model + 2 * cfg.n_heads * cfg.d_state + cfg.n_heads


def site_width(cfg: ModelConfig, site: str) -> int:
    return cfg.d_ffn if site == "ffn_out" else cfg.d_model


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _inv_softplus(y):
    return np.log(np.expm1(y))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Seeded initialization; includes thresholds for every active spike site."""
    rng = np.random.default_rng(seed)
    d, f, H = cfg.d_model, cfg.d_ffn, cfg.n_heads
    out_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers)

    def normal(shape, std):
        return rng.standard_normal(shape) * std

    p: dict[str, np.ndarray] = {"embed": normal((cfg.vocab_size, d), 1.0)}
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        p[f"{pre}.norm1"] = np.ones(d)
        p[f"{pre}.mixer.in_proj"] = normal((d, in_proj_width(cfg)), 1.0 / np.sqrt(d))
        p[f"{pre}.mixer.A"] = np.full(H, _inv_softplus(1.0))
        p[f"{pre}.mixer.dt_bias"] = _inv_softplus(np.geomspace(0.01, 0.3, H))
        p[f"{pre}.mixer.D"] = np.ones(H)
        p[f"{pre}.mixer.out_proj"] = normal((d, d), out_scale / np.sqrt(d))
        p[f"{pre}.norm2"] = np.ones(d)
        p[f"{pre}.ffn.up"] = normal((d, f), 1.0 / np.sqrt(d))
        p[f"{pre}.ffn.gate"] = normal((d, f), 1.0 / np.sqrt(d))
        p[f"{pre}.ffn.down"] = normal((f, d), out_scale / np.sqrt(f))
    p["norm_f"] = np.ones(d)
    p["head"] = normal((d, cfg.vocab_size), 1.0 / np.sqrt(d))
    params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
    add_spike_params(params, cfg)
    return params


def add_spike_params(params: dict[str, Tensor], cfg: ModelConfig, init: float = 0.0) -> dict[str, Tensor]:
    """Add a per-channel log-threshold ``a`` (V = exp(a)) for each active site, if missing."""
    for i in range(cfg.n_layers):
        for site in cfg.spike_sites:
            key = f"layers.{i}.spike.{site}.a"
            if key not in params:
                params[key] = Tensor(np.full(site_width(cfg, site), init), requires_grad=True)
    return params


def student_from_teacher(teacher_params: dict[str, Tensor], cfg: ModelConfig) -> dict[str, Tensor]:
    """Copy teacher weights into a fresh trainable dict and add thresholds for ``cfg``'s sites."""
    params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in teacher_params.items()
              if ".spike." not in k}
    return add_spike_params(params, cfg)


def copy_params(params: dict[str, Tensor], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor._wrap(v.data.copy(), requires_grad=requires_grad) for k, v in params.items()}


def freeze(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return copy_params(params, requires_grad=False)


# ---------------------------------------------------------------------------
# state-space mixer
# ---------------------------------------------------------------------------

@dataclass
class SsmBlockParams:
    in_proj: Tensor
    A: Tensor          # per-head; decay rate is -softplus(A)
    dt_bias: Tensor
    D: Tensor          # per-head skip
    out_proj: Tensor

    @classmethod
    def from_dict(cls, params: dict[str, Tensor], prefix: str) -> "SsmBlockParams":
        return cls(*(params[f"{prefix}.{k}"] for k in ("in_proj", "A", "dt_bias", "D", "out_proj")))


def selective_scan(xs: Tensor, B: Tensor, C: Tensor, alpha: Tensor, D: Tensor) -> Tensor:
    """Causal multi-head recurrence.

    Shapes: ``xs[N, M, H, P]``, ``B, C[N, M, H, S]``, ``alpha[N, M, H]``, ``D[H]``.
    Per head: ``S_t = alpha_t * S_{t-1} + B_t x_t^T`` and ``y_t = C_t^T S_t + D x_t``.
    """
    x, b, c, al, dd = xs.data, B.data, C.data, alpha.data, D.data
    N, M, H, P = x.shape
    S = b.shape[-1]
    if b.shape != (N, M, H, S) or c.shape != b.shape or al.shape != (N, M, H) or dd.shape != (H,):
        raise DimensionError(f"scan shapes inconsistent: x{x.shape} B{b.shape} C{c.shape} a{al.shape} D{dd.shape}")
    states = np.empty((M, N, H, S, P), dtype=nx.DTYPE)
    ys = np.empty_like(x)
    state = np.zeros((N, H, S, P), dtype=nx.DTYPE)
    for t in range(M):
        state = al[:, t, :, None, None] * state + b[:, t, :, :, None] * x[:, t, :, None, :]
        states[t] = state
        ys[:, t] = (c[:, t, :, None, :] @ state)[:, :, 0, :]
    out = ys + dd[None, None, :, None] * x

    def backward(g):
        gx = np.empty_like(x)
        gb = np.empty_like(b)
        gc = np.empty_like(c)
        gal = np.empty_like(al)
        carry = np.zeros((N, H, S, P), dtype=nx.DTYPE)
        zero = np.zeros((N, H, S, P), dtype=nx.DTYPE)
        for t in range(M - 1, -1, -1):
            gy = g[:, t]
            dS = carry + c[:, t, :, :, None] * gy[:, :, None, :]
            gc[:, t] = (states[t] @ gy[:, :, :, None])[..., 0]
            gb[:, t] = (dS @ x[:, t, :, :, None])[..., 0]
            gx[:, t] = (b[:, t, :, None, :] @ dS)[:, :, 0, :]
            prev = states[t - 1] if t > 0 else zero
            gal[:, t] = np.sum(dS * prev, axis=(-2, -1))
            carry = al[:, t, :, None, None] * dS
        gx += dd[None, None, :, None] * g
        gd = np.sum(g * x, axis=(0, 1, 3))
        return gx, gb, gc, gal, gd

    return nx._result(out, (xs, B, C, alpha, D), backward, "ssm_scan", N=N, M=M, H=H, S=S, P=P)


def _project(x: Tensor, w: Tensor, train: SpikeTrain | None) -> Tensor:
    if train is None:
        return nx.matmul(x, w)
    return nx.spike_matmul(x, w, nnz=train.nnz, steps=train.T)


def ssm_block_forward(x: Tensor, params: SsmBlockParams, cfg: ModelConfig,
                      in_train: SpikeTrain | None = None, out_site=None):
    """Mixer over ``x[..., M, d]``. ``out_site`` (optional) maps the gated
    pre-projection activation to ``(activation, spike_train)``."""
    d, H, S, P = cfg.d_model, cfg.n_heads, cfg.d_state, cfg.head_dim
    if x.shape[-1] != d:
        raise DimensionError(f"mixer expects last dim {d}, got {x.shape}")
    lead = x.shape[:-2]
    M = x.shape[-2]
    N = int(np.prod(lead)) if lead else 1
    with nx.scope("mixer_in"):
        proj = _project(x, params.in_proj, in_train)
    with nx.scope("ssm"):
        xs = proj[..., :d].reshape((N, M, H, P))
        z = proj[..., d:2 * d]
        o = 2 * d
        B = proj[..., o:o + H * S].reshape((N, M, H, S))
        C = proj[..., o + H * S:o + 2 * H * S].reshape((N, M, H, S))
        dt = proj[..., o + 2 * H * S:].reshape((N, M, H))
        delta = nx.softplus(dt + params.dt_bias)
        alpha = nx.exp(nx.neg(nx.softplus(params.A)) * delta)
        y = selective_scan(xs, B, C, alpha, params.D).reshape(lead + (M, d))
        y = y * nx.silu(z)
    train = None
    if out_site is not None:
        with nx.scope("mixer_out"):
            y, train = out_site(y)
    with nx.scope("mixer_out"):
        out = _project(y, params.out_proj, train)
    return out, {"alpha": alpha, "mixer_out": train}


def _ffn(x, params, prefix, in_train, out_site):
    with nx.scope("ffn_in"):
        up = _project(x, params[f"{prefix}.up"], in_train)
        gate = _project(x, params[f"{prefix}.gate"], in_train)
    with nx.scope("ffn_act"):
        hidden = nx.silu(gate) * up
    train = None
    if out_site is not None:
        with nx.scope("ffn_out"):
            hidden, train = out_site(hidden)
    with nx.scope("ffn_out"):
        return _project(hidden, params[f"{prefix}.down"], train), train


def ffn_forward(x: Tensor, params: dict[str, Tensor], prefix: str = "ffn",
                in_train: SpikeTrain | None = None, out_site=None) -> Tensor:
    """``down(silu(x @ gate) * (x @ up))``."""
    return _ffn(x, params, prefix, in_train, out_site)[0]


# ---------------------------------------------------------------------------
# layers and model
# ---------------------------------------------------------------------------

@dataclass
class LayerTrace:
    """Per-layer features: ``pre_norm_input`` and ``post_norm`` are ``[T, N, M, d]``."""

    pre_norm_input: Tensor
    post_norm: Tensor
    spike_trains: dict[str, SpikeTrain] = field(default_factory=dict)


def _site_fn(params, cfg: ModelConfig, layer: int, site: str):
    if site not in cfg.spike_sites:
        return None
    a = params[f"layers.{layer}.spike.{site}.a"]
    surrogate = Surrogate(cfg.surrogate_width)

    def apply(x):
        return spike_layer(x, a, tau=cfg.tau, kind=cfg.neuron, surrogate=surrogate, injection=cfg.injection)

    return apply


def decoder_layer_forward(x: Tensor, params: dict[str, Tensor], cfg: ModelConfig, layer: int):
    pre = f"layers.{layer}"
    trains: dict[str, SpikeTrain] = {}
    with nx.scope("norm"):
        n1 = nx.rmsnorm(x, params[f"{pre}.norm1"], cfg.rms_eps)
    site = _site_fn(params, cfg, layer, "mixer_in")
    in_train = None
    if site is not None:
        with nx.scope("mixer_in"):
            n1, in_train = site(n1)
        trains["mixer_in"] = in_train
    y, info = ssm_block_forward(n1, SsmBlockParams.from_dict(params, f"{pre}.mixer"), cfg,
                                in_train=in_train, out_site=_site_fn(params, cfg, layer, "mixer_out"))
    if info["mixer_out"] is not None:
        trains["mixer_out"] = info["mixer_out"]
    with nx.scope("residual"):
        h = x + y
    with nx.scope("norm"):
        n2 = nx.rmsnorm(h, params[f"{pre}.norm2"], cfg.rms_eps)
    post = n2
    site = _site_fn(params, cfg, layer, "ffn_in")
    in_train = None
    if site is not None:
        with nx.scope("ffn_in"):
            n2, in_train = site(n2)
        trains["ffn_in"] = in_train
    f, out_train = _ffn(n2, params, f"{pre}.ffn", in_train, _site_fn(params, cfg, layer, "ffn_out"))
    if out_train is not None:
        trains["ffn_out"] = out_train
    with nx.scope("residual"):
        out = h + f
    return out, LayerTrace(pre_norm_input=x, post_norm=post, spike_trains=trains)


def check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    tok = np.asarray(tokens)
    if tok.dtype.kind not in "iu":
        raise ContractError("tokens must be integers")
    if tok.ndim == 1:
        tok = tok[None, :]
    if tok.ndim != 2:
        raise ContractError(f"tokens must be [M] or [N, M], got shape {tok.shape}")
    if tok.size and (tok.min() < 0 or tok.max() >= cfg.vocab_size):
        raise ContractError(f"token out of vocabulary range [0, {cfg.vocab_size})")
    return tok.astype(np.int64)


def model_forward(tokens, params: dict[str, Tensor], cfg: ModelConfig):
    """Return ``(logits[T_eff, N, M, vocab], traces)``.

    ``T_eff`` is ``cfg.T`` for a model with active spike sites and 1 otherwise.
    Embedding and output head run outside the counted decoder scope.
    """
    tok = check_tokens(tokens, cfg)
    steps = cfg.time_steps
    with nx.uncounted():
        x = nx.embedding(params["embed"], tok)
        x = nx.repeat_leading(x, steps)
    traces = []
    for i in range(cfg.n_layers):
        with nx.scope(f"layer{i}"):
            x, tr = decoder_layer_forward(x, params, cfg, i)
        traces.append(tr)
    with nx.uncounted():
        logits = nx.matmul(nx.rmsnorm(x, params["norm_f"], cfg.rms_eps), params["head"])
    return logits, traces


def rate_decoded(logits: Tensor) -> np.ndarray:
    """Average per-step logits over time (plain array, no tape)."""
    return logits.data.mean(axis=0)
