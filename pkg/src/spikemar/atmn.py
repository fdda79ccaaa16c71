"""Adaptive ternary multi-step neuron, its binary baseline, and surrogate gradients.

Dynamics per element, for steps t = 0..T-1 with u_{-1} = 0::

    h_t = J_t + u_{t-1} / tau
    s_t = +1 if h_t >= V, -1 if h_t <= -V, else 0      (binary: 1 if h_t >= V else 0)
    u_t = h_t - s_t * V
    V   = exp(a)

``J_t`` is the injected current. A single external input ``I`` injected at the
first step only is ``J = [I, 0, ..., 0]``; stacked layers inside the model may
instead inject a fresh current every step (see ``spike_layer``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ContractError, NumericError, Tensor

NEURON_KINDS = ("atmn", "binary")


@dataclass(frozen=True)
class Surrogate:
    """Rectangular stand-in for the derivative of a unit step.

    ``grad(z) = 1 / (2 * width)`` for ``|z| <= width``, else 0.
    """

    width: float = 1.0

    def __post_init__(self):
        if self.width <= 0:
            raise ContractError("surrogate width must be positive")

    def grad(self, z: np.ndarray) -> np.ndarray:
        return np.where(np.abs(z) <= self.width, 1.0 / (2.0 * self.width), 0.0)

    def primitive(self, z: np.ndarray) -> np.ndarray:
        """Ramp whose derivative is ``grad``; a smoothed unit step."""
        return np.clip((z + self.width) / (2.0 * self.width), 0.0, 1.0)


@dataclass
class AtmnParams:
    a: np.ndarray | float = 0.0
    tau: float = 2.0
    T: int = 4

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError(f"tau must be > 0, got {self.tau}")
        if int(self.T) != self.T or self.T < 1:
            raise ContractError(f"T must be a positive integer, got {self.T}")
        self.T = int(self.T)
        self.a = np.asarray(self.a, dtype=nx.DTYPE)

    @property
    def threshold(self) -> np.ndarray:
        return np.exp(self.a)


@dataclass
class SpikeTrain:
    """Spike values with shape ``[T, ...]`` and the cached fraction of nonzero entries."""

    values: np.ndarray
    firing_rate: float = field(init=False)

    def __post_init__(self):
        vals = np.asarray(self.values)
        if not np.isin(vals, (-1, 0, 1)).all():
            raise ContractError("spike values must lie in {-1, 0, 1}")
        self.values = vals.astype(np.int8)
        self.firing_rate = float(np.count_nonzero(self.values)) / self.values.size if self.values.size else 0.0

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))

    def __neg__(self) -> "SpikeTrain":
        return SpikeTrain(-self.values)


@dataclass
class AtmnState:
    """Saved trajectory of one neuron run: pre-reset ``h`` and post-reset ``u``, both ``[T, ...]``."""

    h: np.ndarray
    u: np.ndarray
    s: np.ndarray
    V: np.ndarray
    tau: float
    kind: str = "atmn"


def atmn_threshold(a) -> Tensor:
    """Adaptive threshold ``exp(a)``; taped when ``a`` requires grad."""
    if isinstance(a, AtmnParams):
        a = a.a
    return nx.exp(nx.as_tensor(a))


def _fire(h: np.ndarray, V: np.ndarray, kind: str) -> np.ndarray:
    pos = (h >= V).astype(nx.DTYPE)
    if kind == "binary":
        return pos
    return pos - (h <= -V).astype(nx.DTYPE)


def run_neuron(J: np.ndarray, V, tau: float, kind: str = "atmn") -> AtmnState:
    """Run the membrane recurrence over the leading (time) axis of ``J``."""
    if kind not in NEURON_KINDS:
        raise ContractError(f"unknown neuron kind {kind!r}")
    J = np.asarray(J, dtype=nx.DTYPE)
    if J.ndim < 1 or J.shape[0] < 1:
        raise ContractError("need at least one time step")
    if not np.all(np.isfinite(J)):
        raise NumericError("non-finite neuron input")
    V = np.broadcast_to(np.asarray(V, dtype=nx.DTYPE), J.shape[1:])
    h = np.empty_like(J)
    u = np.empty_like(J)
    s = np.empty_like(J)
    prev = np.zeros(J.shape[1:], dtype=nx.DTYPE)
    for t in range(J.shape[0]):
        h[t] = J[t] + prev / tau
        s[t] = _fire(h[t], V, kind)
        u[t] = h[t] - s[t] * V
        prev = u[t]
    return AtmnState(h=h, u=u, s=s, V=np.asarray(V), tau=tau, kind=kind)


def _single_injection(inp: np.ndarray, T: int) -> np.ndarray:
    J = np.zeros((T,) + inp.shape, dtype=nx.DTYPE)
    J[0] = inp
    return J


def atmn_forward(inp, params: AtmnParams, return_state: bool = False):
    """Ternary spike train for external current ``inp`` injected at step 0."""
    arr = np.asarray(inp.data if isinstance(inp, Tensor) else inp, dtype=nx.DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite neuron input")
    state = run_neuron(_single_injection(arr, params.T), params.threshold, params.tau, "atmn")
    train = SpikeTrain(state.s)
    return (train, state) if return_state else train


def binary_lif_forward(inp, params: AtmnParams, return_state: bool = False):
    """Same dynamics with spikes restricted to {0, 1}; negative drive is never emitted."""
    arr = np.asarray(inp.data if isinstance(inp, Tensor) else inp, dtype=nx.DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite neuron input")
    state = run_neuron(_single_injection(arr, params.T), params.threshold, params.tau, "binary")
    train = SpikeTrain(state.s)
    return (train, state) if return_state else train


def _surrogate_slopes(h, V, kind: str, surrogate: Surrogate):
    """d s / d h and d s / d V with the step derivatives replaced by the surrogate."""
    up = surrogate.grad(h - V)
    if kind == "binary":
        return up, -up
    down = surrogate.grad(h + V)
    return up + down, down - up


def atmn_backward(spike_grad, state: AtmnState | None, surrogate: Surrogate | None = None):
    """Backpropagate ``d loss / d s_t`` through the recurrence.

    Returns ``(input_grad, V_grad_a)`` where ``input_grad`` has the shape of the
    per-step injected current ``J`` (``input_grad[0]`` is the gradient for a
    single step-0 injection) and the second entry is ``d loss / d a`` elementwise,
    before any reduction to the shape of ``a``.
    """
    if state is None:
        raise ContractError("atmn_backward needs the saved forward state")
    surrogate = surrogate or Surrogate()
    gs_all = np.asarray(spike_grad, dtype=nx.DTYPE)
    if gs_all.shape != state.h.shape:
        raise ContractError(f"spike_grad shape {gs_all.shape} != state shape {state.h.shape}")
    V = state.V
    gJ = np.empty_like(gs_all)
    gV = np.zeros(state.h.shape[1:], dtype=nx.DTYPE)
    gu = np.zeros_like(gV)
    for t in range(state.h.shape[0] - 1, -1, -1):
        dsdh, dsdV = _surrogate_slopes(state.h[t], V, state.kind, surrogate)
        s = state.s[t]
        # u_t = h_t - s_t V, so s_t also receives -V * du_t
        gs = gs_all[t] - gu * V
        gh = gu + gs * dsdh
        gV = gV - gu * s + gs * dsdV
        gJ[t] = gh
        gu = gh / state.tau
    return gJ, gV * V


def spike_layer(
    x: Tensor,
    a: Tensor,
    tau: float = 2.0,
    kind: str = "atmn",
    surrogate: Surrogate | None = None,
    injection: str = "per_step",
) -> tuple[Tensor, SpikeTrain]:
    """Taped spiking site: ``x[T, ..., d]`` -> ``(s * V, spikes)``.

    ``injection="per_step"`` feeds ``x[t]`` as the current at every step;
    ``"initial"`` injects the time-mean of ``x`` at step 0 only. The output
    carries ``s_t * V`` so downstream projections see charge in input units;
    ``V`` folds into the next weight matrix, keeping the product accumulate-only.
    """
    surrogate = surrogate or Surrogate()
    xd = x.data
    T = xd.shape[0]
    if injection == "per_step":
        J = xd
    elif injection == "initial":
        J = _single_injection(xd.mean(axis=0), T)
    else:
        raise ContractError(f"unknown injection mode {injection!r}")
    V_chan = np.exp(a.data)
    state = run_neuron(J, V_chan, tau, kind)
    train = SpikeTrain(state.s)
    out = state.s * state.V
    nx.record_op("neuron", n=xd.size, spikes=train.nnz)

    def backward(g):
        gJ, ga = atmn_backward(g * state.V, state, surrogate)
        # direct path through the output scaling s_t * V
        ga = ga + (g * state.s).sum(axis=0) * state.V
        if injection == "initial":
            gx = np.broadcast_to(gJ[0] / T, xd.shape).copy()
        else:
            gx = gJ
        return gx, nx._unbroadcast(ga, a.shape)

    return nx._result(out, (x, a), backward, "view"), train
