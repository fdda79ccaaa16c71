"""Independent reference computations used only by the tests.

Everything here is written with plain Python loops / direct formulas and
shares no code path with the package beyond array storage.
"""
import math

import numpy as np


def matmul_loops(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][x] * b[x][j] for x in range(k)) for j in range(n)] for i in range(m)]


def kl(p, q):
    return sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q) if pi > 0)


def bidirectional_kl_direct(p, q, alpha, beta):
    return sum((alpha * pi - beta * qi) * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q))


def softmax(x):
    m = max(x)
    e = [math.exp(v - m) for v in x]
    s = sum(e)
    return [v / s for v in e]


def neuron_trace(I0, V, tau, T, kind="atmn"):
    """Scalar hand-trace of the membrane recurrence with step-0 injection."""
    u = 0.0
    spikes, hs, us = [], [], []
    for t in range(T):
        h = (I0 if t == 0 else 0.0) + u / tau
        if h >= V:
            s = 1
        elif kind == "atmn" and h <= -V:
            s = -1
        else:
            s = 0
        u = h - s * V
        spikes.append(s)
        hs.append(h)
        us.append(u)
    return spikes, hs, us


def anchored_smoothed_neuron(J, a, tau, width, ref_h, ref_s, ref_V, kind="atmn", scale_out=True):
    """Neuron whose spike is replaced by the surrogate's ramp, anchored at a reference trajectory.

    s_t(h, V) = s_ref_t + [ramp(h - V) - ramp(-h - V)] - [same at (h_ref_t, V_ref)]

    At the reference point the values coincide with the hard spikes; its exact
    derivative is the surrogate-defined gradient. Loops over every element.
    J: [T, n], a: [n]. Returns out[T, n] (s * V when scale_out).
    """
    def ramp(z):
        return min(max((z + width) / (2 * width), 0.0), 1.0)

    def smooth(h, V):
        up = ramp(h - V)
        return up if kind == "binary" else up - ramp(-h - V)

    T, n = J.shape
    out = np.zeros((T, n))
    for i in range(n):
        V = math.exp(a[i])
        u = 0.0
        for t in range(T):
            h = J[t, i] + u / tau
            s = ref_s[t, i] + smooth(h, V) - smooth(ref_h[t, i], ref_V[i])
            u = h - s * V
            out[t, i] = s * V if scale_out else s
    return out


def ssm_unrolled(x, B, C, alpha, D):
    """Element-by-element recurrence for one batch item: x[M,H,P], B/C[M,H,S], alpha[M,H], D[H]."""
    M, H, P = x.shape
    S = B.shape[-1]
    y = np.zeros((M, H, P))
    for h in range(H):
        state = [[0.0] * P for _ in range(S)]
        for t in range(M):
            for s in range(S):
                for p in range(P):
                    state[s][p] = alpha[t, h] * state[s][p] + B[t, h, s] * x[t, h, p]
            for p in range(P):
                y[t, h, p] = sum(C[t, h, s] * state[s][p] for s in range(S)) + D[h] * x[t, h, p]
    return y


def grad_close(got, want, rtol=1e-4, atol=1e-8):
    got, want = np.asarray(got), np.asarray(want)
    return np.all(np.abs(got - want) <= rtol * np.maximum(np.abs(got), np.abs(want)) + atol)
