"""Element-by-element reference for the gated recurrence and decoders.

Written with Python floats and explicit loops only (no matrix products), so
it shares no code path with the vectorized implementation.
"""

import math


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def cell(W, U, b, x, h, c):
    """One step; W is (k, 4H), U is (H, 4H) as nested lists or arrays."""
    H = len(h)
    z = []
    for j in range(4 * H):
        acc = float(b[j])
        for i in range(len(x)):
            acc += float(x[i]) * float(W[i][j])
        for i in range(H):
            acc += float(h[i]) * float(U[i][j])
        z.append(acc)
    h_new, c_new = [], []
    for u in range(H):
        ig, fg, og = _sig(z[u]), _sig(z[H + u]), _sig(z[2 * H + u])
        g = math.tanh(z[3 * H + u])
        cu = fg * float(c[u]) + ig * g
        c_new.append(cu)
        h_new.append(og * math.tanh(cu))
    return h_new, c_new


def affine(x, W, b):
    return [float(b[j]) + sum(float(x[i]) * float(W[i][j]) for i in range(len(x))) for j in range(len(b))]


def encode(enc, window, h0=None, c0=None, static_rep=None):
    """Returns (per-step hidden list, final h, final c) for one window."""
    H = len(enc["b"]) // 4
    h = list(h0) if h0 is not None else [0.0] * H
    c = list(c0) if c0 is not None else [0.0] * H
    outs = []
    for row in window:
        x = list(row) + (list(static_rep) if static_rep is not None else [])
        h, c = cell(enc["W"], enc["U"], enc["b"], x, h, c)
        outs.append(h)
    return outs, h, c


def forecast(dec, h, c, horizon):
    out = []
    for k in range(horizon):
        y = affine(h, dec["W_out"], dec["b_out"])[0]
        out.append(y)
        if k + 1 < horizon:
            h, c = cell(dec["W"], dec["U"], dec["b"], [y], h, c)
    return out


def values(ps):
    """ParameterSet -> dict of nested Python lists."""
    return {k: t.values.tolist() for k, t in ps.items()}
