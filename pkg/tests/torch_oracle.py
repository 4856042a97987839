"""Straight-line float64 torch transcriptions of self-adaptive inference and
training, written step by step without reusing any package code."""

import torch

torch.set_default_dtype(torch.float64)


def _t(a, grad=False):
    return torch.tensor(a, dtype=torch.float64, requires_grad=grad)


def params(ps, grad=True):
    return {k: _t(t.values.copy(), grad) for k, t in ps.items()}


def lstm(p, xs, h, c):
    """xs: (B, m, k); returns per-step hidden (B, m, H) and final (h, c)."""
    H = p["U"].shape[0]
    outs = []
    for t in range(xs.shape[1]):
        z = xs[:, t] @ p["W"] + h @ p["U"] + p["b"]
        i = torch.sigmoid(z[:, :H])
        f = torch.sigmoid(z[:, H:2 * H])
        o = torch.sigmoid(z[:, 2 * H:3 * H])
        g = torch.tanh(z[:, 3 * H:])
        c = f * c + i * g
        h = o * torch.tanh(c)
        outs.append(h)
    return torch.stack(outs, 1), h, c


def encoder(p, xs, static_p=None, static=None):
    B, H = xs.shape[0], p["U"].shape[0]
    h = torch.zeros(B, H)
    c = torch.zeros(B, H)
    if static_p is not None:
        h = torch.tanh(static @ static_p["W"] + static_p["b"])
    return lstm(p, xs, h, c)


def forecaster(p, h, c, horizon):
    ys = []
    for k in range(horizon):
        y = h @ p["W_out"] + p["b_out"]
        ys.append(y)
        if k + 1 < horizon:
            _, h, c = lstm(p, y[:, None, :], h, c)
    return torch.cat(ys, dim=1)


def mse(a, b):
    return ((a - b) ** 2).mean()


def infer_one(bundle, x, n, alpha, static=None):
    """Forecast for a single window ``x`` (m, d) with additive static merge."""
    x = _t(x)[None]
    sp = params(bundle.static, grad=False) if bundle.static is not None else None
    s = _t(static)[None] if static is not None else None
    enc = params(bundle.encoder)
    dec_b = params(bundle.backcast)
    dec_f = params(bundle.forecast, grad=False)
    # tile the first unmasked row over the masked rows
    theta = x.clone()
    theta[:, :n] = x[:, n:n + 1]
    # encode with a zero error block, backcast, take one gradient step
    r, _, _ = encoder(enc, torch.cat([theta, torch.zeros_like(x)], -1), sp, s)
    b = r @ dec_b["W"] + dec_b["b"]
    loss = mse(b, x)
    grads = torch.autograd.grad(loss, list(enc.values()) + list(dec_b.values()))
    ge, gb = grads[:len(enc)], grads[len(enc):]
    enc2 = {k: (v - alpha * g).detach() for (k, v), g in zip(enc.items(), ge)}
    dec_b2 = {k: (v - alpha * g).detach() for (k, v), g in zip(dec_b.items(), gb)}
    # backcast again from the same representation with the adapted decoder
    b2 = r.detach() @ dec_b2["W"] + dec_b2["b"]
    e = x - b2
    _, h, c = encoder(enc2, torch.cat([x, e], -1), sp, s)
    return forecaster(dec_f, h, c, bundle.dims.horizon)[0].detach().numpy()


def train_one(bundle, x, y, n, alpha, gamma, static=None):
    """One training iteration on a batch; returns (new param dicts, loss)."""
    x = _t(x)
    y = _t(y)
    s = _t(static) if static is not None else None
    enc = params(bundle.encoder)
    dec_b = params(bundle.backcast)
    dec_f = params(bundle.forecast)
    sp = params(bundle.static) if bundle.static is not None else None
    theta = x.clone()
    theta[:, :n] = x[:, n:n + 1]
    r, _, _ = encoder(enc, torch.cat([theta, torch.zeros_like(x)], -1), sp, s)
    b = r @ dec_b["W"] + dec_b["b"]
    lb = mse(b, x)
    grads = torch.autograd.grad(lb, list(enc.values()) + list(dec_b.values()))
    enc = {k: (v - alpha * g).detach().requires_grad_() for (k, v), g in zip(enc.items(), grads[:len(enc)])}
    dec_b = {k: (v - alpha * g).detach() for (k, v), g in zip(dec_b.items(), grads[len(enc):])}
    e = (x - (r.detach() @ dec_b["W"] + dec_b["b"])).detach()
    _, h, c = encoder(enc, torch.cat([x, e], -1), sp, s)
    lf = mse(forecaster(dec_f, h, c, y.shape[1]), y)
    groups = [enc, dec_f] + ([sp] if sp is not None else [])
    flat = [v for g in groups for v in g.values()]
    gr = iter(torch.autograd.grad(lf, flat))
    out = {}
    for name, g in zip(["encoder", "forecast-decoder", "static-net"], groups):
        out[name] = {k: (v - gamma * next(gr)).detach().numpy() for k, v in g.items()}
    out["backcast-decoder"] = {k: v.numpy() for k, v in dec_b.items()}
    return out, lf.item()
