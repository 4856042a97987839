"""Recurrent encoder with backcast and forecast decoders.

Layout conventions
------------------
* Everything is batch-first: windows are ``(B, m, features)``.
* Gate blocks inside every recurrent weight matrix are ordered
  ``[input, forget, output, candidate]``, each ``hidden`` columns wide.
* A parameter tensor with one extra leading axis of size ``B`` holds one
  independent copy per batch element; all forward functions accept either
  form, which lets per-window test-time adaptation run as one batch.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .params import ParameterSet, load_parameters, save_parameters
from .tensor import ShapeError, Tensor

MERGE_MODES = ("additive", "concatenation")


class WindowLengthError(ShapeError):
    pass


@dataclass(frozen=True)
class ModelDims:
    n_features: int
    hidden: int
    horizon: int
    window: int
    n_static: int = 0
    target_index: int = 0
    error_channel: bool = True
    merge_mode: str = "additive"

    def __post_init__(self):
        for name in ("n_features", "hidden", "horizon", "window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_static < 0:
            raise ValueError("n_static must be non-negative")
        if not 0 <= self.target_index < self.n_features:
            raise ValueError("target_index out of range")
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"merge_mode must be one of {MERGE_MODES}")

    @property
    def encoder_input(self) -> int:
        """Width of the encoder's per-timestep input (covariates, errors, static)."""
        width = self.n_features * (2 if self.error_channel else 1)
        if self.n_static and self.merge_mode == "concatenation":
            width += self.hidden
        return width


class EncodedState(NamedTuple):
    hidden: Tensor   # (B, m, hidden) per-timestep outputs
    h: Tensor        # (B, hidden) final hidden state
    c: Tensor        # (B, hidden) final cell state


@dataclass
class ModelBundle:
    dims: ModelDims
    encoder: ParameterSet
    forecast: ParameterSet
    backcast: ParameterSet | None = None
    static: ParameterSet | None = None
    seed: int | None = None

    def __post_init__(self):
        d = self.dims
        _check_cell(self.encoder, d.encoder_input, d.hidden)
        _check_cell(self.forecast, 1, d.hidden)
        if self.forecast["W_out"].shape[-2:] != (d.hidden, 1):
            raise ShapeError("bundle", self.forecast["W_out"].shape, (d.hidden, 1))
        if d.error_channel and self.backcast is None:
            raise ValueError("an error-channel model needs a backcast decoder")
        if self.backcast is not None and self.backcast["W"].shape[-2:] != (d.hidden, d.n_features):
            raise ShapeError("bundle", self.backcast["W"].shape, (d.hidden, d.n_features),
                             detail="backcast decoder must emit every covariate")
        if (self.static is None) != (d.n_static == 0):
            raise ValueError("static net present iff n_static > 0")
        if self.static is not None and self.static["W"].shape[-1] != d.hidden:
            raise ShapeError("bundle", self.static["W"].shape, (d.n_static, d.hidden),
                             detail="static representation must match hidden size")

    def param_sets(self) -> list[ParameterSet]:
        return [ps for ps in (self.encoder, self.backcast, self.forecast, self.static) if ps is not None]

    def replace(self, **changes) -> "ModelBundle":
        return dataclasses.replace(self, **changes)

    def clone(self) -> "ModelBundle":
        return dataclasses.replace(
            self,
            encoder=self.encoder.clone(),
            forecast=self.forecast.clone(),
            backcast=self.backcast.clone() if self.backcast is not None else None,
            static=self.static.clone() if self.static is not None else None,
        )

    def digest(self) -> str:
        return "".join(ps.digest() for ps in self.param_sets())

    def equals(self, other: "ModelBundle") -> bool:
        mine, theirs = self.param_sets(), other.param_sets()
        return (self.dims == other.dims and len(mine) == len(theirs)
                and all(a.equals(b) for a, b in zip(mine, theirs)))

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        meta = {**(extra or {}), "dims": dataclasses.asdict(self.dims), "seed": self.seed}
        save_parameters(path, self.param_sets(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "ModelBundle":
        sets, meta = load_parameters(path)
        return cls(
            dims=ModelDims(**meta["dims"]),
            encoder=sets["encoder"],
            forecast=sets["forecast-decoder"],
            backcast=sets.get("backcast-decoder"),
            static=sets.get("static-net"),
            seed=meta.get("seed"),
        )


def _check_cell(ps: ParameterSet, n_in: int, hidden: int) -> None:
    expect = {"W": (n_in, 4 * hidden), "U": (hidden, 4 * hidden), "b": (4 * hidden,)}
    for name, shape in expect.items():
        got = ps[name].shape
        if got[-len(shape):] != shape:
            raise ShapeError(f"{ps.role}/{name}", got, shape)


# -- initialization -----------------------------------------------------------

def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def _cell_params(role: str, rng, n_in: int, hidden: int) -> ParameterSet:
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    return ParameterSet(role, {
        "W": _glorot(rng, n_in, 4 * hidden),
        "U": _glorot(rng, hidden, 4 * hidden),
        "b": b,
    })


def init_params(dims: ModelDims, seed: int) -> ModelBundle:
    """Glorot-uniform weights, zero biases except forget-gate bias 1."""
    rng = np.random.Generator(np.random.Philox(seed))
    h = dims.hidden
    encoder = _cell_params("encoder", rng, dims.encoder_input, h)
    backcast = None
    if dims.error_channel:
        backcast = ParameterSet("backcast-decoder", {
            "W": _glorot(rng, h, dims.n_features),
            "b": np.zeros(dims.n_features),
        })
    forecast = _cell_params("forecast-decoder", rng, 1, h)
    forecast.add("W_out", _glorot(rng, h, 1))
    forecast.add("b_out", np.zeros(1))
    static = None
    if dims.n_static:
        static = ParameterSet("static-net", {
            "W": _glorot(rng, dims.n_static, h),
            "b": np.zeros(h),
        })
    return ModelBundle(dims, encoder, forecast, backcast, static, seed=seed)


# -- fused recurrent layer ----------------------------------------------------

def _vecmat(x, M):
    """(B, k) times shared (k, n) or per-sample (B, k, n)."""
    if M.ndim == 2:
        return x @ M
    return np.matmul(x[:, None, :], M)[:, 0]


def lstm_sequence(x: Tensor, W: Tensor, U: Tensor, b: Tensor, h0: Tensor, c0: Tensor,
                  static: Tensor | None = None) -> Tensor:
    """Run the gated recurrence over ``x`` (B, m, k) as one taped operation.

    ``static`` (B, s), when given, is appended to every timestep's input, so
    ``W`` has ``k + s`` rows. Returns (B, m, 2*hidden): hidden output then
    cell state at each step.
    """
    xv, Wv, Uv, bv = x.values, W.values, U.values, b.values
    per = Wv.ndim == 3
    B, m, k = xv.shape
    hid = Uv.shape[-2]
    n_in = k + (static.shape[-1] if static is not None else 0)
    if Wv.shape[-2:] != (n_in, 4 * hid) or Uv.shape[-2:] != (hid, 4 * hid) or bv.shape[-1] != 4 * hid:
        raise ShapeError("lstm", x.shape, W.shape, U.shape, b.shape)
    if h0.shape != (B, hid) or c0.shape != (B, hid):
        raise ShapeError("lstm", h0.shape, c0.shape, (B, hid))
    Wx = Wv[..., :k, :]
    xz = np.matmul(xv, Wx)
    base = bv if bv.ndim == 2 else np.broadcast_to(bv, (B, 4 * hid))
    if static is not None:
        Ws = Wv[..., k:, :]
        base = base + _vecmat(static.values, Ws)

    h, c = h0.values, c0.values
    out = np.empty((B, m, 2 * hid))
    gates = np.empty((B, m, 4 * hid))
    c_prev = np.empty((B, m, hid))
    # sigmoid(v) = 0.5 * (1 + tanh(v / 2)): one tanh call covers all four gates
    scale = np.full(4 * hid, 0.5)
    scale[3 * hid:] = 1.0
    for t in range(m):
        z = xz[:, t] + base + _vecmat(h, Uv)
        act = gates[:, t]
        np.tanh(z * scale, out=act)
        act[:, :3 * hid] += 1.0
        act[:, :3 * hid] *= 0.5
        c_prev[:, t] = c
        c = act[:, hid:2 * hid] * c + act[:, :hid] * act[:, 3 * hid:]
        out[:, t, hid:] = c
        h = act[:, 2 * hid:3 * hid] * np.tanh(c)
        out[:, t, :hid] = h
    h_prev = np.concatenate([h0.values[:, None], out[:, :-1, :hid]], axis=1)

    def backward(gout):
        dH, dC = gout[..., :hid], gout[..., hid:]
        i, f, o, g = (gates[..., j * hid:(j + 1) * hid] for j in range(4))
        tc = np.tanh(out[..., hid:])
        # local derivatives for every step at once; the loop only carries dh, dc
        dc_from_h = o * (1.0 - tc * tc)
        local = np.concatenate([g * i * (1.0 - i), c_prev * f * (1.0 - f),
                                tc * o * (1.0 - o), i * (1.0 - g * g)], axis=-1)
        dz = np.empty((B, m, 4 * hid))
        dh_next = np.zeros((B, hid))
        dc_next = np.zeros((B, hid))
        UT = Uv.T if not per else Uv.transpose(0, 2, 1)
        for t in range(m - 1, -1, -1):
            dh = dH[:, t] + dh_next
            dc = dC[:, t] + dc_next + dh * dc_from_h[:, t]
            d = dz[:, t]
            np.multiply(np.concatenate([dc, dc, dh, dc], axis=1), local[:, t], out=d)
            dc_next = dc * f[:, t]
            dh_next = _vecmat(d, UT)
        dbase = dz.sum(axis=1)
        if per:
            dWx = np.matmul(xv.transpose(0, 2, 1), dz)
            dU = np.matmul(h_prev.transpose(0, 2, 1), dz)
            db = dbase
            dx = np.matmul(dz, Wx.transpose(0, 2, 1))
        else:
            dWx = xv.reshape(-1, k).T @ dz.reshape(-1, 4 * hid)
            dU = h_prev.reshape(-1, hid).T @ dz.reshape(-1, 4 * hid)
            db = dbase.sum(axis=0) if bv.ndim == 1 else dbase
            dx = dz @ Wx.T
        grads = [dx, None, dU, db, dh_next, dc_next]
        if static is not None:
            sv = static.values
            if per:
                dWs = np.einsum("bs,bn->bsn", sv, dbase)
                grads.append(np.einsum("bn,bsn->bs", dbase, Ws))
            else:
                dWs = sv.T @ dbase
                grads.append(dbase @ Ws.T)
            grads[1] = np.concatenate([dWx, dWs], axis=-2)
        else:
            grads[1] = dWx
        return grads

    parents = [x, W, U, b, h0, c0] + ([static] if static is not None else [])
    return T.record("lstm", out, parents, backward)


# -- building blocks on primitive ops -----------------------------------------

def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` for shared or per-sample ``W``/``b``."""
    if W.ndim == 2:
        y = T.matmul(x, W)
        return y if b is None else T.add(y, b)
    B, n = W.shape[0], W.shape[-1]
    flat = x.ndim == 2
    if flat:
        x = T.reshape(x, (B, 1, x.shape[-1]))
    y = T.matmul(x, W)
    if b is not None:
        y = T.add(y, T.reshape(b, (B, 1, n)))
    return T.reshape(y, (B, n)) if flat else y


def cell_step(params: ParameterSet, x_t, state: tuple) -> tuple[Tensor, Tensor]:
    """One gated-recurrence step from primitive ops.

    ``x_t`` is (k,) or (B, k); ``state`` is ``(h, c)`` of matching rank.
    """
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    h, c = (s if isinstance(s, Tensor) else Tensor(s) for s in state)
    W, U, b = params["W"], params["U"], params["b"]
    hid = U.shape[-2]
    if x_t.shape[-1] != W.shape[-2] or h.shape[-1] != hid or c.shape != h.shape:
        raise ShapeError("cell_step", x_t.shape, W.shape, h.shape, c.shape)
    single = x_t.ndim == 1
    if single:
        x_t, h, c = (T.reshape(v, (1, v.shape[0])) for v in (x_t, h, c))
    z = T.add(affine(x_t, W, b), affine(h, U))
    i = T.sigmoid(z[:, :hid])
    f = T.sigmoid(z[:, hid:2 * hid])
    o = T.sigmoid(z[:, 2 * hid:3 * hid])
    g = T.tanh(z[:, 3 * hid:])
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    if single:
        h_new, c_new = T.reshape(h_new, (hid,)), T.reshape(c_new, (hid,))
    return h_new, c_new


def static_representation(bundle: ModelBundle, static) -> Tensor | None:
    if bundle.static is None:
        return None
    if static is None:
        raise ValueError("model expects static features")
    s = static if isinstance(static, Tensor) else Tensor(static)
    if s.ndim == 1:
        s = T.reshape(s, (1, s.shape[0]))
    return T.tanh(affine(s, bundle.static["W"], bundle.static["b"]))


def encode(bundle: ModelBundle, window, static=None) -> EncodedState:
    """Run the encoder over ``window`` (B, m, encoder_input); the error block
    is already part of the input."""
    x = window if isinstance(window, Tensor) else Tensor(window)
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    d = bundle.dims
    if x.shape[1] != d.window:
        raise WindowLengthError("encode", x.shape, (x.shape[0], d.window, d.encoder_input),
                                detail=f"window must have {d.window} rows")
    B = x.shape[0]
    h0 = Tensor(np.zeros((B, d.hidden)))
    c0 = Tensor(np.zeros((B, d.hidden)))
    rep = static_representation(bundle, static)
    concat_static = None
    if rep is not None:
        if rep.shape[0] != B:
            raise ShapeError("encode", rep.shape, (B, d.hidden), detail="static batch mismatch")
        if d.merge_mode == "additive":
            h0 = rep
        else:
            concat_static = rep
    enc = bundle.encoder
    hc = lstm_sequence(x, enc["W"], enc["U"], enc["b"], h0, c0, static=concat_static)
    hid = d.hidden
    return EncodedState(hc[:, :, :hid], hc[:, -1, :hid], hc[:, -1, hid:])


def decode_backcast(bundle: ModelBundle, state: EncodedState) -> Tensor:
    """Per-timestep affine readout of the encoder outputs: (B, m, n_features)."""
    if bundle.backcast is None:
        raise ValueError("model has no backcast decoder")
    return affine(state.hidden, bundle.backcast["W"], bundle.backcast["b"])


def decode_forecast(bundle: ModelBundle, state: EncodedState) -> Tensor:
    """Recurrent rollout seeded by the final encoder state: (B, horizon).

    Step k reads out the current hidden state, then feeds that forecast back
    as the next recurrent input.
    """
    dec = bundle.forecast
    hid = bundle.dims.hidden
    h, c = state.h, state.c
    B = h.shape[0]
    outs = []
    for k in range(bundle.dims.horizon):
        y = affine(h, dec["W_out"], dec["b_out"])
        outs.append(y)
        if k + 1 < bundle.dims.horizon:
            hc = lstm_sequence(T.reshape(y, (B, 1, 1)), dec["W"], dec["U"], dec["b"], h, c)
            h, c = hc[:, 0, :hid], hc[:, 0, hid:]
    return T.concat(outs, axis=-1) if len(outs) > 1 else outs[0]
