"""Self-adaptive inference and the matching training step.

Inference (per window ``x`` of ``m`` rows, first ``n`` masked):

1. fill the masked rows with the first unmasked row;
2. encode the filled window with an all-zero error block;
3. backcast the whole window;
4-5. one (or ``adapt_steps``) gradient step(s) of rate ``alpha`` on copies of
   the encoder and backcast decoder;
6. backcast again with the adapted decoder from the step-2 representation;
7. errors ``e = x - b``;
8. re-encode the original window with ``e`` appended, using the adapted encoder;
9. forecast with the (unadapted) forecast decoder.

Training runs the same sequence on a batch but updates the shared weights in
place, then takes a forecast-loss step of rate ``gamma``. The forecast step
does not differentiate through the self-adaptation update.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .model import EncodedState, ModelBundle, decode_backcast, decode_forecast, encode
from .params import ParameterSet, sgd_step
from .tensor import NumericOverflowError, Tape, Tensor

LOSSES = ("mse", "mae")
ABLATIONS = ("no-decoder-update", "no-encoder-update", "no-error-signal")


class ConfigError(ValueError):
    pass


class BatchShapeError(ValueError):
    pass


class AdaptationDivergedError(FloatingPointError):
    def __init__(self, alpha: float, detail: str = ""):
        self.alpha = alpha
        super().__init__(f"self-adaptation diverged at alpha={alpha}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class SafConfig:
    window: int
    horizon: int
    alpha: float = 1e-4
    gamma: float = 1e-3
    mask: int | None = None
    adapt_steps: int = 1
    use_error_signal: bool = True
    masked_only_loss: bool = False
    loss: str = "mse"
    merge_mode: str = "additive"
    update_encoder: bool = True
    update_decoder: bool = True

    def __post_init__(self):
        if self.mask is None:
            object.__setattr__(self, "mask", self.window // 2)
        if self.window < 2:
            raise ConfigError("window must be at least 2")
        if not 0 < self.mask < self.window:
            raise ConfigError(f"mask length must satisfy 0 < n < m, got n={self.mask}, m={self.window}")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.adapt_steps < 1:
            raise ConfigError("adapt_steps must be at least 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")

    def replace(self, **changes) -> "SafConfig":
        return dataclasses.replace(self, **changes)


def ablation_variant(kind: str, config: SafConfig) -> SafConfig:
    """``config`` with one self-adaptation ingredient switched off."""
    if kind == "no-decoder-update":
        return config.replace(update_decoder=False)
    if kind == "no-encoder-update":
        return config.replace(update_encoder=False)
    if kind == "no-error-signal":
        return config.replace(use_error_signal=False)
    raise ConfigError(f"unknown ablation {kind!r}; expected one of {ABLATIONS}")


class MaskedWindow(NamedTuple):
    filled: np.ndarray
    original: np.ndarray


class AdaptationOutcome(NamedTuple):
    encoder: ParameterSet
    backcast_decoder: ParameterSet
    backcasts: np.ndarray
    errors: np.ndarray
    pre_loss: np.ndarray | float
    post_loss: np.ndarray | float | None


def mask_and_tile(window: np.ndarray, n: int) -> MaskedWindow:
    """Replace the first ``n`` rows with copies of row ``n`` (rows are axis -2)."""
    x = np.asarray(window, dtype=np.float64)
    m = x.shape[-2]
    if not 0 < n < m:
        raise ConfigError(f"mask length must satisfy 0 < n < m, got n={n}, m={m}")
    filled = x.copy()
    filled[..., :n, :] = x[..., n:n + 1, :]
    return MaskedWindow(filled, x)


def _loss(kind: str, pred: Tensor, target, per_sample: bool) -> Tensor:
    diff = T.sub(pred, target if isinstance(target, Tensor) else Tensor(target))
    err = T.mul(diff, diff) if kind == "mse" else T.absolute(diff)
    if per_sample:
        axes = tuple(range(1, err.ndim))
        return T.tsum(T.mean(err, axis=axes))
    return T.mean(err)


def backcast_loss(config: SafConfig, backcasts: Tensor, window, per_sample: bool = False) -> Tensor:
    target = np.asarray(window, dtype=np.float64)
    if config.masked_only_loss:
        n = config.mask
        return _loss(config.loss, backcasts[:, :n, :], target[:, :n, :], per_sample)
    return _loss(config.loss, backcasts, target, per_sample)


def forecast_loss(config: SafConfig, forecasts: Tensor, targets) -> Tensor:
    return _loss(config.loss, forecasts, np.asarray(targets, dtype=np.float64), per_sample=False)


def _batch3(window) -> tuple[np.ndarray, bool]:
    x = np.asarray(window, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise BatchShapeError(f"expected (m, d) or (B, m, d) windows, got shape {x.shape}")
    return x, False


def _static2(static, batch: int):
    if static is None:
        return None
    s = np.asarray(static, dtype=np.float64)
    if s.ndim == 1:
        s = np.broadcast_to(s, (batch, s.shape[0]))
    return s


def _check_dims(bundle: ModelBundle, config: SafConfig, x: np.ndarray) -> None:
    d = bundle.dims
    if not d.error_channel:
        raise ConfigError("self-adaptive forecasting needs a model built with an error channel")
    if x.shape[1] != config.window or d.window != config.window:
        raise BatchShapeError(f"window length {x.shape[1]} does not match config m={config.window}")
    if x.shape[2] != d.n_features:
        raise BatchShapeError(f"window has {x.shape[2]} features, model expects {d.n_features}")
    if d.horizon != config.horizon:
        raise ConfigError(f"model horizon {d.horizon} != config horizon {config.horizon}")


def _readout(bundle: ModelBundle, hidden: np.ndarray) -> np.ndarray:
    return decode_backcast(bundle, EncodedState(Tensor(hidden), None, None)).values


def _self_adapt(bundle: ModelBundle, config: SafConfig, x: np.ndarray, static,
                per_sample: bool, post_loss: bool = False):
    """Steps 1-7, updating ``bundle.encoder``/``bundle.backcast`` in place.

    Returns (backcasts, errors, pre_loss, post_loss).
    """
    zeros = np.zeros_like(x)
    masked_in = np.concatenate([mask_and_tile(x, config.mask).filled, zeros], axis=-1)
    enc, bc = bundle.encoder, bundle.backcast
    targets: list[ParameterSet] = []
    if config.update_encoder:
        targets.append(enc)
    if config.update_decoder:
        targets.append(bc)
    pre = None
    try:
        for _ in range(config.adapt_steps):
            with Tape() as tape:
                state = encode(bundle, masked_in, static)
                b = decode_backcast(bundle, state)
                loss = backcast_loss(config, b, x, per_sample)
            if pre is None:
                pre = _per_sample_losses(config, b.values, x) if per_sample else loss.item()
            if not np.isfinite(loss.values).all():
                raise AdaptationDivergedError(config.alpha, "non-finite backcast loss")
            if targets and config.alpha:
                tape.backward(loss, wrt=[t for ps in targets for t in ps.tensors()])
                for ps in targets:
                    sgd_step(ps, config.alpha)
            hidden = state.hidden.values
        b_new = _readout(bundle, hidden)
        post = None
        if post_loss:
            b_post = decode_backcast(bundle, encode(bundle, masked_in, static)).values
            post = _per_sample_losses(config, b_post, x) if per_sample else float(
                backcast_loss(config, Tensor(b_post), x).item())
    except NumericOverflowError as exc:
        raise AdaptationDivergedError(config.alpha, str(exc)) from exc
    if not np.isfinite(b_new).all():
        raise AdaptationDivergedError(config.alpha, "non-finite backcasts")
    return b_new, x - b_new, pre, post


def _per_sample_losses(config: SafConfig, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    if config.masked_only_loss:
        b, x = b[:, :config.mask], x[:, :config.mask]
    d = b - x
    err = d * d if config.loss == "mse" else np.abs(d)
    return err.reshape(err.shape[0], -1).mean(axis=1)


def _squeeze(ps: ParameterSet) -> ParameterSet:
    return ParameterSet(ps.role, {k: t.values[0].copy() for k, t in ps.items()})


def _per_sample_bundle(bundle: ModelBundle, batch: int) -> ModelBundle:
    return bundle.replace(encoder=bundle.encoder.tile(batch), backcast=bundle.backcast.tile(batch))


def self_adapt(bundle: ModelBundle, config: SafConfig, window, static=None) -> AdaptationOutcome:
    """Test-time adaptation of one window (m, d) or a batch of windows (B, m, d).

    Each window gets its own copy of the encoder and backcast decoder; the
    bundle itself is never modified. For a batch, the returned parameter sets
    carry a leading per-window axis and the losses are per-window arrays.
    """
    x, single = _batch3(window)
    _check_dims(bundle, config, x)
    static = _static2(static, x.shape[0])
    work = _per_sample_bundle(bundle, x.shape[0])
    with np.errstate(over="ignore"):
        b, e, pre, post = _self_adapt(work, config, x, static, per_sample=True, post_loss=True)
    if not np.isfinite(post).all():
        raise AdaptationDivergedError(config.alpha, "non-finite backcast loss after adaptation")
    if single:
        return AdaptationOutcome(_squeeze(work.encoder), _squeeze(work.backcast),
                                 b[0], e[0], float(pre[0]), float(post[0]))
    return AdaptationOutcome(work.encoder, work.backcast, b, e, pre, post)


def infer(bundle: ModelBundle, config: SafConfig, window, static=None) -> np.ndarray:
    """Forecasts (h,) for one window or (B, h) for a batch; pure in ``bundle``."""
    x, single = _batch3(window)
    _check_dims(bundle, config, x)
    static = _static2(static, x.shape[0])
    work = _per_sample_bundle(bundle, x.shape[0])
    _, e, _, _ = _self_adapt(work, config, x, static, per_sample=True)
    if not config.use_error_signal:
        e = np.zeros_like(e)
    try:
        state = encode(work, np.concatenate([x, e], axis=-1), static)
        y = decode_forecast(bundle.replace(encoder=work.encoder), state).values
    except NumericOverflowError as exc:
        raise AdaptationDivergedError(config.alpha, str(exc)) from exc
    return y[0] if single else y


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    static: np.ndarray | None = None


def as_batch(batch) -> Batch:
    if isinstance(batch, Batch):
        return batch
    samples = list(batch)
    if not samples:
        raise BatchShapeError("empty batch")
    shapes = {np.shape(s.x) for s in samples}
    if len(shapes) != 1:
        raise BatchShapeError(f"mixed window shapes in batch: {sorted(shapes)}")
    hs = {np.shape(s.y) for s in samples}
    if len(hs) != 1:
        raise BatchShapeError(f"mixed target shapes in batch: {sorted(hs)}")
    x = np.stack([s.x for s in samples])
    y = np.stack([s.y for s in samples])
    static = None
    if samples[0].static is not None and np.size(samples[0].static):
        static = np.stack([s.static for s in samples])
    return Batch(x, y, static)


def _forecast_update(sets: Sequence[ParameterSet], rate: float, optimizer) -> None:
    if optimizer is None:
        for ps in sets:
            sgd_step(ps, rate)
    else:
        optimizer.step(sets)


def train_step(bundle: ModelBundle, config: SafConfig, batch, optimizer=None,
               backcast_optimizer=None) -> float:
    """One in-place training iteration; returns the batch forecast loss.

    The loss reported is the one the forecast gradient was taken of, i.e.
    after the self-adaptation update and before the forecast update.
    ``optimizer``/``backcast_optimizer`` replace the plain gradient steps of
    rate ``gamma``/``alpha`` when given.
    """
    x, y, static = as_batch(batch)
    _check_dims(bundle, config, x)
    if y.shape[1:] != (config.horizon,):
        raise BatchShapeError(f"targets must be (B, {config.horizon}), got {y.shape}")
    masked_in = np.concatenate([mask_and_tile(x, config.mask).filled, np.zeros_like(x)], axis=-1)
    targets = []
    if config.update_encoder:
        targets.append(bundle.encoder)
    if config.update_decoder:
        targets.append(bundle.backcast)

    with Tape() as tape:
        state = encode(bundle, masked_in, static)
        b = decode_backcast(bundle, state)
        lb = backcast_loss(config, b, x)
    if targets and (config.alpha or backcast_optimizer is not None):
        tape.backward(lb, wrt=[t for ps in targets for t in ps.tensors()])
        if backcast_optimizer is None:
            for ps in targets:
                sgd_step(ps, config.alpha)
        else:
            backcast_optimizer.step(targets)

    e = x - _readout(bundle, state.hidden.values)
    if not config.use_error_signal:
        e = np.zeros_like(e)
    sets = [bundle.encoder, bundle.forecast] + ([bundle.static] if bundle.static is not None else [])
    with Tape() as tape:
        st = encode(bundle, np.concatenate([x, e], axis=-1), static)
        lf = forecast_loss(config, decode_forecast(bundle, st), y)
    tape.backward(lf, wrt=[t for ps in sets for t in ps.tensors()])
    _forecast_update(sets, config.gamma, optimizer)
    return lf.item()


def baseline_train_step(bundle: ModelBundle, config: SafConfig, batch, optimizer=None) -> float:
    """Plain supervised step: encode, forecast, descend on the forecast loss."""
    x, y, static = as_batch(batch)
    _check_baseline(bundle, config, x)
    sets = [bundle.encoder, bundle.forecast] + ([bundle.static] if bundle.static is not None else [])
    with Tape() as tape:
        st = encode(bundle, x, static)
        lf = forecast_loss(config, decode_forecast(bundle, st), y)
    tape.backward(lf, wrt=[t for ps in sets for t in ps.tensors()])
    _forecast_update(sets, config.gamma, optimizer)
    return lf.item()


def baseline_infer(bundle: ModelBundle, config: SafConfig, window, static=None) -> np.ndarray:
    x, single = _batch3(window)
    _check_baseline(bundle, config, x)
    static = _static2(static, x.shape[0])
    y = decode_forecast(bundle, encode(bundle, x, static)).values
    return y[0] if single else y


def _check_baseline(bundle: ModelBundle, config: SafConfig, x: np.ndarray) -> None:
    d = bundle.dims
    if d.error_channel:
        raise ConfigError("baseline expects a model without an error channel")
    if x.shape[1] != config.window or d.window != config.window:
        raise BatchShapeError(f"window length {x.shape[1]} does not match config m={config.window}")
    if x.shape[2] != d.n_features:
        raise BatchShapeError(f"window has {x.shape[2]} features, model expects {d.n_features}")
