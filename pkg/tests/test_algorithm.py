import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saf.algorithm import (
    AdaptationDivergedError,
    Batch,
    BatchShapeError,
    ConfigError,
    SafConfig,
    ablation_variant,
    baseline_infer,
    baseline_train_step,
    infer,
    mask_and_tile,
    self_adapt,
    train_step,
)
from saf.data import WindowSample
from saf.model import ModelDims, decode_forecast, encode, init_params

import torch_oracle as TO


def tiny(n_static=0, seed=7):
    """2 units, m=4, n=2, h=2, one covariate."""
    b = init_params(ModelDims(1, 2, 2, 4, n_static=n_static), seed)
    rng = np.random.default_rng(seed)
    # non-zero biases so every parameter matters
    for ps in b.param_sets():
        for name, t in ps.items():
            if name.startswith("b"):
                t.values[...] = rng.normal(0, 0.3, t.shape)
    return b


def cfg(**kw):
    base = dict(window=4, horizon=2, mask=2, alpha=0.3, gamma=0.05)
    base.update(kw)
    return SafConfig(**base)


WINDOW = np.array([[0.3], [-0.8], [1.1], [0.4]])


# -- config and masking -------------------------------------------------------------

def test_config_defaults_and_invariants():
    c = SafConfig(window=30, horizon=5)
    assert c.mask == 15 and c.adapt_steps == 1 and c.loss == "mse"
    for bad in (dict(mask=0), dict(mask=30), dict(alpha=-1.0), dict(gamma=0.0), dict(adapt_steps=0),
                dict(loss="huber")):
        with pytest.raises(ConfigError):
            SafConfig(window=30, horizon=5, **bad)


def test_mask_and_tile_examples():
    x = np.arange(1.0, 7.0)[:, None]
    np.testing.assert_array_equal(mask_and_tile(x, 3).filled[:, 0], [4, 4, 4, 4, 5, 6])
    np.testing.assert_array_equal(mask_and_tile(x, 1).filled[:, 0], [2, 2, 3, 4, 5, 6])
    const = np.full((5, 2), 3.5)
    np.testing.assert_array_equal(mask_and_tile(const, 2).filled, const)
    with pytest.raises(ConfigError):
        mask_and_tile(x, 6)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 20), st.integers(1, 4), st.data())
def test_mask_invariants(m, d, data):
    n = data.draw(st.integers(1, m - 1))
    x = np.random.default_rng(data.draw(st.integers(0, 10**6))).standard_normal((m, d))
    mw = mask_and_tile(x, n)
    assert np.array_equal(mw.filled[:n], np.repeat(x[n:n + 1], n, axis=0))
    assert np.array_equal(mw.filled[n:], x[n:])
    assert np.array_equal(mw.original, x)


# -- self-adaptation ---------------------------------------------------------------

def test_zero_alpha_is_identity():
    b = tiny()
    out = self_adapt(b, cfg(alpha=0.0), WINDOW)
    assert out.encoder.equals(b.encoder) and out.backcast_decoder.equals(b.backcast)
    assert out.post_loss == out.pre_loss


def test_originals_untouched_and_error_identity():
    b = tiny()
    before = b.digest()
    out = self_adapt(b, cfg(), WINDOW)
    assert b.digest() == before
    assert not out.encoder.equals(b.encoder)
    assert np.array_equal(out.errors, WINDOW - out.backcasts)
    # e + b reconstructs x up to one rounding of the subtraction
    np.testing.assert_allclose(out.errors + out.backcasts, WINDOW, rtol=0, atol=4 * np.finfo(float).eps)


def test_perfect_backcast_gives_zero_error():
    b = tiny()
    b.backcast["W"].values[...] = 0.0
    b.backcast["b"].values[...] = 0.25
    out = self_adapt(b, cfg(), np.full((4, 1), 0.25))
    np.testing.assert_array_equal(out.errors, 0.0)


def test_batched_adaptation_equals_one_window_at_a_time():
    b = tiny()
    xs = np.random.default_rng(0).standard_normal((5, 4, 1))
    batch = infer(b, cfg(), xs)
    for i in range(5):
        np.testing.assert_allclose(batch[i], infer(b, cfg(), xs[i]), rtol=0, atol=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_alpha_reported():
    b = tiny()
    with pytest.raises(AdaptationDivergedError) as err:
        self_adapt(b, cfg(alpha=1e300), WINDOW * 1e3)
    assert err.value.alpha == 1e300
    with pytest.raises(AdaptationDivergedError):
        infer(b, cfg(alpha=1e306), WINDOW * 1e3)


# -- inference ------------------------------------------------------------------------

def test_infer_matches_torch_transcription():
    for seed in range(5):
        b = tiny(seed=seed)
        x = np.random.default_rng(seed).standard_normal((4, 1))
        np.testing.assert_allclose(infer(b, cfg(), x), TO.infer_one(b, x, 2, 0.3), rtol=0, atol=1e-12)


def test_infer_with_static_matches_torch_transcription():
    b = tiny(n_static=3)
    s = np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(infer(b, cfg(), WINDOW, s), TO.infer_one(b, WINDOW, 2, 0.3, s),
                               rtol=0, atol=1e-12)


def test_infer_is_pure():
    b = tiny()
    before = b.digest()
    first = infer(b, cfg(), WINDOW)
    for _ in range(20):
        assert np.array_equal(infer(b, cfg(), WINDOW), first)
    assert b.digest() == before


def test_zero_alpha_no_error_signal_is_zero_error_channel_model():
    b = tiny()
    got = infer(b, cfg(alpha=0.0, use_error_signal=False), WINDOW)
    expect = decode_forecast(b, encode(b, np.concatenate([WINDOW, np.zeros_like(WINDOW)], -1))).values[0]
    np.testing.assert_array_equal(got, expect)


def test_forecast_decoder_not_adapted():
    b = tiny()
    out = self_adapt(b, cfg(), WINDOW)
    x_in = np.concatenate([WINDOW, out.errors], -1)
    expect = decode_forecast(b, encode(b.replace(encoder=out.encoder), x_in)).values[0]
    np.testing.assert_allclose(infer(b, cfg(), WINDOW), expect, rtol=0, atol=1e-15)


# -- ablations ----------------------------------------------------------------------

def test_no_encoder_update_keeps_encoder():
    b = tiny()
    out = self_adapt(b, ablation_variant("no-encoder-update", cfg(alpha=5.0)), WINDOW)
    assert out.encoder.equals(b.encoder)
    assert not out.backcast_decoder.equals(b.backcast)


def test_no_decoder_update_keeps_decoder():
    b = tiny()
    out = self_adapt(b, ablation_variant("no-decoder-update", cfg()), WINDOW)
    assert out.backcast_decoder.equals(b.backcast)
    assert not out.encoder.equals(b.encoder)


def test_no_error_signal_feeds_zero_block():
    b = tiny()
    c = ablation_variant("no-error-signal", cfg())
    out = self_adapt(b, c, WINDOW)
    x_in = np.concatenate([WINDOW, np.zeros_like(WINDOW)], -1)
    expect = decode_forecast(b, encode(b.replace(encoder=out.encoder), x_in)).values[0]
    np.testing.assert_array_equal(infer(b, c, WINDOW), expect)


def test_ablations_give_distinct_forecasts():
    b = tiny()
    outs = [infer(b, cfg(), WINDOW)]
    for kind in ("no-decoder-update", "no-encoder-update", "no-error-signal"):
        outs.append(infer(b, ablation_variant(kind, cfg()), WINDOW))
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.array_equal(outs[i], outs[j])


def test_unknown_ablation():
    with pytest.raises(ConfigError):
        ablation_variant("no-forecast", cfg())


# -- training -------------------------------------------------------------------------

def _batch(seed, B=3, n_static=0):
    rng = np.random.default_rng(seed)
    return Batch(rng.standard_normal((B, 4, 1)), rng.standard_normal((B, 2)),
                 rng.standard_normal((B, n_static)) if n_static else None)


@pytest.mark.parametrize("n_static", [0, 2])
def test_train_step_matches_torch_transcription(n_static):
    b = tiny(n_static=n_static)
    batch = _batch(1, n_static=n_static)
    expect, expect_loss = TO.train_one(b, batch.x, batch.y, 2, 0.3, 0.05, batch.static)
    loss = train_step(b, cfg(), batch)
    assert abs(loss - expect_loss) <= 1e-12
    for ps in b.param_sets():
        for name, t in ps.items():
            np.testing.assert_allclose(t.values, expect[ps.role][name], rtol=0, atol=1e-12)


def test_single_sample_batch_matches_transcription():
    b = tiny()
    x, y = WINDOW, np.array([0.2, -0.1])
    expect, _ = TO.train_one(b, x[None], y[None], 2, 0.3, 0.05)
    train_step(b, cfg(), [WindowSample(x, None, y, "e", 0)])
    np.testing.assert_allclose(b.encoder["W"].values, expect["encoder"]["W"], rtol=0, atol=1e-12)


def test_train_step_updates_every_role_in_place():
    b = tiny()
    before = b.clone()
    train_step(b, cfg(), _batch(2))
    assert not b.encoder.equals(before.encoder)
    assert not b.backcast.equals(before.backcast)
    assert not b.forecast.equals(before.forecast)


def test_zero_alpha_training_leaves_backcast_decoder():
    b = tiny()
    before = b.backcast.clone()
    train_step(b, cfg(alpha=0.0), _batch(2))
    assert b.backcast.equals(before)


def test_training_loss_decreases():
    b = init_params(ModelDims(1, 4, 2, 4), 3)
    batch = _batch(5, B=16)
    c = cfg(alpha=1e-3, gamma=1e-3)
    losses = [train_step(b, c, batch) for _ in range(50)]
    assert losses[-1] < losses[0]
    assert all(b_ <= a_ + 1e-12 for a_, b_ in zip(losses, losses[1:]))


def test_mixed_window_lengths_rejected():
    samples = [WindowSample(np.zeros((4, 1)), None, np.zeros(2), "a", 0),
               WindowSample(np.zeros((5, 1)), None, np.zeros(2), "a", 1)]
    with pytest.raises(BatchShapeError):
        train_step(tiny(), cfg(), samples)


# -- baseline ---------------------------------------------------------------------------

def base_model():
    return init_params(ModelDims(1, 2, 2, 4, error_channel=False), 7)


def test_baseline_structure_differs_from_saf():
    b, s = base_model(), tiny()
    assert b.encoder["W"].shape == (1, 8)
    assert s.encoder["W"].shape == (2, 8)
    assert b.backcast is None
    with pytest.raises(ConfigError):
        infer(b, cfg(), WINDOW)
    with pytest.raises(ConfigError):
        baseline_infer(s, cfg(), WINDOW)


def test_baseline_pure_and_trains():
    b = base_model()
    before = b.digest()
    first = baseline_infer(b, cfg(), WINDOW)
    assert np.array_equal(baseline_infer(b, cfg(), WINDOW), first)
    assert b.digest() == before
    baseline_train_step(b, cfg(), _batch(0))
    assert b.digest() != before
