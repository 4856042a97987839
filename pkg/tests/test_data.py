import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saf import data as D
from saf import resource_path


# -- generators -----------------------------------------------------------------------

def test_ar4_noise_free_recursion():
    y = D.generate_ar(D.ArProcessSpec("ar4", 5, noise_std=0.0, initial=1.0))
    np.testing.assert_array_equal(y, [1, -0.5, 0.25, -0.125, 0.0625])


def test_ar2_coefficient_zero_at_1500():
    spec = D.ArProcessSpec("ar2", 1600, seed=3)
    assert D.ar_coefficients(spec)[1500] == 0.0
    y = D.generate_ar(spec)
    rng = D.make_rng(3)
    eps = rng.normal(0.0, 1.0, size=1600) * 0.03
    assert y[1500] == -eps[1500]


def test_ar1_coefficient_lookup():
    a = D.ar_coefficients(D.ArProcessSpec("ar1", 3000))
    assert (a[999], a[1000], a[2000], a[2001]) == (0.9, -0.9, -0.9, 0.9)


def test_ar_starts_at_zero_and_subtracts_noise():
    spec = D.ArProcessSpec("ar4", 50, seed=9)
    y = D.generate_ar(spec)
    assert y[0] == 0.0
    eps = D.make_rng(9).normal(0.0, 1.0, size=50) * 0.03
    np.testing.assert_array_equal(y[1:], -0.5 * y[:-1] - eps[1:])


def test_ar3_states_and_initial_branch():
    a = D.ar_coefficients(D.ArProcessSpec("ar3", 20000, seed=1), D.make_rng(1))
    assert a[0] == 0.9
    assert set(np.unique(a)) <= {0.9, -0.5}
    assert len(np.unique(a)) == 2


def test_generators_deterministic():
    for v in D.AR_VARIANTS:
        spec = D.ArProcessSpec(v, 500, seed=42)
        assert np.array_equal(D.generate_ar(spec), D.generate_ar(spec))
    assert not np.array_equal(D.generate_ar(D.ArProcessSpec("ar3", 500, seed=1)),
                              D.generate_ar(D.ArProcessSpec("ar3", 500, seed=2)))


def test_spec_validation():
    with pytest.raises(D.DataError, match="duration ≥ 2"):
        D.ArProcessSpec("ar4", 1)
    with pytest.raises(D.DataError):
        D.ArProcessSpec("ar5", 10)
    with pytest.raises(D.DataError):
        D.ArProcessSpec("ar4", 10, noise_std=-1)


def test_ar4_stationary_variance():
    y = D.generate_ar(D.ArProcessSpec("ar4", 100_000, seed=0))
    expect = 0.03 ** 2 / (1 - 0.25)
    assert abs(y.var() / expect - 1) < 0.10


def test_transition_probability_examples():
    assert D.ar3_transition_prob(0) == 0.0
    assert math.isclose(D.ar3_transition_prob(1), 5.0e-5, rel_tol=1e-9)


def test_transition_sampler_monte_carlo():
    p = 1 - 0.99995 ** 100
    moves = D.sample_ar3_moves(100, 1_000_000, D.make_rng(123))
    se = math.sqrt(p * (1 - p) / 1_000_000)
    assert abs(moves.mean() - p) <= 3 * se


# -- splits and windows ----------------------------------------------------------------

def series(T, n_ent=1):
    return D.PanelDataset([f"e{i}" for i in range(n_ent)], [np.arange(T)] * n_ent,
                          [np.arange(T, dtype=float)[:, None] + 1000 * i for i in range(n_ent)], ["y"], "y")


def test_split_examples():
    b = D.SplitSpec(100, 100).boundaries(300)
    assert b == {"train": (0, 100), "validation": (100, 200), "test": (200, 300)}
    assert D.SplitSpec(100, 100).boundaries(1000)["train"] == (0, 800)
    with pytest.raises(D.SplitError):
        D.SplitSpec(0, 100)
    with pytest.raises(D.SplitError):
        D.SplitSpec(100, 100).boundaries(200)


def test_window_counting():
    view = D.split(series(16), D.SplitSpec(3, 3))["train"]
    assert len(view) == 10
    w = D.make_windows(view, 4, 2)
    assert len(w) == 5 and [s.anchor for s in w] == [3, 4, 5, 6, 7]
    exact = D.split(series(12), D.SplitSpec(3, 3))["train"]
    assert len(D.make_windows(exact, 4, 2)) == 1


def test_short_view_gives_empty_collection(caplog):
    view = D.split(series(10), D.SplitSpec(3, 3))["train"]
    assert D.make_windows(view, 4, 2) == []
    assert "too short" in caplog.text


def test_evaluation_views_read_earlier_context():
    views = D.split(series(1000), D.SplitSpec(100, 100))
    w = D.make_windows(views["test"], 30, 5)
    assert len(w) == 96
    assert w[0].y[0] == 900 and w[0].x[-1, 0] == 899


@settings(max_examples=40, deadline=None)
@given(st.integers(40, 120), st.integers(2, 10), st.integers(1, 5), st.integers(1, 3))
def test_windows_never_leak(T, m, h, n_ent):
    ds = series(T, n_ent)
    spec = D.SplitSpec(10, 10)
    bounds = spec.boundaries(T)
    for name, view in D.split(ds, spec).items():
        lo, hi = bounds[name]
        for s in D.make_windows(view, m, h):
            t_in = s.x[:, 0] - 1000 * int(s.entity[1:])
            t_out = s.y - 1000 * int(s.entity[1:])
            assert t_in.max() < t_out.min()
            assert lo <= t_out.min() and t_out.max() < hi
            if name == "train":
                assert t_in.min() >= 0 and t_in.max() < hi


# -- normalization --------------------------------------------------------------------

def test_zscore_example():
    ds = D.PanelDataset(["a"], [np.arange(5)], [np.array([[1.0], [2.0], [3.0], [9.0], [9.0]])], ["y"], "y")
    view = D.split(ds, D.SplitSpec(1, 1))["train"]
    out, stats = D.normalize(ds, "global", view)
    np.testing.assert_allclose(out.values[0][:3, 0], [-1.2247448713915890, 0, 1.2247448713915890], atol=1e-12)
    assert stats.scale[0] == pytest.approx(math.sqrt(2 / 3))


def test_constant_feature_warns():
    ds = D.PanelDataset(["a"], [np.arange(6)], [np.full((6, 1), 4.0)], ["y"], "y")
    out, stats = D.normalize(ds, "global", D.split(ds, D.SplitSpec(1, 1))["train"])
    np.testing.assert_array_equal(out.values[0], 0.0)
    assert stats.warnings and "zero variance" in stats.warnings[0]


def test_normalize_roundtrip_and_modes():
    rng = np.random.default_rng(0)
    ds = D.PanelDataset(["a", "b"], [np.arange(50)] * 2,
                        [rng.normal(3, 2, (50, 2)), rng.normal(-1, 0.5, (50, 2))], ["y", "x"], "y",
                        static=rng.standard_normal((2, 3)), static_names=["s1", "s2", "s3"])
    view = D.split(ds, D.SplitSpec(10, 10))["train"]
    for mode in ("global", "per-entity"):
        out, stats = D.normalize(ds, mode, view)
        back = D.invert_normalizer(out, stats)
        for a, b in zip(back.values, ds.values):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
        np.testing.assert_allclose(back.static, ds.static, rtol=0, atol=1e-12)
    per = D.fit_normalizer(view, "per-entity")
    assert per.mean.shape == (2, 2)
    np.testing.assert_allclose(D.apply_normalizer(ds, per).values[1][:30].mean(axis=0), 0, atol=1e-12)


class TrackedRows(np.ndarray):
    """Array that logs every row index it is read at."""

    def __new__(cls, values, log):
        obj = np.asarray(values).view(cls)
        obj.log = log
        return obj

    def __array_finalize__(self, obj):
        self.log = getattr(obj, "log", None)

    def __getitem__(self, idx):
        rows = idx[0] if isinstance(idx, tuple) else idx
        self.log.extend(range(len(self))[rows] if isinstance(rows, slice) else np.atleast_1d(rows).tolist())
        return np.asarray(self)[idx]

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        self.log.extend(range(len(self)))
        return getattr(ufunc, method)(*(np.asarray(i) for i in inputs), **kwargs)

    def __array_function__(self, func, types, args, kwargs):
        self.log.extend(range(len(self)))
        plain = tuple(np.asarray(a) if isinstance(a, TrackedRows) else a for a in args)
        return func(*plain, **kwargs)


def test_normalizer_reads_training_rows_only():
    reads: list[int] = []
    rng = np.random.default_rng(1)
    values = [TrackedRows(rng.standard_normal((300, 2)), reads) for _ in range(2)]
    ds = D.PanelDataset.__new__(D.PanelDataset)
    ds.__dict__.update(entities=["a", "b"], times=[np.arange(300)] * 2, values=values,
                       feature_names=["y", "x"], target="y", static=np.zeros((2, 0)),
                       static_names=[], frequency="step")
    view = D.PanelView(ds, "train", 0, 100, 0)
    for mode in ("global", "per-entity"):
        D.fit_normalizer(view, mode)
    assert reads and max(reads) < 100


def test_normalizer_ignores_poisoned_evaluation_rows():
    clean = series(300, 2)
    poisoned = series(300, 2)
    for v in poisoned.values:
        v[200:] = np.nan
    for mode in ("global", "per-entity"):
        a = D.fit_normalizer(D.split(clean, D.SplitSpec(100, 100))["train"], mode)
        b = D.fit_normalizer(D.split(poisoned, D.SplitSpec(100, 100))["train"], mode)
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.scale, b.scale)


# -- CSV ------------------------------------------------------------------------------

SCHEMA = {"target": "y", "features": ["y", "x"]}


def write(tmp_path, text, name="panel.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_toy_file(tmp_path):
    p = write(tmp_path, "entity_id,timestamp,y,x\nb,0,1,2\na,0,3,4\na,1,5,6\nb,1,7,8\na,2,9,1\nb,2,2,3\n")
    ds = D.load_csv(p, schema=SCHEMA)
    assert ds.entities == ["a", "b"]
    assert [v.shape for v in ds.values] == [(3, 2), (3, 2)]
    np.testing.assert_array_equal(ds.values[0][:, 0], [3, 5, 9])


def test_out_of_order_timestamp_names_line(tmp_path):
    p = write(tmp_path, "entity_id,timestamp,y,x\na,0,1,2\na,2,1,2\na,1,1,2\n")
    with pytest.raises(D.ParseError, match=r"panel\.csv:4:"):
        D.load_csv(p, schema=SCHEMA)


def test_parse_errors(tmp_path):
    bad = {
        "entity_id,timestamp,y,q\na,0,1,2\n": r"csv:1:",
        "entity_id,timestamp,y,x\na,0,1\n": r"csv:2:",
        "entity_id,timestamp,y,x\na,0,1,oops\n": r"csv:2:",
        "entity_id,timestamp,y,x\na,x,1,2\n": r"csv:2:",
        "entity_id,timestamp,y,x\na,0,1,\n": "missing value",
    }
    for text, match in bad.items():
        with pytest.raises(D.ParseError, match=match):
            D.load_csv(write(tmp_path, text), schema=SCHEMA)


def test_forward_fill(tmp_path):
    p = write(tmp_path, "entity_id,timestamp,y,x\na,0,1,2\na,1,,5\n")
    ds = D.load_csv(p, schema=SCHEMA, forward_fill=True)
    np.testing.assert_array_equal(ds.values[0], [[1, 2], [1, 5]])


def test_static_file_errors(tmp_path):
    p = write(tmp_path, "entity_id,timestamp,y,x\na,0,1,2\n")
    s = write(tmp_path, "entity_id,s\nz,1\n", "static.csv")
    with pytest.raises(D.ParseError, match="unknown entity"):
        D.load_csv(p, s, schema=SCHEMA)


def test_roundtrip_is_identity(tmp_path):
    src = D.load_csv(resource_path("toy_panel.csv"), resource_path("toy_static.csv"))
    D.save_csv(src, tmp_path / "p.csv", tmp_path / "s.csv")
    back = D.load_csv(tmp_path / "p.csv", tmp_path / "s.csv")
    assert back.entities == src.entities and back.feature_names == src.feature_names
    assert back.static_names == src.static_names and np.array_equal(back.static, src.static)
    for a, b in zip(back.values, src.values):
        assert np.array_equal(a, b)
    assert (tmp_path / "p.csv").read_text() == open(resource_path("toy_panel.csv")).read()


def test_bundled_toy_panel_shape():
    ds = D.load_csv(resource_path("toy_panel.csv"), resource_path("toy_static.csv"))
    assert ds.entities == ["north", "south"] and ds.n_static == 2 and ds.target == "load"
