import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles as O
from ditcod import metrics as M
from ditcod.tensor import ShapeError


def all_4x4_masks(start=0, stop=1 << 16):
    codes = np.arange(start, stop)
    return ((codes[:, None] >> np.arange(16)) & 1).astype(bool).reshape(-1, 4, 4)


def fixed_predictions(n=50, seed=1234):
    """Random maps; every fifth one is quantised to 8 bits so ties occur."""
    S = np.random.default_rng(seed).random((n, 4, 4))
    S[::5] = np.round(S[::5] * 255) / 255
    return S


def exhaustive_errors(chunk=1024):
    """Largest |package - oracle| per metric over all 2^16 binary 4x4 masks
    times the fixed prediction set."""
    S = fixed_predictions()
    conv = O.gaussian_conv_matrix(4, 4)
    worst = dict.fromkeys(M.METRIC_NAMES, 0.0)
    for start in range(0, 1 << 16, chunk):
        G = all_4x4_masks(start, start + chunk)
        d2, idx = O.nearest_foreground_bruteforce(G)
        ours = {
            "S_alpha": M.s_measure(S, G[:, None]),
            "E_phi": M.e_measure_mean(S, G[:, None]),
            "F_w_beta": M.weighted_f(S, G[:, None]),
            "MAE": M.mae(S, G[:, None]),
        }
        ref = {k: np.empty((len(G), len(S))) for k in ours}
        ref["E_phi"] = O.e_measure_many(S, G)
        for i, g in enumerate(G):
            ref["S_alpha"][i] = O.s_measure(S, g)
            ref["F_w_beta"][i] = O.weighted_f(S, g, idx[i], d2[i], conv)
            ref["MAE"][i] = O.mae(S, g)
        for k in ours:
            worst[k] = max(worst[k], float(np.abs(ours[k] - ref[k]).max()))
    return worst


@pytest.fixture(scope="module")
def exhaustive():
    return exhaustive_errors()


@pytest.mark.slow
@pytest.mark.parametrize("name", M.METRIC_NAMES)
def test_exhaustive_4x4_against_oracle(exhaustive, name):
    assert exhaustive[name] < 1e-9


def random_mask(rng, shape, p=None):
    while True:
        g = rng.random(shape) < (rng.uniform(0.1, 0.9) if p is None else p)
        if 0 < g.sum() < g.size:
            return g


@pytest.mark.parametrize("size", [5, 8, 13, 32])
def test_random_maps_against_oracle(size):
    rng = np.random.default_rng(size)
    conv = O.gaussian_conv_matrix(size, size)
    for _ in range(10):
        g = random_mask(rng, (size, size))
        S = rng.random((4, size, size))
        S[1] = np.round(S[1] * 4) / 4
        d2, idx = O.nearest_foreground_bruteforce(g[None])
        assert np.allclose(M.s_measure(S, g), O.s_measure(S, g), atol=1e-9, rtol=0)
        assert np.allclose(M.e_measure_mean(S, g), O.e_measure(S, g), atol=1e-9, rtol=0)
        assert np.allclose(M.weighted_f(S, g), O.weighted_f(S, g, idx[0], d2[0], conv), atol=1e-9, rtol=0)
        assert np.allclose(M.mae(S, g), O.mae(S, g), atol=1e-12, rtol=0)


def test_identities_on_perfect_prediction():
    rng = np.random.default_rng(0)
    for size in (4, 8, 64):
        for _ in range(5):
            g = random_mask(rng, (size, size))
            s = g.astype(float)
            assert abs(M.s_measure(s, g) - 1) < 1e-6
            assert abs(M.e_measure_mean(s, g) - 1) < 1e-6
            assert abs(M.weighted_f(s, g) - 1) < 1e-6
            assert M.mae(s, g) == 0


def test_mae_examples():
    g = random_mask(np.random.default_rng(1), (8, 8))
    assert M.mae(1.0 - g, g) == 1.0
    assert M.mae(np.full((8, 8), 0.25), np.zeros((8, 8))) == 0.25


def test_s_measure_degenerate_masks():
    z = np.zeros((6, 6))
    assert M.s_measure(z, z) == 1.0
    S = np.random.default_rng(2).random((6, 6))
    assert M.s_measure(S, z) == pytest.approx(1 - S.mean(), abs=1e-15)
    assert M.s_measure(S, np.ones((6, 6))) == pytest.approx(S.mean(), abs=1e-15)


def test_s_measure_left_half_case():
    g = np.zeros((8, 8), dtype=bool)
    g[:, :4] = True
    S = 0.8 * g
    ref = O.s_measure(S[None], g)[0]
    assert M.s_measure(S, g) == pytest.approx(ref, abs=1e-12)
    assert 0 < ref < 1


def test_e_measure_anti_aligned_is_zero():
    g = random_mask(np.random.default_rng(3), (8, 8))
    assert M.e_measure_mean(1.0 - g, g) < 1e-12


def test_e_measure_degenerate_masks():
    z = np.zeros((5, 5))
    assert M.e_measure_mean(z, z) == 1.0
    assert M.e_measure_mean(np.ones((5, 5)), np.ones((5, 5))) == 1.0
    assert M.e_measure_mean(np.ones((5, 5)), z) == 0.0


def test_weighted_f_zero_prediction_interior_mask():
    g = np.zeros((16, 16), dtype=bool)
    g[5:11, 4:12] = True
    assert M.weighted_f(np.zeros((16, 16)), g) < 1e-6


def test_weighted_f_empty_mask_scores_zero():
    assert M.weighted_f(np.random.default_rng(0).random((6, 6)), np.zeros((6, 6))) == 0.0


def test_weighted_f_8x8_case():
    rng = np.random.default_rng(4)
    g = random_mask(rng, (8, 8), 0.4)
    S = rng.random((1, 8, 8))
    d2, idx = O.nearest_foreground_bruteforce(g[None])
    ref = O.weighted_f(S, g, idx[0], d2[0], O.gaussian_conv_matrix(8, 8))[0]
    assert M.weighted_f(S[0], g) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_weighted_f_monotone_under_flips(seed):
    rng = np.random.default_rng(seed)
    g = random_mask(rng, (12, 12), 0.35)
    order = rng.permutation(g.size)
    s = g.astype(float).ravel()
    prev = M.weighted_f(s.reshape(12, 12), g)
    for k in range(1, 9):
        s[order[k - 1]] = 1.0 - s[order[k - 1]]
        cur = M.weighted_f(s.reshape(12, 12), g)
        assert cur <= prev + 1e-12
        prev = cur


def test_nearest_foreground_matches_bruteforce():
    rng = np.random.default_rng(5)
    G = np.stack([rng.random((9, 11)) < p for p in (0.05, 0.1, 0.3, 0.6)] + [np.eye(9, 11, dtype=bool)])
    d2, idx = O.nearest_foreground_bruteforce(G)
    dist, index = M.nearest_foreground(G)
    assert np.array_equal(index.reshape(len(G), -1), idx)
    assert np.allclose(dist.reshape(len(G), -1) ** 2, d2, atol=1e-9)


def test_pr_curve_perfect_prediction():
    g = random_mask(np.random.default_rng(6), (8, 8))
    t, p, r = M.pr_curve(g.astype(float), g)
    assert len(t) == 256 and np.all(np.diff(t) > 0) and t[-1] < 1
    assert np.all(p == 1) and np.all(r == 1)


def test_pr_curve_uniform_half():
    g = np.zeros((8, 8), dtype=bool)
    g[:4] = True
    t, p, r = M.pr_curve(np.full((8, 8), 0.5), g)
    low, high = t <= 0.5, t > 0.5
    assert np.all(r[low] == 1) and np.all(p[low] == 0.5)
    assert np.all(r[high] == 0) and np.all(p[high] == 1)


def test_pr_curve_against_counting():
    rng = np.random.default_rng(7)
    g = random_mask(rng, (7, 7))
    s = rng.random((7, 7))
    t, p, r = M.pr_curve(s, g)
    for k in range(0, 256, 17):
        assert (p[k], r[k]) == pytest.approx(O.pr_point(s, g, t[k]), abs=1e-15)


def test_batched_equals_per_image():
    rng = np.random.default_rng(8)
    G = np.stack([random_mask(rng, (6, 6)) for _ in range(3)])
    S = rng.random((3, 6, 6))
    for fn in (M.s_measure, M.e_measure_mean, M.weighted_f, M.mae):
        batched = fn(S, G)
        assert batched.shape == (3,)
        assert np.allclose(batched, [fn(S[i], G[i]) for i in range(3)], atol=1e-15, rtol=0)


mask_st = arrays(np.bool_, (6, 6))
pred_st = arrays(np.float64, (6, 6), elements=st.floats(0, 1))


@settings(max_examples=60, deadline=None)
@given(pred_st, mask_st)
def test_all_metrics_in_unit_interval(s, g):
    for fn in (M.s_measure, M.e_measure_mean, M.weighted_f, M.mae):
        v = fn(s, g)
        assert 0.0 <= v <= 1.0 + 1e-12


@settings(max_examples=60, deadline=None)
@given(mask_st, mask_st)
def test_mae_symmetric_and_zero_iff_equal(a, b):
    assert M.mae(a.astype(float), b) == M.mae(b.astype(float), a)
    assert (M.mae(a.astype(float), b) == 0) == bool(np.array_equal(a, b))


def test_input_validation():
    with pytest.raises(ShapeError):
        M.mae(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        M.s_measure(np.zeros((4, 4)), np.full((4, 4), 0.5))
    with pytest.raises(ValueError):
        M.weighted_f(np.full((4, 4), 1.5), np.zeros((4, 4)))


def test_report_files(tmp_path):
    g = np.zeros((4, 4), dtype=bool)
    g[1:3, 1:3] = True
    reports = [M.evaluate(g.astype(float), g, "a"), M.evaluate(np.zeros((1, 4, 4)), g[None], "b")]
    report = M.aggregate(reports)
    M.emit(report, str(tmp_path))
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "id,S_alpha,E_phi,F_w_beta,MAE"
    assert lines[1] == "a,1.000000,1.000000,1.000000,0.000000"
    assert lines[2].startswith("b,") and lines[-1].startswith("MEAN,")
    assert len(lines) == 4
    mean_mae = float(lines[-1].split(",")[-1])
    assert mean_mae == pytest.approx(0.125)
    pr = (tmp_path / "pr.csv").read_text().splitlines()
    assert pr[0] == "threshold,precision,recall" and len(pr) == 257
    assert pr[1] == "0.001953,1.000000,0.500000"
    svg = (tmp_path / "pr.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") == 1
    assert len(svg.split('points="')[1].split('"')[0].split()) == 256
