import math

import numpy as np
import pytest
import torch
from scipy import stats

from mvconsist import diffcore as dc
from mvconsist.corresploss import (
    KeypointSet,
    LossConfig,
    QueryCorrespondence,
    TieError,
    exact_ap_oracle,
    frame_pair_loss,
    l3dc_batch,
    l3dc_query,
    mine_correspondences,
    sample_keypoints,
    sigma_tau,
    sobel_edge_map,
)
from mvconsist.geometry import PointMap


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


def query_loss_oracle(fa, fb, c, tau):
    """Direct transcription of the per-query smooth-AP loss with scalar loops."""
    hq = fa[c.query]
    pos = {"q": hq, "p": fb[c.positive]}
    negs = [fb[j] for j in c.negatives]
    total = 0.0
    for i, hi in pos.items():
        si = float(hq @ hi)
        num = 1.0 + sum(1 / (1 + math.exp(-(float(hq @ hj) - si) / tau)) for j, hj in pos.items() if j != i)
        den = num + sum(1 / (1 + math.exp(-(float(hq @ hj) - si) / tau)) for hj in negs)
        total += num / den
    return 1.0 - total / 2


def random_case(rng, dim=16, kb=12, n_neg=6):
    fa = rng.normal(size=(4, dim))
    fb = rng.normal(size=(kb, dim))
    fa /= np.linalg.norm(fa, axis=1, keepdims=True)
    fb /= np.linalg.norm(fb, axis=1, keepdims=True)
    negs = np.sort(rng.choice(np.arange(1, kb), size=n_neg, replace=False))
    return fa, fb, QueryCorrespondence(int(rng.integers(4)), 0, negs, 0.0)


# ------------------------------------------------------------------ sobel


def test_sobel_constant_and_step():
    assert np.all(sobel_edge_map(np.full((8, 8), 0.3)) == 0)
    step = np.zeros((8, 8))
    step[:, 4:] = 1.0
    mag = sobel_edge_map(step)
    np.testing.assert_allclose(mag[2:-2, 3], 4.0)
    np.testing.assert_allclose(mag[2:-2, 4], 4.0)
    np.testing.assert_allclose(sobel_edge_map(step + 5.0), mag, atol=1e-12)


def test_sobel_uses_luma():
    img = np.zeros((6, 6, 3))
    img[:, 3:, 1] = 1.0  # green step
    np.testing.assert_allclose(sobel_edge_map(img)[2, 2], 4 * 0.587)


# --------------------------------------------------------------- sampling


def _pm(h, w, valid=None):
    coords = np.zeros((h, w, 3), np.float32)
    return PointMap(coords, np.ones((h, w), bool) if valid is None else valid)


def test_uniform_sampling_chi_square():
    valid = np.ones((8, 8), bool)
    valid[:, :2] = False
    pm = _pm(8, 8, valid)
    counts = np.zeros(64)
    for s in range(2500):
        kp = sample_keypoints(np.zeros((8, 8, 3)), pm, 40, 0.0, s)
        np.add.at(counts, kp.pixels[:, 1] * 8 + kp.pixels[:, 0], 1)
    assert counts[~valid.ravel()].sum() == 0
    obs = counts[valid.ravel()]
    assert obs.sum() == 100_000
    assert stats.chisquare(obs).pvalue > 0.01


def test_edge_sampling_on_checker():
    v, u = np.mgrid[0:32, 0:32]
    img = (((u // 4) + (v // 4)) % 2).astype(float)
    kp = sample_keypoints(img, _pm(32, 32), 64, 1.0, 0)
    mags = sobel_edge_map(img)
    thresh = np.quantile(mags.ravel(), 0.75)
    assert np.all(mags[kp.pixels[:, 1], kp.pixels[:, 0]] >= thresh)
    flat = kp.pixels[:, 1] * 32 + kp.pixels[:, 0]
    assert len(np.unique(flat)) == 64


def test_sampling_deterministic_and_errors():
    pm = _pm(8, 8)
    img = np.random.default_rng(0).random((8, 8, 3))
    a = sample_keypoints(img, pm, 20, 0.7, 5)
    b = sample_keypoints(img, pm, 20, 0.7, 5)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    with pytest.raises(ValueError):
        sample_keypoints(np.zeros((8, 8, 3)), pm, 65, 0.5, 0)


# ----------------------------------------------------------------- mining


def kps(points):
    points = np.asarray(points, dtype=np.float64)
    return KeypointSet(np.zeros((len(points), 2), int), points, np.ones(len(points), bool))


def test_mining_identical_sets():
    pts = np.random.default_rng(0).uniform(size=(30, 3))
    out = mine_correspondences(kps(pts), kps(pts), LossConfig(), 0)
    assert len(out) == 30
    assert all(c.d_pos == 0 and c.positive == c.query for c in out)


def test_mining_far_sets_empty():
    pts = np.random.default_rng(0).uniform(size=(30, 3))
    assert mine_correspondences(kps(pts), kps(pts + 1.0), LossConfig(), 0) == []


def test_mining_matches_double_loop():
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 0.3, size=(200, 3))
    b = a + rng.normal(scale=0.004, size=a.shape)
    cfg = LossConfig(max_negatives=10_000)
    out = {c.query: c for c in mine_correspondences(kps(a), kps(b), cfg, 0)}
    for i in range(200):
        d = [math.dist(a[i], b[j]) for j in range(200)]
        j_best = int(np.argmin(d))
        kept = d[j_best] <= cfg.t_pos
        assert (i in out) == kept
        if kept:
            assert out[i].positive == j_best
            assert list(out[i].negatives) == [j for j in range(200) if d[j] > cfg.t_neg]
            assert j_best not in out[i].negatives


def test_mining_caps_negatives():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(100, 3))
    out = mine_correspondences(kps(a), kps(a), LossConfig(max_negatives=5), 1)
    assert all(len(c.negatives) <= 5 for c in out)
    again = mine_correspondences(kps(a), kps(a), LossConfig(max_negatives=5), 1)
    assert all(np.array_equal(x.negatives, y.negatives) for x, y in zip(out, again))


# ------------------------------------------------------------------- loss


def test_sigma_tau_values():
    assert sigma_tau(0.0, 0.3) == 0.5
    assert sigma_tau(-1.0, 0.01) < 1e-40
    assert sigma_tau(0.01, 0.01) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-6)
    assert float(sigma_tau(t64(0.01), 0.01)) == pytest.approx(0.731059, abs=1e-6)


def test_hand_derived_values():
    c = QueryCorrespondence(0, 0, np.array([1]), 0.0)
    empty = QueryCorrespondence(0, 0, np.array([], dtype=int), 0.0)
    fa = t64([[1.0, 0.0]])
    assert float(l3dc_query(fa, t64([[0.3, 0.9], [1.0, 0.0]]), empty, 0.01)) == 0.0
    assert float(l3dc_query(fa, t64([[1.0, 0.0], [0.0, 1.0]]), c, 0.01)) < 1e-12
    assert float(l3dc_query(fa, t64([[0.0, 1.0], [1.0, 0.0]]), c, 0.01)) == pytest.approx(1 / 3, abs=1e-6)


def test_exact_ap_oracle():
    assert exact_ap_oracle([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert exact_ap_oracle([1.0, 0.0], [0.5]) == pytest.approx(5 / 6)
    with pytest.raises(TieError):
        exact_ap_oracle([1.0, 0.5], [0.5])


def test_loss_matches_scalar_oracle(rng):
    for _ in range(20):
        fa, fb, c = random_case(rng)
        got = float(l3dc_query(t64(fa), t64(fb), c, 0.05))
        assert got == pytest.approx(query_loss_oracle(fa, fb, c, 0.05), abs=1e-12)
        assert 0.0 <= got <= 1.0


def test_batch_is_mean_of_queries(rng):
    fa = rng.normal(size=(10, 8))
    fb = rng.normal(size=(20, 8))
    fa /= np.linalg.norm(fa, axis=1, keepdims=True)
    fb /= np.linalg.norm(fb, axis=1, keepdims=True)
    corrs = [
        QueryCorrespondence(i, int(rng.integers(20)), np.sort(rng.choice(20, size=int(rng.integers(0, 7)), replace=False)), 0.0)
        for i in range(8)
    ]
    corrs = [QueryCorrespondence(c.query, c.positive, c.negatives[c.negatives != c.positive], 0.0) for c in corrs]
    res = l3dc_batch(t64(fa), t64(fb), corrs, 0.1)
    assert res.n_queries == 8
    oracle = np.mean([query_loss_oracle(fa, fb, c, 0.1) for c in corrs])
    assert abs(float(res.value) - oracle) < 1e-7
    assert float(l3dc_batch(t64(fa), t64(fb), corrs[:1], 0.1).value) == pytest.approx(float(l3dc_query(t64(fa), t64(fb), corrs[0], 0.1)))
    assert float(l3dc_batch(t64(fa), t64(fb), corrs + corrs, 0.1).value) == pytest.approx(float(res.value), abs=1e-15)


def test_batch_without_queries():
    res = l3dc_batch(t64(np.ones((2, 3))), t64(np.ones((2, 3))), [], 0.01)
    assert res.no_queries and float(res.value) == 0.0


def test_negative_monotonicity(rng):
    for _ in range(30):
        fa, fb, c = random_case(rng, dim=4)
        base = float(l3dc_query(t64(fa), t64(fb), c, 0.05))
        j = int(c.negatives[0])
        hq = fa[c.query]
        # rotate negative j away from the query
        away = fb[j] - 0.3 * hq
        fb2 = fb.copy()
        fb2[j] = away / np.linalg.norm(away)
        if fb2[j] @ hq < fb[j] @ hq:
            assert float(l3dc_query(t64(fa), t64(fb2), c, 0.05)) <= base + 1e-12


def test_scale_invariance(rng):
    fa, fb, c = random_case(rng)
    base = float(l3dc_query(dc.l2_normalize(t64(fa)), dc.l2_normalize(t64(fb)), c, 0.01))
    scaled = float(l3dc_query(dc.l2_normalize(t64(fa * 7.5)), dc.l2_normalize(t64(fb * 0.2)), c, 0.01))
    # exact up to the 1e-8 guard inside the norm
    assert scaled == pytest.approx(base, abs=1e-8)


def test_grad_check_on_batch(rng):
    fa = t64(rng.normal(size=(8, 16))).requires_grad_(True)
    fb = t64(rng.normal(size=(20, 16))).requires_grad_(True)
    corrs = [QueryCorrespondence(i, i, np.array([j for j in range(10, 20) if j != i]), 0.0) for i in range(8)]

    def f():
        return l3dc_batch(dc.l2_normalize(fa), dc.l2_normalize(fb), corrs, 0.1).value

    assert dc.grad_check(f, [fa, fb]) < 1e-4


def test_frame_pair_loss_runs(sample):
    c = 8
    h, w = sample.shape
    feats = dc.l2_normalize(torch.randn(sample.n_frames, c, h, w, dtype=torch.float64), dim=1)
    res = frame_pair_loss(feats, sample.frames, sample.pointmaps, (0, 1), LossConfig(n_keypoints=128), 0)
    again = frame_pair_loss(feats, sample.frames, sample.pointmaps, (0, 1), LossConfig(n_keypoints=128), 0)
    assert res.n_queries == again.n_queries and float(res.value) == float(again.value)
    assert 0.0 <= float(res.value) <= 1.0
