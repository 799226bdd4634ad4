"""Independent reference computations shared by the unit and acceptance tests."""

import itertools

import numpy as np


def rank_oracle(x):
    """Average ranks (1-based) by brute-force counting, ties share the mean."""
    x = list(x)
    out = []
    for v in x:
        below = sum(1 for w in x if w < v)
        equal = sum(1 for w in x if w == v)
        out.append(below + (equal + 1) / 2)
    return out


def pearson_oracle(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / (sxx * syy) ** 0.5


def spearman_oracle(x, y):
    return pearson_oracle(rank_oracle(x), rank_oracle(y))


def spearman_by_permutation(x, y):
    """For tie-free data: rho = 1 - 6 sum d^2 / (n (n^2 - 1)), with ranks read
    off by sorting every index permutation once (tiny n only)."""
    n = len(x)
    order_x = min(itertools.permutations(range(n)), key=lambda p: [x[i] for i in p])
    order_y = min(itertools.permutations(range(n)), key=lambda p: [y[i] for i in p])
    rx = {i: r for r, i in enumerate(order_x)}
    ry = {i: r for r, i in enumerate(order_y)}
    d2 = sum((rx[i] - ry[i]) ** 2 for i in range(n))
    return 1 - 6 * d2 / (n * (n * n - 1))


def coordinate_features(pointmap, scale=4.0):
    """Fourier embedding of world coordinates, (C, H, W).  Dot products are
    sum(cos(delta / scale)) over axes, maximal where coordinates coincide."""
    xyz = np.asarray(pointmap.coords, np.float64) / scale
    f = np.concatenate([np.cos(xyz), np.sin(xyz)], axis=-1)
    f[~pointmap.valid] = 0.0
    return f.transpose(2, 0, 1)


def random_recall_oracle(gt_px, shape, delta, n_draws=200_000, seed=0):
    """Monte-Carlo recall of a matcher that picks a uniformly random pixel.

    Returns (expected percent, standard deviation of the percent for
    ``len(gt_px)`` independent queries).
    """
    h, w = shape
    rng = np.random.default_rng(seed)
    u = rng.integers(0, w, n_draws)
    v = rng.integers(0, h, n_draws)
    gt = np.asarray(gt_px, np.float64)
    p = np.array([np.mean(np.hypot(u - gu, v - gv) <= delta) for gu, gv in gt])
    return 100.0 * p.mean(), 100.0 * np.sqrt(np.sum(p * (1 - p))) / len(p)
