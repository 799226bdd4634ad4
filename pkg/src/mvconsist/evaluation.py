"""Correspondence recall of internal features, reprojection error of
generated videos, fidelity metrics and correlation statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
from scipy.ndimage import correlate, map_coordinates
from scipy.stats import rankdata

from . import diffcore as dc
from .geometry import project_points, reproject_frame
from .model import FeatureVolume, VideoDenoiser, ray_map, sample_video, video_to_model
from .scenegen import gt_correspondences

PSNR_CAP = 99.0


@dataclass
class CorrEvalConfig:
    noise_t: Optional[int] = None  # defaults to T / 1000
    layer: Optional[int] = None  # defaults to the model's tap layer
    delta: Optional[float] = None  # defaults to 50 px scaled from a 576 px wide frame
    n_queries: int = 1024
    pairs: str = "first"  # "first": (0, j) for every j; "consecutive": (i, i + 1)

    def resolved_delta(self, width: int) -> float:
        return float(self.delta) if self.delta is not None else float(max(1, round(50 * width / 576)))

    def resolved_t(self, T: int) -> int:
        return self.noise_t if self.noise_t is not None else max(1, T // 1000)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRecord:
    tag: str
    recall: Optional[float] = None
    reprojection_error: Optional[float] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    per_video: list = field(default_factory=list)

    def __post_init__(self):
        if self.recall is not None and not 0.0 <= self.recall <= 100.0:
            raise ValueError("recall must be a percentage")
        if self.reprojection_error is not None and self.reprojection_error < 0:
            raise ValueError("reprojection error must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------- features


@torch.no_grad()
def extract_features(
    sample, model: VideoDenoiser, cfg: CorrEvalConfig = CorrEvalConfig(), seed=0, noise: bool = True
) -> FeatureVolume:
    """Image-resolution tapped features (N, C, H, W) of a lightly noised video.

    ``noise=False`` keeps the timestep conditioning but drops the noise draw.
    """
    model.eval()
    t = cfg.resolved_t(model.schedule.T)
    z0 = video_to_model(np.asarray(sample.frames))[None]
    rng = np.random.default_rng(seed)
    eps = torch.from_numpy(rng.standard_normal(z0.shape).astype(np.float32))
    if not noise:
        eps.zero_()
    z_t = model.schedule.add_noise(z0, t, eps) if t > 0 else z0
    rays = torch.from_numpy(ray_map(sample.cameras))[None]
    layer = cfg.layer
    saved = model.cfg.tap_layer
    if layer is not None:
        model.cfg.tap_layer = layer
    try:
        _, h, _ = model.forward_with_features(z_t, rays, torch.tensor([t]), z0[:, 0])
    finally:
        model.cfg.tap_layer = saved
    up = dc.bilinear_upsample(h[0], z0.shape[-2:])
    return FeatureVolume(up, "tapped")


def correspondence_recall(feat_a, feat_b, query_px, gt_px, delta: float) -> float:
    """Percent of queries whose nearest neighbour (cosine) in ``feat_b`` lies
    within ``delta`` pixels of the ground-truth location.

    ``feat_a``/``feat_b`` are (C, H, W); ``query_px`` are integer (u, v) in
    frame a and ``gt_px`` the matching (u, v) in frame b.
    """
    fa = torch.as_tensor(np.asarray(feat_a), dtype=torch.float64) if not torch.is_tensor(feat_a) else feat_a.double()
    fb = torch.as_tensor(np.asarray(feat_b), dtype=torch.float64) if not torch.is_tensor(feat_b) else feat_b.double()
    query_px = np.asarray(query_px, dtype=np.int64).reshape(-1, 2)
    gt_px = np.asarray(gt_px, dtype=np.float64).reshape(-1, 2)
    if len(query_px) == 0:
        raise ValueError("need at least one ground-truth correspondence")
    c, h, w = fb.shape
    qa = dc.l2_normalize(fa[:, query_px[:, 1], query_px[:, 0]].T, dim=1)
    kb = dc.l2_normalize(fb.reshape(c, -1).T, dim=1)
    best = (qa @ kb.T).argmax(dim=1).numpy()
    pred = np.stack([best % w, best // w], axis=1)
    err = np.linalg.norm(pred - gt_px, axis=1)
    return float(100.0 * np.mean(err <= delta))


def frame_pairs(n: int, kind: str) -> list:
    if kind == "first":
        return [(0, j) for j in range(1, n)]
    if kind == "consecutive":
        return [(i, i + 1) for i in range(n - 1)]
    raise ValueError(f"unknown pair scheme {kind!r}")


def video_recall(sample, feats: FeatureVolume, cfg: CorrEvalConfig = CorrEvalConfig(), seed=0) -> float:
    """Mean recall over frame pairs; queries drawn uniformly among valid
    ground-truth correspondences of each pair."""
    h, w = sample.shape
    delta = cfg.resolved_delta(w)
    rng = np.random.default_rng(seed)
    vv, uu = np.mgrid[0:h, 0:w]
    grid = np.stack([uu.ravel(), vv.ravel()], axis=1)
    vals = []
    for a, b in frame_pairs(sample.n_frames, cfg.pairs):
        corr = gt_correspondences(sample, a, b, grid)
        ok = np.flatnonzero(corr[:, 2] > 0)
        if len(ok) == 0:
            continue
        pick = rng.choice(ok, size=min(cfg.n_queries, len(ok)), replace=False)
        vals.append(correspondence_recall(feats.values[a], feats.values[b], grid[pick], corr[pick, :2], delta))
    if not vals:
        raise ValueError("no valid ground-truth correspondences in any frame pair")
    return float(np.mean(vals))


# -------------------------------------------------------------- reprojection


def _bilinear(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    coords = [np.nan_to_num(uv[..., 1]), np.nan_to_num(uv[..., 0])]
    return np.stack([map_coordinates(img[..., c], coords, order=1, mode="nearest") for c in range(img.shape[-1])], -1)


def warp_mask(sample, i: int, j: int, occlusion_tol: float = 0.01):
    """Warp of frame ``i`` into ``j`` and the pixels that are visible in both."""
    warp, mask = reproject_frame(i, j, sample)
    pose, intr = sample.cameras[j]
    _, z, _ = project_points(sample.pointmaps[i].coords.astype(np.float64), pose, intr)
    depth_j = sample.depth(j)
    ui = np.clip(np.rint(np.nan_to_num(warp[..., 0])).astype(int), 0, intr.width - 1)
    vi = np.clip(np.rint(np.nan_to_num(warp[..., 1])).astype(int), 0, intr.height - 1)
    with np.errstate(invalid="ignore"):
        mask = mask & (np.abs(depth_j[vi, ui] - z) <= occlusion_tol * z)
    return warp, mask


def warp_residual(video: np.ndarray, sample, i: int, j: int):
    """Signed colour residual ``video[j](warp(p)) - video[i](p)`` and its mask."""
    warp, mask = warp_mask(sample, i, j)
    return _bilinear(np.asarray(video[j], dtype=np.float64), warp) - np.asarray(video[i], dtype=np.float64), mask


def reprojection_error(video: np.ndarray, sample, floor_correct: bool = True, return_maps: bool = False):
    """Mean masked absolute photometric error after warping each frame into
    the next with the ground-truth geometry of ``sample``.

    With ``floor_correct`` the residual of the ground-truth frames is
    subtracted per pixel, so resampling error of the pixel grid cancels and
    the ground-truth rendering itself scores exactly zero.
    """
    video = np.asarray(video)
    errs, maps = [], []
    for i in range(len(video) - 1):
        res, mask = warp_residual(video, sample, i, i + 1)
        if floor_correct:
            res = res - warp_residual(sample.frames, sample, i, i + 1)[0]
        err = np.abs(res).mean(axis=-1)
        maps.append(np.where(mask, err, np.nan))
        if mask.any():
            errs.append(float(err[mask].mean()))
    if not errs:
        raise ValueError("no pixel is visible in any consecutive frame pair")
    value = float(np.mean(errs))
    return (value, maps) if return_maps else value


# ---------------------------------------------------------------- fidelity


def psnr(a, b, data_range: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid
    window positions; colour images are averaged over channels, stacks of
    frames over frames."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 4:
        return float(np.mean([ssim(x, y, data_range, k1, k2) for x, y in zip(a, b)]))
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], data_range, k1, k2) for c in range(a.shape[-1])]))
    win = _gaussian_window()
    r = win.shape[0] // 2

    def filt(x):
        return correlate(x, win, mode="reflect")[r:-r, r:-r]

    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a**2
    s_bb = filt(b * b) - mu_b**2
    s_ab = filt(a * b) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


# -------------------------------------------------------------- correlation


def _check_xy(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-d and equally long")
    if len(x) < 3:
        raise ValueError("correlation needs at least three points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("correlation is undefined for constant input")
    return x, y


def plcc(xs, ys) -> float:
    x, y = _check_xy(xs, ys)
    x = x - x.mean()
    y = y - y.mean()
    return float(np.clip((x @ y) / math.sqrt((x @ x) * (y @ y)), -1.0, 1.0))


def srcc(xs, ys) -> float:
    x, y = _check_xy(xs, ys)
    return plcc(rankdata(x), rankdata(y))


# --------------------------------------------------------------------- PCA


def pca_feature_map(feats, eps: float = 1e-12):
    """Joint 3-component PCA of (F, C, H, W) features mapped to RGB in [0, 1].

    Returns ``(images (F, H, W, 3), explained_variance_ratio)``.  When fewer
    than three components carry variance the first component is shown as
    grey.
    """
    f = feats.detach().double().numpy() if torch.is_tensor(feats) else np.asarray(feats, np.float64)
    n, c, h, w = f.shape
    if c < 3:
        raise ValueError("PCA visualisation needs at least three channels")
    x = f.transpose(0, 2, 3, 1).reshape(-1, c)
    x = x - x.mean(axis=0)
    cov = x.T @ x / len(x)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    total = evals.sum()
    if total <= eps:
        return np.full((n, h, w, 3), 0.5), 0.0
    ratio = float(evals[:3].sum() / total)
    if evals[2] <= eps * total:
        proj = x @ evecs[:, :1]
        proj = np.repeat(proj, 3, axis=1)
    else:
        proj = x @ evecs[:, :3]
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    img = (proj - lo) / np.where(hi - lo > eps, hi - lo, 1.0)
    return img.reshape(n, h, w, 3), ratio


# -------------------------------------------------------------- run-level


def evaluate_model(
    model: VideoDenoiser,
    samples: Sequence,
    tag: str = "model",
    metrics: Sequence[str] = ("recall", "reproj", "psnr", "ssim"),
    cfg: CorrEvalConfig = CorrEvalConfig(),
    sample_steps: int = 50,
    seed: int = 0,
    reinject: Union[bool, float] = False,
) -> MetricsRecord:
    """Evaluate a model on held-out videos; generation is conditioned on each
    video's first frame and cameras. ``reinject`` is forwarded to the sampler."""
    model.eval()
    want_gen = any(m in metrics for m in ("reproj", "psnr", "ssim"))
    rows = []
    for k, sample in enumerate(samples):
        ss = np.random.SeedSequence(seed, spawn_key=(k,))
        s_feat, s_rec, s_gen = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
        row = {"index": k}
        if "recall" in metrics:
            feats = extract_features(sample, model, cfg, seed=s_feat)
            row["recall"] = video_recall(sample, feats, cfg, seed=s_rec)
        if want_gen:
            video = sample_video(model, sample.cameras, sample.frames[0], steps=sample_steps, seed=s_gen, reinject=reinject)
            if "reproj" in metrics:
                row["reprojection_error"] = reprojection_error(video, sample)
            if "psnr" in metrics:
                row["psnr"] = psnr(video[1:], sample.frames[1:])
            if "ssim" in metrics:
                row["ssim"] = ssim(video[1:], sample.frames[1:])
        rows.append(row)

    def avg(key):
        vals = [r[key] for r in rows if key in r]
        return float(np.mean(vals)) if vals else None

    return MetricsRecord(tag, avg("recall"), avg("reprojection_error"), avg("psnr"), avg("ssim"), rows)
