"""Edge-aware keypoint sampling, 3D-distance mining and the smooth-AP
view-consistency loss.

For a query keypoint ``q`` in frame a, its positive ``p`` is the frame-b
keypoint nearest in 3D.  With positives ``{q, p}`` and negatives ``S_n`` the
per-query loss is one minus the smooth average precision of the positives
when every sample is ranked by feature similarity to ``q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
from scipy.special import expit

from . import diffcore as dc
from .geometry import pairwise_sq_dist

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.01
    t_pos: float = 0.005
    t_neg: float = 0.1
    n_keypoints: int = 512
    max_negatives: int = 64
    edge_ratio: float = 0.7

    def __post_init__(self):
        if not 0 < self.t_pos < self.t_neg:
            raise ValueError("need 0 < t_pos < t_neg")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.max_negatives < 1:
            raise ValueError("max_negatives must be at least 1")
        if not 0.0 <= self.edge_ratio <= 1.0:
            raise ValueError("edge_ratio must lie in [0, 1]")


@dataclass
class KeypointSet:
    pixels: np.ndarray  # (K, 2) integer (u, v)
    points3d: np.ndarray  # (K, 3)
    valid: np.ndarray  # (K,) bool

    def __len__(self):
        return len(self.pixels)


@dataclass
class QueryCorrespondence:
    query: int
    positive: int
    negatives: np.ndarray
    d_pos: float


class TieError(ValueError):
    """A positive and a negative have identical similarity; resample."""


# ------------------------------------------------------------------ sampling


def sobel_edge_map(frame: np.ndarray) -> np.ndarray:
    """Gradient magnitude of the luma of an (H, W, 3) or (H, W) image."""
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 3:
        img = img @ LUMA
    p = np.pad(img, 1, mode="reflect")
    # separable form: central difference along one axis, [1, 2, 1] smoothing along the other
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return np.hypot(gx, gy)


def sample_keypoints(frame, pointmap, k: int, edge_ratio: float, seed) -> KeypointSet:
    """``ceil(edge_ratio * k)`` keypoints from the top edge-magnitude quartile
    of valid pixels, the rest uniformly over the remaining valid pixels."""
    valid = np.asarray(pointmap.valid)
    flat_valid = np.flatnonzero(valid.ravel())
    if k > len(flat_valid):
        raise ValueError(f"requested {k} keypoints but only {len(flat_valid)} valid pixels")
    rng = np.random.default_rng(seed)
    n_edge = math.ceil(edge_ratio * k)
    chosen = np.empty(0, dtype=np.int64)
    if n_edge > 0:
        mags = sobel_edge_map(frame).ravel()[flat_valid]
        pool = flat_valid[mags >= np.quantile(mags, 0.75)]
        chosen = rng.choice(pool, size=min(n_edge, len(pool)), replace=False)
    rest = np.setdiff1d(flat_valid, chosen, assume_unique=True)
    chosen = np.concatenate([chosen, rng.choice(rest, size=k - len(chosen), replace=False)])
    h, w = valid.shape
    v, u = np.divmod(chosen, w)
    pixels = np.stack([u, v], axis=1)
    return KeypointSet(pixels, pointmap.coords[v, u].astype(np.float64), valid[v, u].copy())


def mine_correspondences(kps_a: KeypointSet, kps_b: KeypointSet, cfg: LossConfig, seed) -> list:
    """Nearest-3D positives within ``t_pos`` and up to ``max_negatives``
    uniformly drawn keypoints farther than ``t_neg``."""
    ia = np.flatnonzero(kps_a.valid)
    ib = np.flatnonzero(kps_b.valid)
    if len(ia) == 0 or len(ib) == 0:
        return []
    d = np.sqrt(pairwise_sq_dist(kps_a.points3d[ia], kps_b.points3d[ib]))
    nearest = d.argmin(axis=1)
    d_pos = d[np.arange(len(ia)), nearest]
    rng = np.random.default_rng(seed)
    out = []
    for row in np.flatnonzero(d_pos <= cfg.t_pos):
        eligible = ib[d[row] > cfg.t_neg]
        if len(eligible) > cfg.max_negatives:
            eligible = np.sort(rng.choice(eligible, size=cfg.max_negatives, replace=False))
        out.append(QueryCorrespondence(int(ia[row]), int(ib[nearest[row]]), eligible, float(d_pos[row])))
    return out


# ---------------------------------------------------------------------- loss


def sigma_tau(x, tau: float):
    """Temperature sigmoid for arrays or tensors."""
    if torch.is_tensor(x):
        return dc.sigmoid_with_temperature(x, tau)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return expit(np.asarray(x, dtype=np.float64) / tau)


def gather_features(hbar: torch.Tensor, kps: KeypointSet) -> torch.Tensor:
    """(C, H, W) feature map -> (K, C) features at the keypoint pixels."""
    u = torch.as_tensor(kps.pixels[:, 0], dtype=torch.long)
    v = torch.as_tensor(kps.pixels[:, 1], dtype=torch.long)
    return hbar[:, v, u].T


def _smooth_ap_terms(s_q, s_p, s_n, n_mask, tau):
    """Per-query smooth AP given similarities to q of q itself, p and negatives."""
    neg = lambda s_i: (sigma_tau(s_n - s_i[:, None], tau) * n_mask).sum(dim=1)  # noqa: E731
    pos_q = 1.0 + sigma_tau(s_p - s_q, tau)
    pos_p = 1.0 + sigma_tau(s_q - s_p, tau)
    return 0.5 * (pos_q / (pos_q + neg(s_q)) + pos_p / (pos_p + neg(s_p)))


def l3dc_query(feats_a: torch.Tensor, feats_b: torch.Tensor, c: QueryCorrespondence, tau: float) -> torch.Tensor:
    """Loss for one query from normalised keypoint features (K_a, C), (K_b, C)."""
    return l3dc_batch(feats_a, feats_b, [c], tau)[0]


class BatchLoss(NamedTuple):
    value: torch.Tensor
    n_queries: int

    @property
    def no_queries(self) -> bool:
        return self.n_queries == 0


def l3dc_batch(feats_a: torch.Tensor, feats_b: torch.Tensor, corrs: Sequence[QueryCorrespondence], tau: float) -> BatchLoss:
    """Mean per-query loss over ``corrs`` computed in float64; returns
    ``BatchLoss(0, 0)`` when there are no queries."""
    if len(corrs) == 0:
        return BatchLoss(feats_a.sum() * 0.0, 0)
    fa = feats_a.double()
    fb = feats_b.double()
    q_idx = torch.as_tensor([c.query for c in corrs], dtype=torch.long)
    p_idx = torch.as_tensor([c.positive for c in corrs], dtype=torch.long)
    m = max(1, max(len(c.negatives) for c in corrs))
    n_idx = np.zeros((len(corrs), m), dtype=np.int64)
    n_mask = np.zeros((len(corrs), m))
    for row, c in enumerate(corrs):
        n_idx[row, : len(c.negatives)] = c.negatives
        n_mask[row, : len(c.negatives)] = 1.0
    hq = fa[q_idx]
    s_q = (hq * hq).sum(dim=1)
    s_p = (hq * fb[p_idx]).sum(dim=1)
    s_n = torch.einsum("qc,qmc->qm", hq, fb[torch.from_numpy(n_idx)])
    ap = _smooth_ap_terms(s_q, s_p, s_n, torch.from_numpy(n_mask), tau)
    return BatchLoss((1.0 - ap).mean(), len(corrs))


def exact_ap_oracle(pos_sims, neg_sims) -> float:
    """Average precision of positives ranked by descending similarity."""
    pos = np.asarray(pos_sims, dtype=np.float64)
    neg = np.asarray(neg_sims, dtype=np.float64)
    if np.any(pos[:, None] == neg[None, :]):
        raise TieError("positive and negative similarities tie")
    precisions = []
    for s in pos:
        n_pos_above = np.sum(pos >= s)
        n_neg_above = np.sum(neg > s)
        precisions.append(n_pos_above / (n_pos_above + n_neg_above))
    return float(np.mean(precisions))


# --------------------------------------------------------------- frame pairs


def frame_pair_loss(
    hbar: torch.Tensor,
    frames: np.ndarray,
    pointmaps,
    pair: tuple,
    cfg: LossConfig,
    seed,
) -> BatchLoss:
    """View-consistency loss for one ordered frame pair of one video.

    ``hbar`` is (N, C, H, W) unit-normalised image-resolution features.
    ``seed`` is a numpy SeedSequence (or int) from which keypoint and
    negative sampling streams are spawned.
    """
    a, b = pair
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_a, s_b, s_m = ss.spawn(3)
    kps_a = sample_keypoints(frames[a], pointmaps[a], cfg.n_keypoints, cfg.edge_ratio, s_a)
    kps_b = sample_keypoints(frames[b], pointmaps[b], cfg.n_keypoints, cfg.edge_ratio, s_b)
    corrs = mine_correspondences(kps_a, kps_b, cfg, s_m)
    return l3dc_batch(gather_features(hbar[a], kps_a), gather_features(hbar[b], kps_b), corrs, cfg.tau)
