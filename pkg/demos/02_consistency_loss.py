"""What the view-consistency loss sees: edge-biased keypoints, 3D-mined
positives and negatives, and a smooth average-precision score.

Features that encode the underlying 3D point score a loss near zero; random
features sit near one.

    python demos/02_consistency_loss.py
"""

import numpy as np
import torch

from mvconsist import diffcore as dc
from mvconsist.corresploss import LossConfig, frame_pair_loss, mine_correspondences, sample_keypoints
from mvconsist.scenegen import random_sample


def coordinate_features(video, scales=(0.02, 0.1, 0.5, 2.0)):
    # sin/cos of the world coordinates at several wavelengths: the short ones
    # separate nearby points at the loss temperature, the long ones stop aliasing
    xyz = np.stack([pm.coords for pm in video.pointmaps]).astype(np.float64)
    f = np.concatenate([g(xyz / s) for s in scales for g in (np.cos, np.sin)], axis=-1)
    return torch.from_numpy(f).permute(0, 3, 1, 2)


def main():
    video = random_sample(11)
    cfg = LossConfig()
    a, b = 0, 2

    kps_a = sample_keypoints(video.frames[a], video.pointmaps[a], cfg.n_keypoints, cfg.edge_ratio, seed=1)
    kps_b = sample_keypoints(video.frames[b], video.pointmaps[b], cfg.n_keypoints, cfg.edge_ratio, seed=2)
    corrs = mine_correspondences(kps_a, kps_b, cfg, seed=3)
    print(f"{cfg.n_keypoints} keypoints per frame, {len(corrs)} of them have a 3D match within {cfg.t_pos}")
    if corrs:
        negs = np.mean([len(c.negatives) for c in corrs])
        print(f"on average {negs:.0f} negatives per query (farther than {cfg.t_neg}, capped at {cfg.max_negatives})")

    for name, feats in [
        ("coordinate features", coordinate_features(video)),
        ("random features", torch.randn(video.n_frames, 6, *video.shape, dtype=torch.float64)),
    ]:
        res = frame_pair_loss(dc.l2_normalize(feats, dim=1), video.frames, video.pointmaps, (a, b), cfg, seed=0)
        print(f"{name:20s} loss {float(res.value):.4f} over {res.n_queries} queries")


if __name__ == "__main__":
    main()
