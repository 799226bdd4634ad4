"""Ray-cast renderer for static scenes built from analytic primitives."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..geometry import CameraIntrinsics, PointMap, SE3Pose, pixel_rays, project_points

TEXTURES = ("checker", "gradient", "noise")
TRAJECTORIES = ("orbit", "dolly", "truck", "arc")

_LIGHT = np.array([0.3, 0.8, 0.5]) / np.linalg.norm([0.3, 0.8, 0.5])  # travel direction
_AMBIENT = 0.35


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Texture:
    kind: str = "checker"
    period: float = 0.5
    albedo: tuple = (0.8, 0.8, 0.8)
    secondary: tuple = (0.2, 0.2, 0.2)
    direction: tuple = (1.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TEXTURES:
            raise SceneError(f"unknown texture {self.kind!r}")
        if self.period <= 0:
            raise SceneError("texture period must be positive")


@dataclass(frozen=True)
class Primitive:
    """An analytic shape.

    ``kind`` is one of ``plane`` (axis-aligned rectangle with normal along
    ``axis`` and in-plane half sizes ``size``), ``sphere`` (radius
    ``size[0]``) or ``cuboid`` (axis-aligned box with half extents ``size``).
    """

    kind: str
    center: tuple
    size: tuple
    texture: Texture = field(default_factory=Texture)
    axis: int = 2

    def __post_init__(self):
        if self.kind not in ("plane", "sphere", "cuboid"):
            raise SceneError(f"unknown primitive {self.kind!r}")
        if any(s <= 0 for s in self.size):
            raise SceneError("primitive sizes must be positive")

    def contains(self, p) -> bool:
        c = np.asarray(self.center, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if self.kind == "sphere":
            return bool(np.linalg.norm(p - c) < self.size[0])
        if self.kind == "cuboid":
            return bool(np.all(np.abs(p - c) < np.asarray(self.size)))
        return False


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    background: tuple = (0.05, 0.05, 0.08)

    def __post_init__(self):
        if len(self.primitives) == 0:
            raise SceneError("scene needs at least one primitive")


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "orbit"
    n_frames: int = 8
    magnitude: float = 0.5
    start: tuple = (0.0, 0.0, 0.0)
    target: tuple = (0.0, 0.3, 4.0)
    elevation: float = 0.0

    def __post_init__(self):
        if self.kind not in TRAJECTORIES:
            raise SceneError(f"unknown trajectory {self.kind!r}")
        if self.n_frames < 2:
            raise SceneError("trajectory needs at least two frames")

    def poses(self) -> list[SE3Pose]:
        start = np.asarray(self.start, dtype=np.float64)
        target = np.asarray(self.target, dtype=np.float64)
        s = np.linspace(0.0, 1.0, self.n_frames)
        eyes = []
        if self.kind in ("orbit", "arc"):
            offset = start - target
            radius = np.hypot(offset[0], offset[2])
            phi0 = np.arctan2(offset[0], offset[2])
            for k, sk in enumerate(s):
                phi = phi0 + self.magnitude * sk  # magnitude is the swept angle in radians
                y = start[1] + (self.elevation * np.sin(np.pi * sk) if self.kind == "arc" else 0.0)
                eyes.append(np.array([target[0] + radius * np.sin(phi), y, target[2] + radius * np.cos(phi)]))
            return [SE3Pose.look_at(e, target) for e in eyes]
        forward = (target - start) / np.linalg.norm(target - start)
        if self.kind == "dolly":
            return [SE3Pose.look_at(start + self.magnitude * sk * forward, target) for sk in s]
        # truck: slide sideways while keeping the viewing direction fixed
        right = np.cross(forward, [0.0, -1.0, 0.0])
        right /= np.linalg.norm(right)
        return [
            SE3Pose.look_at(start + self.magnitude * sk * right, target + self.magnitude * sk * right) for sk in s
        ]


@dataclass
class VideoSample:
    """N frames with cameras and per-pixel world coordinates."""

    frames: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    cameras: list  # N x (SE3Pose, CameraIntrinsics)
    pointmaps: list  # N x PointMap
    caption: Optional[str] = None

    def __post_init__(self):
        n = len(self.frames)
        if not (len(self.cameras) == len(self.pointmaps) == n):
            raise ValueError("frames, cameras and point maps disagree in length")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple:
        return tuple(self.frames.shape[1:3])

    def depth(self, i: int) -> np.ndarray:
        """Camera-space depth of frame ``i``'s point map (NaN where invalid)."""
        pose, _ = self.cameras[i]
        z = pose.to_camera(self.pointmaps[i].coords.astype(np.float64))[..., 2]
        return np.where(self.pointmaps[i].valid, z, np.nan)


# ---------------------------------------------------------------- ray casting


def _intersect(prim: Primitive, origin: np.ndarray, dirs: np.ndarray):
    """Ray parameter of the first hit (inf where missed) and surface normals."""
    c = np.asarray(prim.center, dtype=np.float64)
    n_rays = dirs.shape[0]
    t = np.full(n_rays, np.inf)
    normals = np.zeros((n_rays, 3))
    if prim.kind == "sphere":
        r = prim.size[0]
        oc = origin - c
        b = np.einsum("ij,ij->i", oc, dirs)
        cc = np.einsum("ij,ij->i", oc, oc) - r * r
        disc = b * b - cc
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        tt = np.where(t0 > 1e-6, t0, t1)
        hit &= tt > 1e-6
        t[hit] = tt[hit]
        p = origin + t[:, None] * dirs
        normals = (p - c) / r
    elif prim.kind == "plane":
        ax = prim.axis
        denom = dirs[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = (c[ax] - origin[:, ax]) / denom
        p = origin + np.where(np.isfinite(tt), tt, 0.0)[:, None] * dirs
        others = [k for k in range(3) if k != ax]
        half = prim.size
        inside = (np.abs(p[:, others[0]] - c[others[0]]) <= half[0]) & (
            np.abs(p[:, others[1]] - c[others[1]]) <= half[1]
        )
        hit = np.isfinite(tt) & (tt > 1e-6) & inside
        t[hit] = tt[hit]
        normals[:, ax] = -np.sign(denom)  # face the viewer
    else:  # cuboid, slab method
        half = np.asarray(prim.size, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t_lo = (c - half - origin) * inv
            t_hi = (c + half - origin) * inv
        t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=1)
        t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=1)
        hit = (t_near <= t_far) & (t_near > 1e-6)
        t[hit] = t_near[hit]
        p = origin + np.where(hit, t_near, 0.0)[:, None] * dirs
        rel = (p - c) / half
        face = np.argmax(np.abs(rel), axis=1)
        normals[np.arange(n_rays), face] = np.sign(rel[np.arange(n_rays), face])
    return t, normals


def _lattice_values(seed: int, idx: np.ndarray) -> np.ndarray:
    """Deterministic pseudo-random value in [0, 1) per integer lattice point."""
    h = (idx[..., 0] * 73856093) ^ (idx[..., 1] * 19349663) ^ (idx[..., 2] * 83492791) ^ (seed * 2654435761)
    h = h.astype(np.uint64)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(p: np.ndarray, seed: int) -> np.ndarray:
    base = np.floor(p).astype(np.int64)
    f = p - base
    f = f * f * (3 - 2 * f)  # smoothstep
    out = np.zeros(p.shape[0])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = base + np.array([dx, dy, dz])
                w = (
                    (f[:, 0] if dx else 1 - f[:, 0])
                    * (f[:, 1] if dy else 1 - f[:, 1])
                    * (f[:, 2] if dz else 1 - f[:, 2])
                )
                out += w * _lattice_values(seed, corner)
    return out


def _shade(tex: Texture, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    q = points / tex.period
    if tex.kind == "checker":
        # half-period offset keeps axis-aligned planes off checker boundaries
        mix = (np.floor(q + 0.25).astype(np.int64).sum(axis=1) % 2).astype(np.float64)
    elif tex.kind == "gradient":
        d = np.asarray(tex.direction, dtype=np.float64)
        mix = 0.5 + 0.5 * np.sin(2 * np.pi * (q @ d))
    else:
        mix = 0.6 * _value_noise(q, tex.seed) + 0.4 * _value_noise(2.0 * q + 17.0, tex.seed + 1)
    color = mix[:, None] * np.asarray(tex.albedo) + (1 - mix[:, None]) * np.asarray(tex.secondary)
    lambert = np.clip(normals @ -_LIGHT, 0.0, 1.0)
    return color * (_AMBIENT + (1 - _AMBIENT) * lambert)[:, None]


def cast_rays(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """First-hit points, colours and hit flags for a bundle of rays (M, 3)."""
    best_t = np.full(dirs.shape[0], np.inf)
    best_prim = np.full(dirs.shape[0], -1)
    all_normals = []
    for k, prim in enumerate(scene.primitives):
        t, normals = _intersect(prim, origin, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_prim[closer] = k
        all_normals.append(normals)
    hit = np.isfinite(best_t)
    points = origin + np.where(hit, best_t, 0.0)[:, None] * dirs
    colors = np.tile(np.asarray(scene.background, dtype=np.float64), (dirs.shape[0], 1))
    for k, prim in enumerate(scene.primitives):
        sel = best_prim == k
        if np.any(sel):
            colors[sel] = _shade(prim.texture, points[sel], all_normals[k][sel])
    return points, np.clip(colors, 0.0, 1.0), hit


def render_view(scene: SceneSpec, pose: SE3Pose, intr: CameraIntrinsics):
    """Image (H, W, 3) and point map for a single camera."""
    origin, dirs = pixel_rays(pose, intr)
    h, w = intr.height, intr.width
    points, colors, hit = cast_rays(scene, origin.reshape(-1, 3), dirs.reshape(-1, 3))
    points[~hit] = 0.0
    return colors.reshape(h, w, 3), points.reshape(h, w, 3), hit.reshape(h, w)


def render(scene: SceneSpec, traj: TrajectorySpec, intr: CameraIntrinsics, seed: int = 0, caption=None) -> VideoSample:
    """Render a video with exact point maps, normalised to unit median depth.

    ``seed`` only feeds procedural textures whose own seed is unset; the
    output is a pure function of the arguments.
    """
    poses = traj.poses()
    for pose in poses:
        for prim in scene.primitives:
            if prim.contains(pose.center):
                raise SceneError(f"camera at {pose.center} lies inside a {prim.kind}")
    if seed:
        scene = SceneSpec(
            tuple(
                replace(p, texture=replace(p.texture, seed=p.texture.seed + seed))
                for p in scene.primitives
            ),
            scene.background,
        )
    views = [render_view(scene, pose, intr) for pose in poses]
    z0 = poses[0].to_camera(views[0][1][views[0][2]])[:, 2]
    scale = 1.0 / float(np.median(z0)) if z0.size else 1.0
    frames = np.stack([v[0] for v in views]).astype(np.float32)
    pointmaps = [PointMap((v[1] * scale).astype(np.float32), v[2].copy()) for v in views]
    cameras = [(pose.scaled(scale), intr) for pose in poses]
    return VideoSample(frames, cameras, pointmaps, caption)


# ------------------------------------------------------------- correspondences


def _sample_pointmap(sample: VideoSample, frame: int, uv: np.ndarray):
    """World point at sub-pixel locations: bilinear when the 2x2 neighbourhood
    is valid and depth-consistent, nearest pixel otherwise."""
    pm = sample.pointmaps[frame]
    h, w = pm.valid.shape
    depth = sample.depth(frame)
    u, v = uv[:, 0], uv[:, 1]
    out = np.zeros((len(uv), 3))
    ok = np.zeros(len(uv), dtype=bool)
    ui = np.clip(np.rint(u).astype(int), 0, w - 1)
    vi = np.clip(np.rint(v).astype(int), 0, h - 1)
    in_bounds = (u >= -0.5) & (u <= w - 0.5) & (v >= -0.5) & (v <= h - 0.5)
    nearest_ok = in_bounds & pm.valid[vi, ui]
    out[nearest_ok] = pm.coords[vi[nearest_ok], ui[nearest_ok]]
    ok |= nearest_ok

    u0 = np.clip(np.floor(u).astype(int), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 2)
    fu = np.clip(u - u0, 0.0, 1.0)[:, None]
    fv = np.clip(v - v0, 0.0, 1.0)[:, None]
    corners = [(v0, u0), (v0, u0 + 1), (v0 + 1, u0), (v0 + 1, u0 + 1)]
    all_valid = in_bounds.copy()
    for cv, cu in corners:
        all_valid &= pm.valid[cv, cu]
    ds = np.stack([depth[cv, cu] for cv, cu in corners])
    with np.errstate(invalid="ignore"):
        consistent = all_valid & (np.nanmax(ds, axis=0) - np.nanmin(ds, axis=0) <= 0.02 * np.nanmin(ds, axis=0))
    c = [pm.coords[cv, cu].astype(np.float64) for cv, cu in corners]
    bil = (1 - fv) * ((1 - fu) * c[0] + fu * c[1]) + fv * ((1 - fu) * c[2] + fu * c[3])
    out[consistent] = bil[consistent]
    return out, ok


def gt_correspondences(sample: VideoSample, a: int, b: int, pixels, occlusion_tol: float = 0.01) -> np.ndarray:
    """Ground-truth locations in frame ``b`` of pixels from frame ``a``.

    Returns an (M, 3) array of ``(u', v', valid)``.  A correspondence is valid
    when the source point exists, projects inside ``b`` in front of the
    camera, and is not occluded (depth agrees with ``b``'s point map to
    ``occlusion_tol`` relative).
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    pts, ok = _sample_pointmap(sample, a, pixels)
    pose_b, intr_b = sample.cameras[b]
    uv, z, visible = project_points(pts, pose_b, intr_b)
    h, w = sample.shape
    with np.errstate(invalid="ignore"):
        inside = (uv[:, 0] >= -0.5) & (uv[:, 0] <= w - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] <= h - 0.5)
    valid = ok & visible & inside
    depth_b = sample.depth(b)
    ui = np.clip(np.rint(np.nan_to_num(uv[:, 0])).astype(int), 0, w - 1)
    vi = np.clip(np.rint(np.nan_to_num(uv[:, 1])).astype(int), 0, h - 1)
    seen = depth_b[vi, ui]
    with np.errstate(invalid="ignore"):
        unoccluded = np.abs(seen - z) <= occlusion_tol * z
    valid &= unoccluded
    out = np.column_stack([np.nan_to_num(uv), valid.astype(np.float64)])
    return out


# -------------------------------------------------------------- random scenes


def random_scene(rng: np.random.Generator) -> SceneSpec:
    """A floor, a back wall and two to four textured objects in front of them."""

    def tex():
        kind = TEXTURES[rng.integers(len(TEXTURES))]
        albedo = tuple(rng.uniform(0.5, 1.0, 3))
        secondary = tuple(rng.uniform(0.0, 0.4, 3))
        d = rng.normal(size=3)
        return Texture(
            kind,
            period=float(rng.uniform(0.35, 0.8)),
            albedo=albedo,
            secondary=secondary,
            direction=tuple(d / np.linalg.norm(d)),
            seed=int(rng.integers(1 << 30)),
        )

    prims = [
        Primitive("plane", (0.0, 1.0, 4.0), (6.0, 5.0), tex(), axis=1),
        Primitive("plane", (0.0, -1.0, 6.0), (6.0, 3.0), tex(), axis=2),
    ]
    for _ in range(int(rng.integers(2, 5))):
        x, z = rng.uniform(-1.1, 1.1), rng.uniform(2.4, 4.4)
        if rng.random() < 0.5:
            r = float(rng.uniform(0.35, 0.75))
            prims.append(Primitive("sphere", (x, 1.0 - r, z), (r,), tex()))
        else:
            half = tuple(float(s) for s in rng.uniform(0.3, 0.65, 3))
            prims.append(Primitive("cuboid", (x, 1.0 - half[1], z), half, tex()))
    return SceneSpec(tuple(prims), tuple(float(c) for c in rng.uniform(0.0, 0.15, 3)))


def random_trajectory(rng: np.random.Generator, n_frames: int = 8) -> TrajectorySpec:
    kind = TRAJECTORIES[rng.integers(len(TRAJECTORIES))]
    magnitude = {
        "orbit": rng.uniform(0.25, 0.5) * rng.choice([-1, 1]),
        "arc": rng.uniform(0.25, 0.5) * rng.choice([-1, 1]),
        "dolly": rng.uniform(0.6, 1.4),
        "truck": rng.uniform(0.5, 1.0) * rng.choice([-1, 1]),
    }[kind]
    start = (float(rng.uniform(-0.3, 0.3)), float(rng.uniform(-0.7, -0.4)), 0.0)
    return TrajectorySpec(kind, n_frames, float(magnitude), start, (0.0, 0.4, 3.4), float(rng.uniform(-0.3, 0.0)))


def random_sample(seed: int, size: int = 64, n_frames: int = 8, fov_deg: float = 60.0) -> VideoSample:
    rng = np.random.default_rng(seed)
    scene = random_scene(rng)
    traj = random_trajectory(rng, n_frames)
    intr = CameraIntrinsics.from_fov(size, size, fov_deg)
    return render(scene, traj, intr, caption=f"{traj.kind}-{seed}")
