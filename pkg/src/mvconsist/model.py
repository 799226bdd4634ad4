"""Camera-conditioned pixel-space video denoiser with a feature tap.

The denoiser predicts the injected noise for a clip of N frames.  Its
second-last block exposes an intermediate activation ``h`` which an eight
layer convolutional projector maps to image-resolution features.  A
zero-initialised 1x1 layer can add the (detached, pooled) projected features
back into ``h`` before the last block.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import diffcore as dc
from .geometry import pixel_rays

# --------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine cumulative-signal schedule over discrete steps ``0..T`` (epsilon prediction)."""

    T: int = 1000
    offset: float = 0.008
    min_alpha_bar: float = 1e-6
    parameterization: str = "eps"

    @property
    def alpha_bar(self) -> np.ndarray:
        return _cosine_alpha_bar(self.T, self.offset, self.min_alpha_bar)

    def snr(self) -> np.ndarray:
        a = self.alpha_bar
        with np.errstate(divide="ignore"):
            return a / (1.0 - a)

    def add_noise(self, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        """``sqrt(a_t) * z0 + sqrt(1 - a_t) * eps``; ``t`` is an int or a (B,) tensor."""
        if eps.shape != z0.shape:
            raise dc.ShapeError("add_noise", z0.shape, eps.shape)
        t_arr = np.atleast_1d(np.asarray(t.cpu() if torch.is_tensor(t) else t))
        if np.any(t_arr < 0) or np.any(t_arr > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t_arr}")
        a = torch.as_tensor(self.alpha_bar[t_arr], dtype=z0.dtype)
        a = a.view(-1, *([1] * (z0.dim() - 1))) if a.numel() > 1 else a.reshape(())
        return torch.sqrt(a) * z0 + torch.sqrt(1.0 - a) * eps


def _cosine_alpha_bar(T: int, s: float, floor: float) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
    return np.maximum(f / f[0], floor)


# ----------------------------------------------------------------------- config


@dataclass
class DenoiserConfig:
    width: int = 32
    n_blocks: int = 6
    tap_layer: int = 4  # second-last block
    proj_layers: int = 8
    proj_channels: int = 32
    temporal: bool = True
    temb_dim: int = 64
    # Std of (clip - conditioning frame) assumed by the analytic skip term;
    # 0 disables the skip and the network predicts noise on its own.
    prior_sigma: float = 0.6

    def __post_init__(self):
        if self.n_blocks != 6:
            raise ValueError("the denoiser layout has exactly six blocks")
        if not 0 <= self.tap_layer < self.n_blocks - 1:
            raise ValueError("tap layer must precede the last block")
        if self.width % 16:
            raise ValueError("width must be a multiple of 16")
        if self.prior_sigma < 0:
            raise ValueError("prior_sigma must be non-negative")


# ----------------------------------------------------------------------- blocks


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TemporalAttention(nn.Module):
    """Single-head attention across the N frames at every pixel."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.out = nn.Linear(ch, ch)

    def forward(self, x, n_frames: int):
        bn, c, h, w = x.shape
        tokens = self.norm(x).view(bn // n_frames, n_frames, c, h * w).permute(0, 3, 1, 2)
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(c), dim=-1)
        y = self.out(att @ v)  # (B, hw, N, C)
        return x + y.permute(0, 2, 3, 1).reshape(bn, c, h, w)


class Projector(nn.Module):
    """Eight 3x3 convolutions with SiLU between layers; spatial size preserved."""

    def __init__(self, cin: int, cout: int, n_layers: int = 8, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or cout
        chans = [cin] + [hidden] * (n_layers - 1) + [cout]
        self.layers = nn.ModuleList(
            nn.Conv2d(a, b, 3, padding=1, padding_mode="replicate") for a, b in zip(chans[:-1], chans[1:])
        )
        for layer in self.layers:
            nn.init.zeros_(layer.bias)

    def forward(self, x):
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = F.silu(x)
        return x


class Reinjector(nn.Module):
    """1x1 linear map over channels, initialised to exactly zero."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.linear = nn.Conv2d(cin, cout, 1)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x):
        return self.linear(x)


def timestep_embedding(t: torch.Tensor, T: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    arg = (t.float() / T * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


# ---------------------------------------------------------------------- network


@dataclass
class FeatureVolume:
    """Per-frame features (B, N, C, h, w) tagged with their processing stage."""

    values: torch.Tensor
    stage: str  # "tapped" | "projected" | "normalized"

    STAGES = ("tapped", "projected", "normalized")

    def __post_init__(self):
        if self.stage not in self.STAGES:
            raise ValueError(f"unknown feature stage {self.stage!r}")

    def normalized(self) -> "FeatureVolume":
        if self.stage != "projected":
            raise ValueError(f"only projected features can be normalised, got {self.stage!r}")
        return FeatureVolume(dc.l2_normalize(self.values, dim=2), "normalized")


class VideoDenoiser(nn.Module):
    """Predicts noise for (B, N, 3, H, W) clips conditioned on per-pixel ray maps."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), schedule: NoiseSchedule = NoiseSchedule()):
        super().__init__()
        self.cfg = cfg
        self.schedule = schedule
        c0, c1, c2 = cfg.width // 2, cfg.width, 2 * cfg.width
        self.chans = (c0, c1, c1, c2, c2, c1, c0)
        td = cfg.temb_dim
        self.temb_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.stem = nn.Conv2d(3 + 6 + 3, c0, 3, padding=1)  # noisy frame, ray map, first frame
        self.blocks = nn.ModuleList(
            [
                ResBlock(c0, c0, td),  # full res
                ResBlock(c0, c1, td),  # 1/2
                ResBlock(c1, c2, td),  # 1/4
                ResBlock(c2, c2, td),  # 1/4
                ResBlock(c2 + c1, c1, td),  # 1/2, second-last
                ResBlock(c1 + c0, c0, td),  # full res
            ]
        )
        self.attn = nn.ModuleList([TemporalAttention(c2), TemporalAttention(c2)])
        self.out_norm = nn.GroupNorm(_groups(c0), c0)
        self.out = nn.Conv2d(c0, 3, 3, padding=1)
        tap_ch = self.block_channels(cfg.tap_layer)
        self.projector = Projector(tap_ch, cfg.proj_channels, cfg.proj_layers)
        self.reinjector = Reinjector(cfg.proj_channels, tap_ch)

    def block_channels(self, k: int) -> int:
        return self.blocks[k].conv2.out_channels

    def trunk_parameters(self):
        skip = {id(p) for p in list(self.projector.parameters()) + list(self.reinjector.parameters())}
        return [p for p in self.parameters() if id(p) not in skip]

    def forward_with_features(
        self,
        z_t: torch.Tensor,
        rays: torch.Tensor,
        t: torch.Tensor,
        cond: Optional[torch.Tensor] = None,
        reinject: bool = False,
        project: bool = False,
    ):
        """Returns ``(eps_hat, h, h_proj)``.

        ``cond`` is the clean conditioning frame (B, 3, H, W), concatenated to
        every frame's input; zeros when omitted.

        ``h`` is the tapped activation of block ``tap_layer`` before any
        reinjection, shaped (B, N, C, h, w).  ``h_proj`` is the projected,
        upsampled feature volume (or None unless ``project`` or ``reinject``).
        """
        if z_t.dim() != 5 or rays.shape[:2] != z_t.shape[:2] or rays.shape[-2:] != z_t.shape[-2:]:
            raise dc.ShapeError("forward_with_features", z_t.shape, rays.shape)
        b, n, _, hh, ww = z_t.shape
        if hh % 4 or ww % 4:
            raise dc.ShapeError("forward_with_features (size divisible by 4)", z_t.shape, (4, 4))
        t = torch.as_tensor(t).reshape(-1).expand(b) if torch.as_tensor(t).numel() == 1 else torch.as_tensor(t)
        temb = self.temb_mlp(timestep_embedding(t, self.schedule.T, self.cfg.temb_dim).to(z_t.dtype))
        temb = temb.repeat_interleave(n, dim=0)

        if cond is None:
            cond = z_t.new_zeros((b, 3, hh, ww))
        cond = cond.to(z_t.dtype)[:, None].expand(b, n, 3, hh, ww)
        skip = self.prior_eps(z_t, t, cond)
        x = torch.cat([z_t, rays.to(z_t.dtype), cond], dim=2).reshape(b * n, 12, hh, ww)
        x = self.stem(x)
        h_tap = h_proj = None
        skips = []

        def tap(k, x):
            nonlocal h_tap, h_proj
            if k != self.cfg.tap_layer:
                return x
            h_tap = x
            if project or reinject:
                h_proj = dc.bilinear_upsample(self.projector(x), (hh, ww))
            if reinject:
                pooled = dc.avg_pool_to(dc.stop_gradient(h_proj), x.shape[-2:])
                x = x + self.reinjector(pooled)
            return x

        x = self.blocks[0](x, temb)
        x = tap(0, x)
        skips.append(x)
        x = self.blocks[1](F.avg_pool2d(x, 2), temb)
        x = tap(1, x)
        skips.append(x)
        x = self.blocks[2](F.avg_pool2d(x, 2), temb)
        if self.cfg.temporal:
            x = self.attn[0](x, n)
        x = tap(2, x)
        x = self.blocks[3](x, temb)
        if self.cfg.temporal:
            x = self.attn[1](x, n)
        x = tap(3, x)
        x = self.blocks[4](torch.cat([F.interpolate(x, scale_factor=2, mode="nearest"), skips[1]], dim=1), temb)
        x = tap(4, x)
        x = self.blocks[5](torch.cat([F.interpolate(x, scale_factor=2, mode="nearest"), skips[0]], dim=1), temb)
        eps = self.out(F.silu(self.out_norm(x))).reshape(b, n, 3, hh, ww)
        if skip is not None:
            eps = eps + skip

        def split(v):
            return None if v is None else v.reshape(b, n, *v.shape[1:])

        return eps, split(h_tap), split(h_proj)

    def prior_eps(self, z_t, t, cond):
        """Linear least-squares noise estimate if each clip were Gaussian
        around the conditioning frame with std ``prior_sigma``.  The network
        output is added to this, so it only has to learn the residual."""
        var = self.cfg.prior_sigma**2
        if var == 0:
            return None
        a = torch.as_tensor(self.schedule.alpha_bar[np.asarray(t.cpu())], dtype=z_t.dtype).view(-1, 1, 1, 1, 1)
        return torch.sqrt(1 - a) * (z_t - torch.sqrt(a) * cond) / (a * var + 1 - a)

    def forward(self, z_t, rays, t, cond=None):
        return self.forward_with_features(z_t, rays, t, cond)[0]

    def project_and_upsample(self, h: FeatureVolume, size) -> FeatureVolume:
        """Projector then bilinear upsampling of tapped features to ``size``."""
        if h.stage != "tapped":
            raise ValueError(f"expected tapped features, got {h.stage!r}")
        b, n = h.values.shape[:2]
        flat = h.values.reshape(b * n, *h.values.shape[2:])
        out = dc.bilinear_upsample(self.projector(flat), size)
        return FeatureVolume(out.reshape(b, n, *out.shape[1:]), "projected")

    def reinject(self, h: torch.Tensor, h_proj: torch.Tensor) -> torch.Tensor:
        """``h + r(StopGrad(pool(h_proj)))`` on (B, N, C, h, w) tensors."""
        b, n = h.shape[:2]
        pooled = dc.avg_pool_to(dc.stop_gradient(h_proj).reshape(b * n, *h_proj.shape[2:]), h.shape[-2:])
        return h + self.reinjector(pooled).reshape(h.shape)


# ------------------------------------------------------------------ conditioning


def ray_map(cameras) -> np.ndarray:
    """(N, 6, H, W) float32: unit ray direction and camera centre per pixel."""
    out = []
    for pose, intr in cameras:
        origin, dirs = pixel_rays(pose, intr)
        out.append(np.concatenate([dirs, origin], axis=-1).transpose(2, 0, 1))
    return np.stack(out).astype(np.float32)


def video_to_model(frames: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) in [0, 1] -> (N, 3, H, W) in [-1, 1]."""
    return torch.from_numpy(np.ascontiguousarray(frames.transpose(0, 3, 1, 2))) * 2.0 - 1.0


def model_to_video(z: torch.Tensor) -> np.ndarray:
    """(N, 3, H, W) in model space -> (N, H, W, 3) in [0, 1]."""
    return ((z.clamp(-1.0, 1.0) + 1.0) / 2.0).permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


# ----------------------------------------------------------------------- sampler


@torch.no_grad()
def sample_video(
    model: VideoDenoiser,
    cameras,
    first_frame: Optional[np.ndarray] = None,
    steps: int = 50,
    seed: int = 0,
    reinject: Union[bool, float] = False,
    clip: float = 1.5,
) -> np.ndarray:
    """Ancestral sampling on an evenly strided subset of the schedule.

    When ``first_frame`` (H, W, 3) in [0, 1] is given, frame 0 is replaced by
    its forward-noised version at every step and by the clean frame at the end.
    ``reinject`` may be a bool or a gate g in [0, 1]; with a gate the branch is
    applied only on steps with t/T <= g, mirroring how it was trained.
    Returns (N, H, W, 3) in [0, 1].
    """
    sched = model.schedule
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must be in [1, {sched.T}]")
    rng = np.random.default_rng(seed)
    n = len(cameras)
    intr = cameras[0][1]
    shape = (1, n, 3, intr.height, intr.width)
    rays = torch.from_numpy(ray_map(cameras))[None]
    abar = sched.alpha_bar
    ts = np.unique(np.linspace(0, sched.T, steps + 1).round().astype(int))[::-1]
    cond = None if first_frame is None else video_to_model(np.asarray(first_frame)[None])[0]

    cond_in = None if cond is None else cond[None]

    def gauss():
        return torch.from_numpy(rng.standard_normal(shape).astype(np.float32))

    z = gauss()
    for t, s in zip(ts[:-1], ts[1:]):
        if cond is not None:
            z[0, 0] = sched.add_noise(cond, int(t), gauss()[0, 0])
        use = reinject if isinstance(reinject, bool) else t / sched.T <= reinject
        eps = model.forward_with_features(z, rays, torch.tensor([int(t)]), cond_in, reinject=bool(use))[0]
        a_t, a_s = float(abar[t]), float(abar[s])
        x0 = ((z - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)).clamp(-clip, clip)
        if s == 0:
            z = x0
            break
        alpha = a_t / a_s
        beta = 1.0 - alpha
        mean = (math.sqrt(a_s) * beta / (1 - a_t)) * x0 + (math.sqrt(alpha) * (1 - a_s) / (1 - a_t)) * z
        var = beta * (1 - a_s) / (1 - a_t)
        z = mean + math.sqrt(var) * gauss()
    if cond is not None:
        z[0, 0] = cond
    return model_to_video(z[0])


# -------------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"VCKP1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, config: dict, meta: Optional[dict] = None):
    """Write a named float32 tensor table with an embedded JSON header.

    Layout: magic | u32 json length | JSON | u32 count | per entry
    (u16 name length, name, u8 ndim, u32 dims..., float32 data).
    Written to a temporary file and renamed into place.
    """
    header = json.dumps({"config": config, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy() if torch.is_tensor(tensors[name]) else tensors[name])
        arr = arr.astype("<f4")
        key = name.encode("utf-8")
        chunks += [struct.pack("<H", len(key)), key, struct.pack("<B", arr.ndim)]
        chunks += [struct.pack("<I", d) for d in arr.shape]
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(tensors, config, meta)`` from :func:`save_checkpoint` output."""
    buf = Path(path).read_bytes()
    if buf[:5] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {buf[:5]!r})")
    off = 5
    try:
        (hlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        header = json.loads(buf[off : off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + klen].decode("utf-8")
            off += klen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from("<" + "I" * ndim, buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 4
            if off + size > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name!r} at byte {off}")
            tensors[name] = torch.from_numpy(np.frombuffer(buf, "<f4", int(np.prod(shape)), off).reshape(shape).copy())
            off += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: malformed checkpoint at byte {off}: {err}") from None
    return tensors, header["config"], header["meta"]
