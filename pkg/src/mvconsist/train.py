"""Diffusion training with the gated view-consistency term.

Each step draws one timestep for the batch.  The denoising loss is always
applied; when ``lam > 0`` and ``t / T <= gate`` the projector branch is run,
the projected features are reinjected (detached) into the tapped block, and
``lam`` times the view-consistency loss on one random frame pair per sample
is added.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import diffcore as dc
from .corresploss import LossConfig, frame_pair_loss
from .model import DenoiserConfig, NoiseSchedule, VideoDenoiser, load_checkpoint, ray_map, save_checkpoint, video_to_model

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class TrainingError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}; snapshot: {json.dumps(snapshot, default=str)}")
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    lam: float = 0.2
    gate: float = 0.2
    batch_size: int = 4
    steps: int = 2000
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 500
    loss: LossConfig = field(default_factory=LossConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be non-negative", "lam")
        if not 0.0 <= self.gate <= 1.0:
            raise ConfigError("gate must lie in [0, 1]", "gate")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive", "batch_size")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _build(cls, data or {}, prefix="")


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix.rstrip('.') or '<root>'} must be a mapping", prefix.rstrip("."))
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {prefix + key!r}", prefix + key)
        default = known[key].default_factory() if callable(known[key].default_factory) else None
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, prefix + key + ".")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid value in {prefix.rstrip('.') or 'config'}: {err}", prefix.rstrip(".")) from None


def load_config(path) -> TrainConfig:
    """Read a YAML (or JSON) config file into a TrainConfig."""
    import yaml

    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from None
    return TrainConfig.from_dict(data or {})


# ------------------------------------------------------------------ data prep


@dataclass
class PreparedSample:
    video: torch.Tensor  # (N, 3, H, W) in [-1, 1]
    rays: torch.Tensor  # (N, 6, H, W)
    frames: np.ndarray  # (N, H, W, 3) in [0, 1]
    pointmaps: list


def prepare(sample) -> PreparedSample:
    return PreparedSample(
        video_to_model(sample.frames),
        torch.from_numpy(ray_map(sample.cameras)),
        np.asarray(sample.frames),
        sample.pointmaps,
    )


# ----------------------------------------------------------------------- state


@dataclass
class TrainState:
    cfg: TrainConfig
    model: VideoDenoiser
    optimizer: torch.optim.Optimizer
    step: int = 0
    sum_l_diff: float = 0.0
    sum_l_3dc: float = 0.0
    n_gated: int = 0

    @property
    def gate_fraction(self) -> float:
        return self.n_gated / self.step if self.step else 0.0

    @property
    def mean_l_diff(self) -> float:
        return self.sum_l_diff / self.step if self.step else float("nan")

    @property
    def mean_l_3dc(self) -> float:
        return self.sum_l_3dc / self.n_gated if self.n_gated else float("nan")


@dataclass
class StepReport:
    step: int
    t: int
    gate: bool
    l_diff: float
    l_3dc: Optional[float]
    l_total: float
    n_queries: int

    def to_json(self, wall_time: float) -> str:
        return json.dumps({**asdict(self), "wall_time": wall_time})


def make_optimizer(model: VideoDenoiser, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def init_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(int(np.random.SeedSequence([cfg.seed, 0xC0FFEE]).generate_state(1)[0]))
    model = VideoDenoiser(cfg.model, cfg.schedule)
    return TrainState(cfg, model, make_optimizer(model, cfg))


def step_seed(seed: int, step: int) -> np.random.SeedSequence:
    """Counter-based stream for one training step."""
    return np.random.SeedSequence(seed, spawn_key=(step,))


def gate_on(t: int, cfg: TrainConfig) -> bool:
    return t / cfg.schedule.T <= cfg.gate


def sample_timestep(rng: np.random.Generator, T: int) -> int:
    return int(rng.integers(1, T + 1))


def step_timestep(cfg: TrainConfig, step: int) -> int:
    """The timestep ``train_step`` draws at ``step`` (without running it)."""
    return sample_timestep(np.random.default_rng(step_seed(cfg.seed, step).spawn(4)[0]), cfg.schedule.T)


def compute_losses(state: TrainState, batch: Sequence[PreparedSample], ss: np.random.SeedSequence, force_t=None):
    """Forward pass for one step; returns (l_total, report fields)."""
    cfg = state.cfg
    s_t, s_noise, s_pairs, s_kp = ss.spawn(4)
    t = sample_timestep(np.random.default_rng(s_t), cfg.schedule.T) if force_t is None else int(force_t)
    gate = gate_on(t, cfg)
    branch = gate and cfg.lam > 0

    z0 = torch.stack([s.video for s in batch])
    rays = torch.stack([s.rays for s in batch])
    eps = torch.from_numpy(np.random.default_rng(s_noise).standard_normal(z0.shape).astype(np.float32))
    z_t = cfg.schedule.add_noise(z0, t, eps)
    tt = torch.full((len(batch),), t, dtype=torch.long)
    cond = z0[:, 0]
    eps_hat, _, h_proj = state.model.forward_with_features(z_t, rays, tt, cond, reinject=branch, project=branch)
    l_diff = F.mse_loss(eps_hat, eps)
    l_total = l_diff
    l_3dc = None
    n_queries = 0
    if branch:
        pair_rng = np.random.default_rng(s_pairs)
        kp_seeds = s_kp.spawn(len(batch))
        terms = []
        for i, s in enumerate(batch):
            n = s.video.shape[0]
            a, b = pair_rng.choice(n, size=2, replace=False)
            hbar = dc.l2_normalize(h_proj[i], dim=1)
            res = frame_pair_loss(hbar, s.frames, s.pointmaps, (int(a), int(b)), cfg.loss, kp_seeds[i])
            if not res.no_queries:
                terms.append(res.value)
                n_queries += res.n_queries
        l3 = torch.stack(terms).mean() if terms else l_diff.new_zeros((), dtype=torch.float64)
        l_3dc = float(l3.detach())
        l_total = l_diff + cfg.lam * l3.to(l_diff.dtype)
    return l_total, dict(t=t, gate=gate, l_diff=float(l_diff.detach()), l_3dc=l_3dc, n_queries=n_queries)


def train_step(state: TrainState, batch: Sequence[PreparedSample], ss=None, force_t=None) -> StepReport:
    """One optimiser update; ``ss`` defaults to the counter stream of the current step."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    ss = step_seed(state.cfg.seed, state.step) if ss is None else ss
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    l_total, info = compute_losses(state, batch, ss, force_t)
    if not torch.isfinite(l_total):
        raise TrainingError("non-finite loss", {"step": state.step, **info})
    l_total.backward()
    state.optimizer.step()
    state.step += 1
    state.sum_l_diff += info["l_diff"]
    if info["gate"]:
        state.n_gated += 1
        if info["l_3dc"] is not None:
            state.sum_l_3dc += info["l_3dc"]
    return StepReport(step=state.step, l_total=float(l_total.detach()), **info)


# ---------------------------------------------------------------- checkpoints


def state_tensors(state: TrainState) -> dict:
    tensors = {f"param.{k}": v for k, v in state.model.state_dict().items()}
    names = {id(p): k for k, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if st:
                tensors[f"adam.m.{names[id(p)]}"] = st["exp_avg"]
                tensors[f"adam.v.{names[id(p)]}"] = st["exp_avg_sq"]
    return tensors


def save_state(state: TrainState, path):
    steps = {}
    names = {id(p): k for k, p in state.model.named_parameters()}
    for p, st in state.optimizer.state.items():
        steps[names[id(p)]] = float(st["step"])
    meta = {
        "step": state.step,
        "sum_l_diff": state.sum_l_diff,
        "sum_l_3dc": state.sum_l_3dc,
        "n_gated": state.n_gated,
        "adam_steps": steps,
    }
    save_checkpoint(path, state_tensors(state), state.cfg.to_dict(), meta)


def load_state(path) -> TrainState:
    tensors, config, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(config)
    state = init_state(cfg)
    state.model.load_state_dict({k[len("param.") :]: v for k, v in tensors.items() if k.startswith("param.")})
    params = dict(state.model.named_parameters())
    for name, n_steps in meta.get("adam_steps", {}).items():
        state.optimizer.state[params[name]] = {
            "step": torch.tensor(n_steps),
            "exp_avg": tensors[f"adam.m.{name}"].clone(),
            "exp_avg_sq": tensors[f"adam.v.{name}"].clone(),
        }
    state.step = meta["step"]
    state.sum_l_diff = meta["sum_l_diff"]
    state.sum_l_3dc = meta["sum_l_3dc"]
    state.n_gated = meta["n_gated"]
    return state


def load_model(path) -> VideoDenoiser:
    """Model from a checkpoint, in eval mode."""
    model = load_state(path).model
    model.eval()
    return model


# ------------------------------------------------------------------------ loop


def batch_indices(seed: int, step: int, n_samples: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step, 1)))
    return rng.choice(n_samples, size=min(batch_size, n_samples), replace=False)


def run_training(
    cfg: TrainConfig,
    dataset,
    out_dir=None,
    resume_from=None,
    stop_at: Optional[int] = None,
    progress: bool = False,
):
    """Train for ``cfg.steps`` steps (or until ``stop_at``).

    ``dataset`` is a sequence of VideoSample.  With ``out_dir`` a checkpoint
    is written every ``checkpoint_every`` steps plus ``last.vckp`` at the end,
    and per-step metrics are appended to ``metrics.jsonl``.  Returns
    ``(state, reports)``.
    """
    torch.set_num_threads(1)
    prepared = [prepare(s) for s in dataset]
    if not prepared:
        raise ValueError("dataset is empty")
    state = load_state(resume_from) if resume_from is not None else init_state(cfg)
    cfg = state.cfg if resume_from is not None else cfg
    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.jsonl", "a" if resume_from is not None else "w", encoding="utf-8")
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    reports = []
    t0 = time.perf_counter()
    try:
        while state.step < end:
            idx = batch_indices(cfg.seed, state.step, len(prepared), cfg.batch_size)
            report = train_step(state, [prepared[i] for i in idx])
            reports.append(report)
            if metrics is not None:
                metrics.write(report.to_json(time.perf_counter() - t0) + "\n")
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(state, out / f"step_{state.step:06d}.vckp")
            if progress and state.step % 100 == 0:
                log.info(
                    "step %d  l_diff %.4f  l_3dc %.4f  gate %.3f",
                    state.step,
                    state.mean_l_diff,
                    state.mean_l_3dc,
                    state.gate_fraction,
                )
        if out is not None:
            save_state(state, out / "last.vckp")
    finally:
        if metrics is not None:
            metrics.close()
    return state, reports
