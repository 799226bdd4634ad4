"""Command-line entry point: ``mvconsist <subcommand>``.

Subcommands write into an output directory that must not exist yet (pass
``--force`` to replace it).  Exit status is 0 on success, 1 on a runtime
failure and 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import subprocess
import sys
import time
import uuid
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

log = logging.getLogger("mvconsist")

RUNS_ENV = "VICODR_RUNS"
METRICS = ("recall", "reproj", "psnr", "ssim")


class UsageError(Exception):
    """Bad flags, bad config or an output collision (exit status 2)."""


@dataclass
class DataConfig:
    size: int = 64
    n_frames: int = 8
    fov_deg: float = 60.0
    split: str = "train"

    def __post_init__(self):
        if self.size < 8 or self.size % 4:
            raise ValueError("size must be a multiple of 4 and at least 8")
        if self.n_frames < 2:
            raise ValueError("need at least two frames")


@dataclass
class RunManifest:
    run_id: str
    command: list
    config: dict
    started: float
    finished: Optional[float] = None
    revision: Optional[str] = None
    artifacts: dict = field(default_factory=dict)

    def write(self, out: Path):
        tmp = out / "run.json.tmp"
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, out / "run.json")

    def finalize(self, out: Path):
        self.finished = time.time()
        self.artifacts = {
            str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*")) if p.is_file() and p.name != "run.json"
        }
        self.write(out)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _revision() -> Optional[str]:
    try:
        res = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None if res.returncode == 0 else None


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def _prepare_out(out: Optional[str], kind: str, force: bool) -> Path:
    path = Path(out) if out else runs_root() / f"{kind}-{time.strftime('%Y%m%d-%H%M%S')}"
    if path.exists():
        if not force:
            raise UsageError(f"{path} already exists; pass --force to overwrite")
        shutil.rmtree(path) if path.is_dir() else path.unlink()
    path.mkdir(parents=True)
    return path


def _start(out: Path, config: dict) -> RunManifest:
    man = RunManifest(uuid.uuid4().hex[:12], sys.argv[:], config, time.time(), revision=_revision())
    man.write(out)
    return man


def _parse_set(pairs) -> dict:
    """``a.b=value`` overrides into a nested dict; values are parsed as YAML."""
    import yaml

    out: dict = {}
    for item in pairs or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def _merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for k, v in extra.items():
        merged[k] = _merge(merged[k], v) if isinstance(v, dict) and isinstance(merged.get(k), dict) else v
    return merged


def _read_yaml(path) -> dict:
    import yaml

    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except yaml.YAMLError as err:
        raise UsageError(f"cannot parse {path}: {err}") from None
    if data is not None and not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    return data or {}


def _save_png(path: Path, img: np.ndarray):
    from PIL import Image

    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> None:
    from .scenegen import random_sample, write_dataset

    data = _read_yaml(args.config) if args.config else {}
    known = {f.name for f in fields(DataConfig)}
    for key in data:
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
    try:
        cfg = DataConfig(**data)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid data config: {err}") from None
    if args.count < 1:
        raise UsageError("--count must be positive")
    out = _prepare_out(args.out, "data", args.force)
    man = _start(out, {"data": asdict(cfg), "count": args.count, "seed": args.seed})
    seeds = [int(np.random.SeedSequence(args.seed, spawn_key=(k,)).generate_state(1)[0]) for k in range(args.count)]
    samples = (random_sample(s, size=cfg.size, n_frames=cfg.n_frames, fov_deg=cfg.fov_deg) for s in seeds)
    write_dataset(samples, out, split=cfg.split, seeds=seeds)
    man.finalize(out)
    log.info("wrote %d samples to %s", args.count, out / cfg.split)


def _load_samples(path, split, prefer=("train", "test")):
    from .scenegen import read_dataset

    if split is None:
        split = next((name for name in prefer if (Path(path) / name / "manifest.json").is_file()), prefer[0])
    try:
        reader = read_dataset(path, split)
    except FileNotFoundError as err:
        raise UsageError(str(err)) from None
    if len(reader) == 0:
        raise UsageError(f"dataset {path} is empty")
    return reader


def cmd_train(args) -> None:
    from .train import ConfigError, TrainConfig, run_training

    raw = _read_yaml(args.config) if args.config else {}
    raw = _merge(raw, _parse_set(args.set))
    try:
        cfg = TrainConfig.from_dict(raw)
    except ConfigError as err:
        raise UsageError(str(err)) from None
    reader = _load_samples(args.data, args.split)
    out = _prepare_out(args.out, "train", args.force)
    import yaml

    (out / "config.yaml").write_text(yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=True), "utf-8")
    man = _start(out, {"train": cfg.to_dict(), "data": str(Path(args.data).resolve())})
    state, _ = run_training(cfg, list(reader), out_dir=out, progress=True)
    man.finalize(out)
    log.info("finished %d steps; gate-on fraction %.3f", state.step, state.gate_fraction)


def _load_checkpoint_state(path):
    from .model import CheckpointError
    from .train import load_state

    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    try:
        state = load_state(path)
    except CheckpointError as err:
        raise RuntimeError(f"cannot read checkpoint {path}: {err}") from None
    state.model.eval()
    return state


def cmd_eval(args) -> None:
    from .evaluation import CorrEvalConfig, evaluate_model

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad or not metrics:
        raise UsageError(f"unknown metric(s) {bad}; choose from {','.join(METRICS)}")
    state = _load_checkpoint_state(args.checkpoint)
    gate = state.cfg.gate if args.reinject_gate is None else args.reinject_gate
    reader = _load_samples(args.data, args.split, prefer=("test", "train"))
    out = _prepare_out(args.out, "eval", args.force)
    ecfg = CorrEvalConfig(n_queries=args.queries)
    config = {"checkpoint": str(Path(args.checkpoint).resolve()), "metrics": metrics, "eval": ecfg.to_dict(), "reinject_gate": gate}
    man = _start(out, config)
    samples = [reader[k] for k in range(min(len(reader), args.limit or len(reader)))]
    tag = args.tag or Path(args.checkpoint).resolve().parent.name
    rec = evaluate_model(
        state.model, samples, tag=tag, metrics=metrics, cfg=ecfg, sample_steps=args.sample_steps, seed=args.seed, reinject=gate
    )
    (out / "eval.json").write_text(json.dumps(rec.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    man.finalize(out)
    log.info("recall %s  reprojection error %s  psnr %s  ssim %s", rec.recall, rec.reprojection_error, rec.psnr, rec.ssim)


def _collect_records(roots) -> list:
    records = []
    for root in roots:
        root = Path(root)
        hits = [root / "eval.json"] if (root / "eval.json").is_file() else sorted(root.rglob("eval.json"))
        for p in hits:
            rec = json.loads(p.read_text(encoding="utf-8"))
            rec["path"] = str(p)
            records.append(rec)
    return records


def cmd_analyze(args) -> None:
    from .evaluation import plcc, srcc

    roots = args.runs or [runs_root()]
    records = [r for r in _collect_records(roots) if r.get("recall") is not None and r.get("reprojection_error") is not None]
    if len(records) < 3:
        raise RuntimeError(f"need at least 3 evaluated runs with recall and reprojection error, found {len(records)}")
    out = _prepare_out(args.out, "analyze", args.force)
    man = _start(out, {"runs": [str(r) for r in roots]})
    with open(out / "scatter.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["tag", "recall", "reprojection_error", "psnr", "ssim", "path"])
        for r in records:
            w.writerow([r["tag"], r["recall"], r["reprojection_error"], r.get("psnr"), r.get("ssim"), r["path"]])
    xs = [r["recall"] for r in records]
    ys = [r["reprojection_error"] for r in records]
    summary = {"n_runs": len(records), "plcc": plcc(xs, ys), "srcc": srcc(xs, ys)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    man.finalize(out)
    log.info("%d runs  PLCC %.3f  SRCC %.3f", summary["n_runs"], summary["plcc"], summary["srcc"])


def cmd_viz(args) -> None:
    from .evaluation import CorrEvalConfig, extract_features, pca_feature_map, reprojection_error
    from .model import sample_video

    state = _load_checkpoint_state(args.checkpoint)
    model = state.model
    reader = _load_samples(args.data, args.split, prefer=("test", "train"))
    if not 0 <= args.sample < len(reader):
        raise UsageError(f"--sample must be in [0, {len(reader) - 1}]")
    sample = reader[args.sample]
    out = _prepare_out(args.out, "viz", args.force)
    man = _start(out, {"checkpoint": str(Path(args.checkpoint).resolve()), "sample": args.sample})
    feats = extract_features(sample, model, CorrEvalConfig(), seed=args.seed).values.numpy()
    n = feats.shape[0]
    for j in range(1, n):
        imgs, ratio = pca_feature_map(feats[[0, j]])
        _save_png(out / f"pca_0_{j}.png", np.concatenate([sample.frames[0], sample.frames[j], imgs[0], imgs[1]], 1))
        log.info("pair (0, %d): PCA explained variance %.3f", j, ratio)
    video = sample_video(model, sample.cameras, sample.frames[0], steps=args.sample_steps, seed=args.seed, reinject=state.cfg.gate)
    err, maps = reprojection_error(video, sample, return_maps=True)
    maps = [np.nan_to_num(m) for m in maps]  # unmatched pixels are NaN
    top = max(float(np.max(m)) for m in maps) or 1.0
    heat = np.concatenate([np.repeat((m / top)[..., None], 3, -1) for m in maps], 1)
    _save_png(out / "reprojection_error.png", np.concatenate([np.concatenate(list(video[:-1]), 1), heat], 0))
    man.finalize(out)
    log.info("reprojection error %.4f", err)


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvconsist", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_data=True):
        sp.add_argument("--out", help=f"output directory (default: under ${RUNS_ENV} or ./runs)")
        sp.add_argument("--force", action="store_true", help="replace an existing output directory")
        if with_data:
            sp.add_argument("--data", required=True, help="dataset directory")
            sp.add_argument("--split", default=None)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(g, with_data=False)
    g.add_argument("--config")
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser")
    common(t)
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. lam=0.5")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--metrics", default=",".join(METRICS))
    e.add_argument("--queries", type=int, default=1024)
    e.add_argument("--sample-steps", type=int, default=50)
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--tag", default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument(
        "--reinject-gate", type=float, default=None, help="apply reinjection while sampling when t/T <= G (default: training gate)"
    )
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="correlate recall and reprojection error across runs")
    common(a, with_data=False)
    a.add_argument("--runs", nargs="+", help=f"run directories (default: ${RUNS_ENV})")
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("viz", help="PCA feature maps and reprojection heatmaps")
    common(v)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--sample", type=int, default=0)
    v.add_argument("--sample-steps", type=int, default=50)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (FileNotFoundError, RuntimeError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
