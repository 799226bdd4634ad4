"""Train the toy video denoiser twice, once with the view-consistency term and
once without, then compare feature correspondence and the 3D consistency of
sampled videos.

The defaults match the settings the acceptance tests use and take roughly
a quarter of an hour on one CPU core.  ``--steps 200`` gives a quick smoke run.

    python demos/03_train_with_and_without.py --steps 2000
"""

import argparse
import time

from mvconsist.corresploss import LossConfig
from mvconsist.evaluation import evaluate_model
from mvconsist.model import DenoiserConfig
from mvconsist.scenegen import random_sample
from mvconsist.train import TrainConfig, run_training


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lam", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-videos", type=int, default=64)
    ap.add_argument("--test-videos", type=int, default=8)
    args = ap.parse_args()

    train = [random_sample(1000 + i) for i in range(args.train_videos)]
    test = [random_sample(5000 + i) for i in range(args.test_videos)]
    rows = []
    for lam in (0.0, args.lam):
        cfg = TrainConfig(
            lam=lam,
            seed=args.seed,
            steps=args.steps,
            batch_size=1,
            lr=5e-4,
            checkpoint_every=0,
            model=DenoiserConfig(),
            loss=LossConfig(),
        )
        start = time.perf_counter()
        state, reports = run_training(cfg, train)
        gated = [r.l_3dc for r in reports if r.l_3dc is not None]
        print(f"lam={lam}: {args.steps} steps in {time.perf_counter() - start:.0f}s, gate on {state.gate_fraction:.0%} of steps")
        if gated:
            k = max(1, len(gated) // 10)
            print(f"  consistency loss {sum(gated[:k]) / k:.3f} early -> {sum(gated[-k:]) / k:.3f} late")
        rows.append(evaluate_model(state.model, test, tag=f"lam={lam}", sample_steps=25, reinject=cfg.gate))

    print(f"\n{'':10s} {'recall %':>9s} {'reproj err':>11s} {'PSNR':>7s} {'SSIM':>6s}")
    for r in rows:
        print(f"{r.tag:10s} {r.recall:9.1f} {r.reprojection_error:11.4f} {r.psnr:7.2f} {r.ssim:6.3f}")


if __name__ == "__main__":
    main()
