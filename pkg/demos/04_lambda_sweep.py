"""Drive the command line tool end to end: render a dataset, train one model per
loss weight, evaluate each, and correlate recall with reprojection error.

Everything lands in ``--root`` as ordinary run directories, so the same steps
can be repeated by hand with the ``mvconsist`` command.

    python demos/04_lambda_sweep.py --root sweep --steps 300
"""

import argparse
import json
from pathlib import Path

from mvconsist.cli import main as cli


def run(*argv):
    print("$ mvconsist " + " ".join(argv))
    code = cli(list(argv))
    if code != 0:
        raise SystemExit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="sweep")
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--count", type=int, default=32)
    args = ap.parse_args()
    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)

    # held-out videos go to their own directory under the "test" split name
    run("gen-data", "--out", str(root / "train_data"), "--count", str(args.count), "--seed", "0", "--force")
    (root / "test_data.yaml").write_text("split: test\n", encoding="utf-8")
    run("gen-data", "--config", str(root / "test_data.yaml"), "--out", str(root / "test_data"), "--count", "6", "--seed", "1", "--force")

    for lam in (0.0, 0.1, 0.2, 0.5, 1.0):
        run_dir = root / "runs" / f"lam{lam}"
        run(
            "train", "--data", str(root / "train_data"), "--out", str(run_dir), "--force",
            "--set", f"lam={lam}", "--set", f"steps={args.steps}", "--set", "batch_size=1", "--set", "lr=5e-4",
        )  # fmt: skip
        run(
            "eval", "--checkpoint", str(run_dir / "last.vckp"), "--data", str(root / "test_data"),
            "--out", str(run_dir / "eval"), "--sample-steps", "25", "--tag", f"lam={lam}", "--force",
        )  # fmt: skip

    run("analyze", "--runs", str(root / "runs"), "--out", str(root / "analysis"), "--force")
    print(json.dumps(json.loads((root / "analysis" / "summary.json").read_text()), indent=2))
    print(f"per-run numbers: {root / 'analysis' / 'scatter.csv'}")


if __name__ == "__main__":
    main()
