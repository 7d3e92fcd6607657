"""Train the models the acceptance suite reads from .cache/acceptance.

    python3 scripts/train_acceptance_models.py [lam1e3 lam1e5 target]

Run it on an otherwise idle machine: the suite checks the recorded wall time.
"""

import argparse
import sys
from pathlib import Path

from hypergen.config import parse_config
from hypergen.data import load_mnist
from hypergen.trainer import train_mnist, train_target_directly

ROOT = Path(__file__).resolve().parents[1]
JOBS = {
    "lam1e3": ("mnist.cfg", train_mnist),
    "lam1e5": ("mnist_lam1e5.cfg", train_mnist),
    "target": ("target.cfg", train_target_directly),
}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("jobs", nargs="*", default=list(JOBS), choices=list(JOBS))
    p.add_argument("--data", default=None, help="MNIST directory")
    p.add_argument("--cache", default=str(ROOT / ".cache" / "acceptance"))
    args = p.parse_args(argv)
    data = load_mnist(args.data)
    for name in args.jobs:
        cfg_name, train = JOBS[name]
        cfg = parse_config(ROOT / "configs" / cfg_name)
        out = Path(args.cache) / name
        out.mkdir(parents=True, exist_ok=True)

        def progress(step, row):
            if "val_mean_acc" in row:
                print(f"[{name}] step {step}: val acc {row['val_mean_acc']:.4f} +- {row['val_std_acc']:.4f}",
                      flush=True)

        kwargs = {"progress": progress} if train is train_mnist else {}
        res = train(cfg, data, log_path=out / "train_log.csv", checkpoint_path=out / "model.ckpt", **kwargs)
        print(f"[{name}] done in {res.seconds / 60:.1f} min", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
