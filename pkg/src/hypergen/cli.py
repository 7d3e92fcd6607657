"""Command-line entry point: ``python3 -m hypergen <command> ...``.

Failures print a single line ``hypergen: error: <ErrorType>: <message>`` to
stderr and exit with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import hypernet_from_checkpoint, load_checkpoint
from .config import TOY_DEFAULTS, TrainConfig, parse_config
from .data import load_mnist
from .hypernet import DEFAULT_HYPERNET, count_params
from .target_net import DEFAULT_ARCH


def _config(args, base: TrainConfig = None) -> TrainConfig:
    base = base or TrainConfig()
    cfg = parse_config(args.config, base) if args.config else base
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args, default: str) -> Path:
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _hypernet(args):
    if not args.checkpoint:
        raise FileNotFoundError("--checkpoint is required")
    return hypernet_from_checkpoint(load_checkpoint(args.checkpoint))


def _eval_data(args):
    data = load_mnist(args.data)
    return data.validation(args.examples)


def _rng(args, stream: int = 0):
    return np.random.default_rng([args.seed if args.seed is not None else 0, stream])


# ------------------------------------------------------------------ commands


def cmd_train_toy(args) -> None:
    from .trainer import GaussianMixture, toy_eval_points, train_toy

    cfg = _config(args, TOY_DEFAULTS).replace(mode="toy")
    if args.mixture:
        cfg = cfg.replace(mixture=args.mixture)
    out = _out(args, "runs/toy")
    mixture = GaussianMixture.load(cfg.mixture) if cfg.mixture else None
    res = train_toy(cfg, mixture, log_path=out / "train_log.csv", checkpoint_path=out / "toy.ckpt")
    mixture = res.extra["mixture"]
    pts = toy_eval_points(res.params, n=cfg.toy_eval_points)
    z = np.linspace(-1, 1, len(pts))
    analysis.write_csv(out / "samples.csv", ["z", "x", "y"], [[float(a), float(b), float(c)]
                                                              for a, (b, c) in zip(z, pts)])
    dist = mixture.mahalanobis_to_means(pts).min(axis=0)
    rows = [[k, float(m[0]), float(m[1]), float(d), int(d <= 0.5)] for k, (m, d) in enumerate(zip(mixture.means, dist))]
    analysis.write_csv(out / "modes.csv", ["component", "mean_x", "mean_y", "min_distance_in_std", "hit"], rows)
    print(f"modes hit: {sum(r[-1] for r in rows)}/{len(rows)}  ({res.seconds:.1f} s)")


def cmd_train_mnist(args) -> None:
    from .trainer import train_mnist

    cfg = _config(args).replace(mode="mnist")
    out = _out(args, "runs/mnist")
    data = load_mnist(args.data)

    def progress(step, row):
        if "val_mean_acc" in row:
            print(f"step {step}: loss {row['total_loss']:.4g} val acc {row['val_mean_acc']:.4f} "
                  f"+- {row['val_std_acc']:.4f}", flush=True)

    res = train_mnist(cfg, data, log_path=out / "train_log.csv", checkpoint_path=out / "hypernet.ckpt",
                      progress=progress if args.verbose else None)
    print(f"trained {cfg.steps} steps in {res.seconds:.1f} s -> {out / 'hypernet.ckpt'}")


def cmd_train_target(args) -> None:
    from .target_net import target_accuracy
    from .trainer import train_target_directly

    cfg = _config(args)
    out = _out(args, "runs/target")
    data = load_mnist(args.data)
    res = train_target_directly(cfg, data, log_path=out / "train_log.csv", checkpoint_path=out / "target.ckpt",
                                max_steps=args.max_steps)
    acc = float(target_accuracy(res.params, data.test_images, data.test_labels))
    analysis.write_csv(out / "accuracy.csv", ["split", "accuracy"], [["test", acc]])
    print(f"held-out accuracy {acc:.4f} ({res.seconds:.1f} s)")


def cmd_sample(args) -> None:
    hp = _hypernet(args)
    theta = analysis.sample_weights(hp, args.count, _rng(args))
    out = Path(args.out or "samples.npy")
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out, theta)
    print(f"wrote {theta.shape[0]} x {theta.shape[1]} weights to {out}")


def cmd_analyze(args) -> None:
    hp = _hypernet(args)
    out = _out(args, "runs/analysis")
    rng = _rng(args)
    if args.what == "hist":
        images, labels = _eval_data(args)
        accs, bins = analysis.accuracy_histogram(hp, images, labels, args.samples, args.bin_width, rng)
        analysis.write_csv(out / "hist_samples.csv", ["sample", "accuracy"], enumerate(accs.tolist()))
        analysis.write_csv(out / "hist_bins.csv", ["bin_start", "bin_end", "count"], bins)
        print(f"mean {accs.mean():.4f} std {accs.std():.4f} over {len(accs)} nets")
    elif args.what == "pca":
        samples = analysis.sample_weights(hp, args.samples, rng)
        res = analysis.pca_scatter(samples, hp.arch.target.layout, args.selector, args.components)
        header = ["sample"] + [f"pc{j + 1}" for j in range(res.projections.shape[1])]
        analysis.write_csv(out / "pca.csv", header, [[i, *map(float, row)] for i, row in enumerate(res.projections)])
        analysis.write_csv(out / "pca_variance.csv", ["component", "explained_variance_ratio"],
                           [[j + 1, float(r)] for j, r in enumerate(res.explained_variance_ratio)])
        print("explained variance ratios: " + " ".join(f"{r:.4f}" for r in res.explained_variance_ratio))
    elif args.what == "paths":
        images, labels = _eval_data(args)
        results = analysis.path_experiment(hp, images, labels, args.pairs, args.steps, rng)
        analysis.write_csv(out / "paths.csv", ["pair", "step", "t", "kind", "accuracy"], analysis.path_rows(results))
        d = np.mean([r["direct"].min() for r in results])
        i = np.mean([r["interpolated"].min() for r in results])
        print(f"mean minimum accuracy: direct {d:.4f} interpolated {i:.4f}")
    elif args.what == "filters":
        path = out / f"filters_l{args.layer}_f{args.index}_c{args.channel}.txt"
        analysis.dump_filter_samples(hp, args.layer, args.index, args.count, args.channel, rng, path)
        print(f"wrote {args.count} samples to {path}")


def cmd_eval(args) -> None:
    hp = _hypernet(args)
    out = _out(args, "runs/eval")
    images, labels = _eval_data(args)
    rng = _rng(args)
    if args.what == "ensemble":
        res = analysis.ensemble_eval(hp, analysis.EnsembleSpec(args.members), images, labels, rng)
        rows = [[k, float(a)] for k, a in enumerate(res["member_accuracies"])]
        rows.append(["ensemble", res["ensemble_accuracy"]])
        analysis.write_csv(out / "ensemble.csv", ["member", "accuracy"], rows)
        print(f"ensemble {res['ensemble_accuracy']:.4f} mean member {res['mean_member_accuracy']:.4f}")
    else:
        eps = [float(e) for e in args.epsilons.split(",")] if args.epsilons else analysis.FGSM_EPSILONS
        res = analysis.adversarial_experiment(hp, images, labels, eps, args.members, rng)
        rows = list(zip(res["epsilon"], res["single"], res["ensemble"]))
        analysis.write_csv(out / "adversarial.csv", ["epsilon", "single_success", "ensemble_success"], rows)
        for e, s, m in rows:
            print(f"eps {e:.2f}: single {s:.4f} ensemble {m:.4f}")


def param_report() -> str:
    counts = DEFAULT_ARCH.layout.weight_counts()
    hc = count_params(DEFAULT_HYPERNET)
    lines = ["target network weights (incl. biases):"]
    lines += [f"  layer {l}: {c}" for l, c in enumerate(counts, start=1)]
    lines.append(f"  total: {sum(counts)}")
    lines.append("hypernetwork parameters:")
    lines += [f"  {name}: {hc[name]}" for name in ("E", "W1", "W2", "W3", "W4")]
    lines.append(f"  batch norm: {hc['batchnorm']}")
    lines.append(f"  total: {hc['total']}")
    return "\n".join(lines)


def cmd_check(args) -> None:
    if args.what == "params":
        print(param_report())
    elif args.what == "grad":
        from .trainer import gradient_check

        res = gradient_check(seed=args.seed or 0)
        print(f"checked {res['coordinates']} coordinates, max relative error {res['max']:.3e}")
        if res["max"] > 1e-4:
            raise ArithmeticError(f"gradient check failed: max relative error {res['max']:.3e}")
    else:
        from .gauge import check_gauge, gauge_fix, random_trivial_symmetry
        from .target_net import init_target_weights, target_forward

        rng = _rng(args)
        worst_out = worst_gauge = 0.0
        x = rng.uniform(0, 1, size=(16,) + DEFAULT_ARCH.input_shape).astype(np.float32)
        for _ in range(args.trials):
            theta = init_target_weights(rng) + rng.normal(0, 0.05, DEFAULT_ARCH.layout.size).astype(np.float32)
            moved = random_trivial_symmetry(rng, theta)
            worst_out = max(worst_out, float(np.abs(target_forward(x, theta).data - target_forward(x, moved).data).max()))
            g1, g2 = gauge_fix(theta), gauge_fix(moved)
            worst_gauge = max(worst_gauge, float(np.abs(g1 - g2).max() / np.abs(g1).max()))
        res = check_gauge(gauge_fix(theta))
        print(f"output deviation {worst_out:.3e}; gauge disagreement {worst_gauge:.3e}; "
              f"residual {res['max_residual']:.3e}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--checkpoint", help="checkpoint file")
    common.add_argument("--out", help="output directory (file for 'sample')")
    common.add_argument("--seed", type=int, default=None, help="RNG seed")
    common.add_argument("--data", default=None, help="MNIST directory (default $HYPERGEN_MNIST_DIR or data/mnist)")

    p = argparse.ArgumentParser(prog="hypergen", description="Hypernetwork that generates diverse MNIST classifiers.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    t = sub.add_parser("train-toy", parents=[common], help="train the 2-D toy generator")
    t.add_argument("--mixture", help="mixture JSON (default: shipped 5-component mixture)")
    t.set_defaults(func=cmd_train_toy)

    t = sub.add_parser("train-mnist", parents=[common], help="train the hypernetwork on MNIST")
    t.add_argument("--verbose", action="store_true", help="print validation metrics while training")
    t.set_defaults(func=cmd_train_mnist)

    t = sub.add_parser("train-target", parents=[common], help="train one target net directly")
    t.add_argument("--max-steps", type=int, default=None)
    t.set_defaults(func=cmd_train_target)

    t = sub.add_parser("sample", parents=[common], help="write generated weight vectors (.npy)")
    t.add_argument("--count", type=int, default=1)
    t.set_defaults(func=cmd_sample)

    a = sub.add_parser("analyze", help="histogram, PCA, paths or filter dumps")
    asub = a.add_subparsers(dest="what", required=True, metavar="analysis")
    h = asub.add_parser("hist", parents=[common], help="accuracy histogram")
    h.add_argument("--samples", type=int, default=100)
    h.add_argument("--bin-width", type=float, default=0.001)
    h.add_argument("--examples", type=int, default=0, help="validation examples (0 = all)")
    h = asub.add_parser("pca", parents=[common], help="PCA scatter of generated weights")
    h.add_argument("--samples", type=int, default=500)
    h.add_argument("--selector", default="all", help="all, layer:L or filter:L:I")
    h.add_argument("--components", type=int, default=2)
    h = asub.add_parser("paths", parents=[common], help="direct vs interpolated paths")
    h.add_argument("--pairs", type=int, default=10)
    h.add_argument("--steps", type=int, default=100)
    h.add_argument("--examples", type=int, default=0)
    h = asub.add_parser("filters", parents=[common], help="dump samples of one filter slice")
    h.add_argument("--layer", type=int, default=1)
    h.add_argument("--index", type=int, default=0)
    h.add_argument("--channel", type=int, default=0)
    h.add_argument("--count", type=int, default=25)
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("eval", help="ensemble or adversarial evaluation")
    esub = e.add_subparsers(dest="what", required=True, metavar="evaluation")
    h = esub.add_parser("ensemble", parents=[common], help="majority-vote ensemble accuracy")
    h.add_argument("--members", type=int, default=50)
    h.add_argument("--examples", type=int, default=0)
    h = esub.add_parser("adversarial", parents=[common], help="targeted FGSM success rates")
    h.add_argument("--members", type=int, default=25)
    h.add_argument("--examples", type=int, default=1000)
    h.add_argument("--epsilons", default="", help="comma-separated grid (default 0 to 0.24 step 0.02)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="self checks")
    csub = c.add_subparsers(dest="what", required=True, metavar="check")
    csub.add_parser("params", parents=[common], help="parameter-count report")
    csub.add_parser("grad", parents=[common], help="finite-difference gradient check (64-bit)")
    h = csub.add_parser("gauge", parents=[common], help="symmetry and gauge-fixing check")
    h.add_argument("--trials", type=int, default=20)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        msg = " ".join(str(exc).split())
        print(f"hypergen: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0
