"""``lightaug`` command line.

Subcommands: synth, train-gan, transfer, train-detector, evaluate,
ablate-ratio, compare, plot.  Global flags select the profile, an optional
YAML config, the seed and the output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import config as C
from . import datasets as ds
from . import experiments as X
from .detector import load_detector
from .transfer import TransferManifest

log = logging.getLogger("lightaug")


def _paths(cfg):
    return X.synthetic_layout(Path(cfg["out"]) / "data")


def cmd_synth(cfg, args):
    root = Path(args.root) if args.root else Path(cfg["out"]) / "data"
    lay = X.prepare_synthetic(cfg, root)
    print(lay.root)
    return 0


def cmd_train_gan(cfg, args):
    lay = _paths(cfg)
    dx = Path(args.domain_x or cfg["paths"]["domain_x"] or lay.gan_bright)
    dy = Path(args.domain_y or cfg["paths"]["domain_y"] or lay.gan_dark)
    C.require(dx, "domain X directory")
    C.require(dy, "domain Y directory")
    ckpt = X.train_gan(cfg, dx, dy, Path(cfg["out"]) / "gan")
    print(ckpt)
    return 0


def cmd_transfer(cfg, args):
    lay = _paths(cfg)
    ckpt = C.require(Path(args.checkpoint) if args.checkpoint
                     else C.resolve_path(cfg, "gan_checkpoint", "gan/gan.pt"), "GAN checkpoint")
    sources = C.require(Path(args.sources or cfg["paths"]["transfer_sources"] or lay.train),
                        "transfer source list")
    manifest = X.run_transfer(ckpt, sources, Path(cfg["out"]) / "transfer",
                              cfg["data"]["num_lanes"])
    skipped = len(manifest.records) - len(manifest.converted)
    print(f"{Path(cfg['out']) / 'transfer' / 'manifest.tsv'} "
          f"({len(manifest.converted)} converted, {skipped} skipped)")
    return 0


def _lists(cfg, args):
    lay = _paths(cfg)
    n = cfg["data"]["num_lanes"]
    train = C.require(Path(getattr(args, "train_list", None) or cfg["paths"]["train_list"]
                           or lay.train), "training list")
    val = C.require(Path(getattr(args, "val_list", None) or cfg["paths"]["val_list"] or lay.val),
                    "validation list")
    return ds.load_train_list(train, n), ds.load_train_list(val, n)


def _manifest(cfg, args) -> TransferManifest:
    path = Path(getattr(args, "manifest", None)
                or C.resolve_path(cfg, "manifest", "transfer/manifest.tsv"))
    return TransferManifest.read(C.require(path, "transfer manifest"))


def _test(cfg, args):
    lay = _paths(cfg)
    root = C.require(Path(getattr(args, "test_root", None) or cfg["paths"]["test_root"]
                          or lay.test_root), "test root")
    index = C.require(Path(getattr(args, "index", None) or cfg["paths"]["category_index"]
                           or root / "index.tsv"), "category index")
    return root, index


def run_header(cfg) -> dict:
    t = cfg["train"]
    return {"profile": cfg["profile"], "seed": cfg["seed"], "epochs": t["epochs"],
            "batch_size": t["batch_size"], "lr": t["lr"], "optimizer": "SGD",
            "momentum": t["momentum"], "input_size": t["input_size"],
            "lambda_1": cfg["loss"]["lambda_1"], "lambda_2": cfg["loss"]["lambda_2"]}


def cmd_train_detector(cfg, args):
    real, val = _lists(cfg, args)
    out = Path(cfg["out"]) / "detector"
    entries = real
    if args.ratio_n is not None:
        entries = X.augmented_entries(cfg, real, _manifest(cfg, args), cfg["ratio_n"],
                                      cfg["seed"], out / "train.txt")
        print(f"augmented list: {len(real)} real + {len(entries) - len(real)} generated")
    print(json.dumps({"run": run_header(cfg)}))
    run = X.fit_detector(cfg, entries, val, cfg["seed"], out)
    for rec in run.history:
        print(json.dumps(rec))
    print(run.checkpoint)
    return 0


def cmd_evaluate(cfg, args):
    ckpt = C.require(Path(args.checkpoint) if args.checkpoint
                     else C.resolve_path(cfg, "detector_checkpoint", "detector/detector.pt"),
                     "detector checkpoint")
    root, index = _test(cfg, args)
    model, _ = load_detector(ckpt)
    report = X.evaluate_model(model, cfg, root, index, Path(cfg["out"]) / "eval")
    print(report.format_table(), end="")
    return 0


def cmd_ablate_ratio(cfg, args):
    values = args.n_values or cfg["ablate"]["n_values"]
    real, val = _lists(cfg, args)
    root, index = _test(cfg, args)
    reports = X.ablate_ratio(cfg, values, real, val, _manifest(cfg, args), root, index,
                             Path(cfg["out"]) / "ablate")
    from .evaluator import format_grid
    print(format_grid(reports), end="")
    return 0


def cmd_compare(cfg, args):
    seeds = args.seeds or cfg["compare"]["seeds"]
    real, val = _lists(cfg, args)
    root, index = _test(cfg, args)
    results = X.compare_arms(cfg, seeds, real, val, _manifest(cfg, args), root, index,
                             Path(cfg["out"]) / "compare")
    cat = args.category
    print(f"{'seed':>6} {'baseline':>10} {'augmented':>10}   ({cat} F1)")
    for r in results:
        b, a = r.f1(cat)
        print(f"{r.seed:>6} {100 * b:>10.1f} {100 * a:>10.1f}")
    return 0


def cmd_plot(cfg, args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.output or Path(cfg["out"]) / "plots")
    out.mkdir(parents=True, exist_ok=True)
    inputs = [C.require(Path(p), "log file") for p in args.logs]
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in inputs:
        recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        label = args.labels[inputs.index(path)] if args.labels else path.parent.name
        if recs and "val_miou" in recs[0]:
            ax.plot([r["epoch"] for r in recs], [r["val_miou"] for r in recs], marker="o",
                    label=label)
            ax.set_ylabel("validation mIoU")
        else:
            for key in ("g_total", "cycle", "d_a", "d_b"):
                ax.plot([r["epoch"] for r in recs], [r[key] for r in recs], label=f"{label}:{key}")
            ax.set_ylabel("loss")
    ax.set_xlabel("epoch")
    ax.legend()
    fig.tight_layout()
    target = out / (args.name + ".png")
    fig.savefig(target, dpi=120)
    plt.close(fig)
    print(target)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lightaug", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML file overriding profile keys")
    p.add_argument("--profile", default="desk", choices=C.PROFILES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render the synthetic light/dark dataset")
    s.add_argument("--root", help="dataset directory (default OUT/data)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-gan", help="train the light-condition translator")
    s.add_argument("--domain-x", help="well-lit image directory")
    s.add_argument("--domain-y", help="low-light image directory")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_gan)

    s = sub.add_parser("transfer", help="convert well-lit training images to low light")
    s.add_argument("--checkpoint")
    s.add_argument("--sources", help="training list of well-lit source images")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("train-detector", help="train the lane detector")
    s.add_argument("--train-list")
    s.add_argument("--val-list")
    s.add_argument("--ratio-n", type=float, help="add N x (low-light count) generated images")
    s.add_argument("--manifest")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_detector)

    s = sub.add_parser("evaluate", help="decode and score a detector checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--test-root")
    s.add_argument("--index", help="path<TAB>category file")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate-ratio", help="sweep the generated:real ratio N")
    s.add_argument("--n-values", type=float, nargs="+")
    s.add_argument("--train-list")
    s.add_argument("--val-list")
    s.add_argument("--manifest")
    s.add_argument("--test-root")
    s.add_argument("--index")
    s.set_defaults(func=cmd_ablate_ratio)

    s = sub.add_parser("compare", help="baseline vs augmented detector over several seeds")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--category", default="Night")
    s.add_argument("--train-list")
    s.add_argument("--val-list")
    s.add_argument("--manifest")
    s.add_argument("--test-root")
    s.add_argument("--index")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("plot", help="plot metric or loss logs (jsonl) to a PNG")
    s.add_argument("logs", nargs="+")
    s.add_argument("--labels", nargs="+")
    s.add_argument("--name", default="curves")
    s.add_argument("--output", help="directory (default OUT/plots)")
    s.set_defaults(func=cmd_plot)
    return p


def cli_overrides(args) -> dict:
    o: dict = {"seed": args.seed, "out": args.out}
    if getattr(args, "epochs", None) is not None:
        o["gan" if args.command == "train-gan" else "train"] = {"epochs": args.epochs}
    if getattr(args, "ratio_n", None) is not None:
        o["ratio_n"] = args.ratio_n
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.build_config(args.profile, args.config, cli_overrides(args))
        X.set_threads(1)
        torch.use_deterministic_algorithms(True)
        return args.func(cfg, args)
    except (C.ConfigError, FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"lightaug {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
