"""Benchmark command-line interface.

Subcommands: grid, sigma-sweep, neigh-stats, gradcheck, train, eval.
Common flags: --config PATH, --out DIR, --seeds LIST, --threads N.
PNE_DETERMINISTIC=1 makes every CSV byte-identical across reruns.
"""

import argparse
import os
import sys

from . import bench
from .config import ExperimentConfig, load_config, resolve_experiment
from .errors import ConfigError, ParseError
from .gradcheck import format_report, gradient_check_report
from .network import load_params, save_params
from .training import _evaluate, train_loop


def _load_experiment(args):
    if args.config is None:
        cfg = ExperimentConfig()
    else:
        cfg = resolve_experiment(load_config(args.config))
    if args.seeds is not None:
        cfg.seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    return cfg


def _add_common(parser):
    parser.add_argument("--config", default=None, help="experiment config file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seeds", default=None, help="comma-separated seed list")
    parser.add_argument("--threads", type=int, default=1, help="parallel grid cells")


def cmd_grid(args):
    cfg = _load_experiment(args)
    csv_path, _ = bench.cmd_grid(cfg, args.out, threads=args.threads)
    print(csv_path)
    return 0


def cmd_sigma_sweep(args):
    cfg = _load_experiment(args)
    csv_path, _ = bench.cmd_sigma_sweep(cfg, args.out)
    print(csv_path)
    return 0


def cmd_neigh_stats(args):
    cfg = _load_experiment(args)
    csv_path, _ = bench.cmd_neighborhood_stats(cfg, args.out)
    print(csv_path)
    return 0


def cmd_gradcheck(args):
    rows = gradient_check_report()
    print(format_report(rows))
    return 0 if all(r.passed for r in rows) else 1


def cmd_train(args):
    cfg = _load_experiment(args)
    emb = args.embedding or cfg.embeddings[0]
    neigh = args.neighborhood or cfg.neighborhoods[0]
    seed = cfg.seeds[0]
    os.makedirs(args.out, exist_ok=True)
    segmentation = cfg.task == "segmentation"
    model = bench._build_model(cfg, emb, neigh, seed)
    train_raw, test_raw = bench.build_datasets(cfg)
    train = bench.prepare_dataset(model, train_raw, segmentation)
    test = bench.prepare_dataset(model, test_raw, segmentation)
    params, log = train_loop(
        model, train, test, bench.train_config(cfg), num_classes=4, seed=seed,
        log_path=os.path.join(args.out, "log.csv"), segmentation=segmentation,
    )
    save_params(os.path.join(args.out, "model.bin"), params)
    final = log[-1]
    print(f"oa={final['eval_oa']:.6f} macc={final['eval_macc']:.6f} "
          f"miou={final['eval_miou']:.6f}")
    return 0


def cmd_eval(args):
    cfg = _load_experiment(args)
    emb = args.embedding or cfg.embeddings[0]
    neigh = args.neighborhood or cfg.neighborhoods[0]
    segmentation = cfg.task == "segmentation"
    model = bench._build_model(cfg, emb, neigh, seed=cfg.seeds[0])
    saved = load_params(args.params)
    params = model.params()
    missing = set(params) ^ set(saved)
    if missing:
        raise SystemExit(f"parameter mismatch: {sorted(missing)[:5]}")
    for name, p in params.items():
        if saved[name].shape != p.shape:
            raise SystemExit(
                f"shape mismatch for {name}: saved {saved[name].shape}, "
                f"model {p.shape}")
        p[...] = saved[name]
    _, test_raw = bench.build_datasets(cfg)
    test = bench.prepare_dataset(model, test_raw, segmentation)
    oa, macc, miou = _evaluate(model, test, num_classes=4, segmentation=segmentation)
    print(f"oa={oa:.6f} macc={macc:.6f} miou={miou:.6f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="pne", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    handlers = {
        "grid": (cmd_grid, "run the embedding x neighborhood benchmark grid"),
        "sigma-sweep": (cmd_sigma_sweep, "accuracy across kernel-width factors"),
        "neigh-stats": (cmd_neigh_stats, "receptive-field variance per pyramid level"),
        "gradcheck": (cmd_gradcheck, "verify all analytic gradients"),
        "train": (cmd_train, "train one model, save parameters and log"),
        "eval": (cmd_eval, "evaluate saved parameters on the test set"),
    }
    for name, (fn, help_text) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name in ("train", "eval"):
            p.add_argument("--embedding", default=None)
            p.add_argument("--neighborhood", default=None)
        if name == "eval":
            p.add_argument("--params", required=True, help="model.bin path")
        p.set_defaults(handler=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
