"""Command-line entry points.

Subcommands: ``train``, ``eval``, ``bench``, ``gradcheck``, ``ablate``.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.  Seeds
resolve as ``--seed`` flag > ``CSN_SEED`` env var > ``train.seed`` config.
Report-writing commands render a matplotlib figure next to each delimited
output file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import config as configmod
from . import figures
from .autodiff import counters
from .errors import ConfigError, CsnError, NumericError, OracleInvalidError, SamplerError, UsageError
from .gradcheck import check_primitive_ops, finite_diff_check
from .models import (build_model, episode_loss, extract_episode_info, load_model,
                     spec_from_config)
from .sources import ClozeSource, GaussianSource, ImageFolderSource, sample_episode
from .training import TrainerConfig, TrainingAbort, evaluate, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

PRIMITIVE_TOL = 1e-5
PIPELINE_TOL = 1e-4


def _auto_splits(cfg: dict) -> tuple:
    kind = cfg["source.kind"]
    train, val, test = (cfg["source.train_classes"], cfg["source.val_classes"],
                        cfg["source.test_classes"])
    if kind == "cloze":
        pool = cfg["source.pool"]
        chunk = max(1, pool // 5)
        defaults = (pool - 2 * chunk, chunk, chunk)
    elif kind == "omniglot":
        defaults = (30, 0, 10)
    else:
        defaults = (30, 10, 10)
    return tuple(d if v < 0 else v for v, d in zip((train, val, test), defaults))


def build_source(cfg: dict):
    kind = cfg["source.kind"]
    train, val, test = _auto_splits(cfg)
    if kind == "gaussian":
        return GaussianSource(cfg["source.classes"], cfg["source.dim"], cfg["source.noise"],
                              seed=cfg["source.seed"], train=train, val=val, test=test)
    if kind == "omniglot":
        if not cfg["source.dir"]:
            raise ConfigError("source.dir must point at the dataset directory")
        return ImageFolderSource(cfg["source.dir"], image_size=cfg["source.image_size"],
                                 rotations=cfg["source.rotations"],
                                 train=train, val=val, test=test)
    return ClozeSource(cfg["source.vocab"], cfg["source.sentence_len"], cfg["source.pool"],
                       seed=cfg["source.seed"], template_noise=cfg["source.template_noise"],
                       train=train, val=val, test=test)


def load_run_config(path, seed_flag=None) -> dict:
    cfg = configmod.resolve(configmod.parse_file(path))
    if seed_flag is not None:
        cfg["train.seed"] = seed_flag
    elif os.environ.get("CSN_SEED"):
        try:
            cfg["train.seed"] = int(os.environ["CSN_SEED"])
        except ValueError:
            raise ConfigError(f"CSN_SEED must be an integer, got '{os.environ['CSN_SEED']}'")
    return cfg


def trainer_config(cfg: dict) -> TrainerConfig:
    return TrainerConfig(
        optimizer=cfg["train.optimizer"],
        lr=cfg["train.lr"],
        momentum=cfg["train.momentum"],
        clip=cfg["train.clip"],
        clip_kind=cfg["train.clip_kind"],
        episodes=cfg["train.episodes"],
        val_interval=cfg["train.val_interval"],
        val_episodes=cfg["train.val_episodes"],
        seed=cfg["train.seed"],
        way=cfg["episode.way"],
        shots=cfg["episode.shots"],
        queries_per_class=cfg["episode.queries_per_class"],
    )


def _prepare(cfg_path, seed_flag):
    """Config -> (finalized cfg, source, model spec)."""
    cfg = load_run_config(cfg_path, seed_flag)
    source = build_source(cfg)
    cfg = configmod.finalize(cfg, source.meta())
    return cfg, source, spec_from_config(cfg)


def cmd_train(args) -> int:
    cfg, source, spec = _prepare(args.config, args.seed)
    if args.episodes is not None:
        cfg["train.episodes"] = args.episodes
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved.config"), "w", encoding="utf-8") as fh:
        fh.write(configmod.to_text(cfg))
    model = build_model(spec, seed=cfg["train.seed"])
    metrics_path = os.path.join(args.out, "metrics.jsonl")
    checkpoint = os.path.join(args.out, "best.model")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        def on_record(record):
            fh.write(json.dumps(record) + "\n")
            fh.flush()

        records = train(model, source, trainer_config(cfg),
                        checkpoint_path=checkpoint, on_record=on_record)
    figures.training_curves(records, os.path.join(args.out, "training_curves.png"))
    print(f"trained {cfg['train.episodes']} episodes; wrote {metrics_path} and {checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, source, spec = _prepare(args.config, args.seed)
    model = load_model(args.model, expected_spec=spec)
    episodes = args.episodes if args.episodes is not None else cfg["eval.episodes"]
    report = evaluate(model, source, args.split, episodes, cfg["episode.way"],
                      cfg["episode.shots"], cfg["episode.queries_per_class"],
                      seed=cfg["train.seed"])
    print(json.dumps(report.to_json_dict()))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(), fh, indent=2)
            fh.write("\n")
        figures.accuracy_histogram(report.accuracies, report.mean,
                                   os.path.join(args.out, "accuracy_hist.png"))
    return EXIT_OK


def _bench_mode(cfg: dict, source, mode: str, episodes: int, warmup: int) -> dict:
    """Time describe+predict episodes for one conditioning mode."""
    bench_cfg = dict(cfg)
    bench_cfg["cond.mode"] = mode
    if mode == "df" and bench_cfg["ablation.value_fn"] == "scalar_lambda":
        bench_cfg["ablation.value_fn"] = "mlp3"
    if mode == "grad" and bench_cfg["ablation.value_fn"] == "perceptron1":
        bench_cfg["ablation.value_fn"] = "mlp3"
    spec = spec_from_config(bench_cfg)
    model = build_model(spec, seed=cfg["train.seed"])
    streams = np.random.SeedSequence(cfg["train.seed"]).spawn(warmup + episodes)
    wall, cond = [], []
    counters.reset()
    backward_before = counters.backward_traversals
    n_desc = cfg["episode.way"] * cfg["episode.shots"]
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        episode = sample_episode(source, "train", cfg["episode.way"], cfg["episode.shots"],
                                 cfg["episode.queries_per_class"], rng)
        if i == warmup:
            backward_before = counters.backward_traversals
        t0 = time.perf_counter()
        _, stats = episode_loss(model, episode)
        elapsed = (time.perf_counter() - t0) * 1e3
        if i >= warmup:
            wall.append(elapsed)
            cond.append(stats["cond_ms"])
    traversals = counters.backward_traversals - backward_before
    return {
        "median_ms": float(np.median(wall)),
        "p95_ms": float(np.percentile(wall, 95)),
        "cond_median_ms": float(np.median(cond)),
        "cond_p95_ms": float(np.percentile(cond, 95)),
        "backward_traversals_per_episode": traversals / episodes,
        "expected_backward_traversals_per_episode": float(n_desc) if mode == "grad" else 0.0,
    }


def cmd_bench(args) -> int:
    cfg, source, _ = _prepare(args.config, args.seed)
    modes = [args.mode] if args.mode else ["grad", "df"]
    stats = {mode: _bench_mode(cfg, source, mode, args.episodes, args.warmup)
             for mode in modes}
    result = {"episodes": args.episodes, "modes": stats}
    if len(modes) == 2:
        result["speed_ratio_grad_over_df"] = stats["grad"]["median_ms"] / stats["df"]["median_ms"]
    print(json.dumps(result, indent=2))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.json"), "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2)
            fh.write("\n")
        figures.bench_bars(stats, os.path.join(args.out, "bench.png"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg, source, _ = _prepare(args.config, args.seed)
    cfg["model.dropout"] = ()  # gradient checks run with dropout off
    spec = spec_from_config(cfg)
    model = build_model(spec, seed=cfg["train.seed"])

    failed = False
    print("primitive ops:")
    for op, err in sorted(check_primitive_ops().items()):
        ok = err < PRIMITIVE_TOL
        failed |= not ok
        print(f"  {op:<16} {err:.3e} {'ok' if ok else 'FAIL'}")

    rng = np.random.default_rng(cfg["train.seed"])
    episode = sample_episode(source, "train", cfg["episode.way"], cfg["episode.shots"],
                             min(cfg["episode.queries_per_class"], 3), rng)
    frozen = None
    if spec.shifts_enabled:
        frozen = extract_episode_info(model, episode.desc_x, episode.desc_y)

    def loss_fn():
        return episode_loss(model, episode, frozen_info=frozen)[0]

    print("episode loss by parameter group:")
    for group, params in model.param_groups().items():
        if group == "key" and spec.attention.value == "hard":
            print(f"  {group:<16} skipped (hard attention is piecewise constant in the keys)")
            continue
        per_param = max(1, args.samples // max(len(params), 1))
        err = finite_diff_check(loss_fn, params, coords_per_param=per_param, rng=rng)
        ok = err < PIPELINE_TOL
        failed |= not ok
        print(f"  {group:<16} {err:.3e} {'ok' if ok else 'FAIL'}")
    print("result:", "FAIL" if failed else "pass")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ablate(args) -> int:
    cfg, source, _ = _prepare(args.config, args.seed)
    with open(args.grid, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    combos = []
    for ln in lines:
        parts = [p.strip() for p in ln.split(",")]
        if parts[0] == "shift_mode":
            continue  # header
        if len(parts) != 3:
            raise ConfigError(f"grid line '{ln}': expected shift_mode,value_fn,cond_mode")
        combos.append(parts)
    if not combos:
        raise ConfigError("ablation grid is empty")

    rows = []
    for shift_mode, value_fn, cond_mode in combos:
        run_cfg = dict(cfg)
        run_cfg["ablation.shift_mode"] = shift_mode
        run_cfg["ablation.value_fn"] = value_fn
        run_cfg["cond.mode"] = cond_mode
        spec = spec_from_config(run_cfg)
        model = build_model(spec, seed=cfg["train.seed"])
        train(model, source, trainer_config(run_cfg))
        report = evaluate(model, source, "test", cfg["eval.episodes"], cfg["episode.way"],
                          cfg["episode.shots"], cfg["episode.queries_per_class"],
                          seed=cfg["train.seed"] + 1)
        rows.append({"shift_mode": shift_mode, "value_fn": value_fn, "cond_mode": cond_mode,
                     "mean": report.mean, "ci95": report.ci95})

    header = "shift_mode,value_fn,cond_mode,mean,ci95"
    csv_lines = [header] + [
        f"{r['shift_mode']},{r['value_fn']},{r['cond_mode']},{r['mean']:.6f},{r['ci95']:.6f}"
        for r in rows
    ]
    print("\n".join(csv_lines))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(csv_lines) + "\n")
        figures.ablation_bars(rows, os.path.join(args.out, "ablation.png"))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csnlab",
                                     description="Metalearning with conditionally shifted neurons")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model episodically")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--episodes", type=int, default=None, help="override train.episodes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("model")
    p.add_argument("config")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="also write report.json and figures here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time describe+predict episodes per conditioning mode")
    p.add_argument("config")
    p.add_argument("--mode", choices=["grad", "df"], default=None,
                   help="restrict to one mode (default: both, paired seeds)")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of ops and the episode loss")
    p.add_argument("config")
    p.add_argument("--samples", type=int, default=20,
                   help="sampled coordinates per parameter group")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train/evaluate a grid of ablation combinations")
    p.add_argument("config")
    p.add_argument("--grid", required=True,
                   help="CSV of shift_mode,value_fn,cond_mode combinations")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SamplerError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, TrainingAbort, OracleInvalidError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CsnError as e:  # any remaining library error is a usage problem
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
