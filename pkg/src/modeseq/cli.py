"""Command-line entry point: ``modeseq {gen,train,eval,ensemble}``.

Exit codes: 0 success, 2 usage or input errors, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import torch

from .config import ConfigError, dump_config, load_config, with_overrides
from .matching import MatchCriterion

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
LOG_COLUMNS = ["epoch", "train_loss", "reg_loss", "conf_loss", "MR", "mAP", "soft_mAP", "minADE", "minFDE", "b_minFDE"]
METRIC_COLUMNS = ["K", "MR", "mAP", "soft_mAP", "minADE", "minFDE", "b_minFDE"]

log = logging.getLogger("modeseq")


class UsageError(Exception):
    """Bad arguments or unreadable inputs; reported with exit code 2."""


def _float_list(text: str, flag: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}") from None


def _write_csv(path, columns, rows, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})


def _read_scenarios(path):
    from .scenario import DatasetFormatError, read_dataset

    if not path or not Path(path).is_file():
        raise UsageError(f"dataset not found: {path!r}")
    try:
        return read_dataset(path)
    except DatasetFormatError as exc:
        raise UsageError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    from .scenario import GeometryError, generate_dataset, write_dataset

    if args.count < 0:
        raise UsageError("--count must be >= 0")
    priors = _float_list(args.priors, "--priors") if args.priors else [1.0 / args.branches] * args.branches
    if len(priors) != args.branches:
        raise UsageError(f"--priors: expected {args.branches} values, got {len(priors)}")
    if any(p <= 0 for p in priors) or abs(sum(priors) - 1.0) > 1e-9:
        raise UsageError(f"--priors must be positive and sum to 1 (sum is {sum(priors):.12g})")
    lo, hi = _float_list(args.speed, "--speed") if "," in args.speed else [float(args.speed)] * 2
    if not 0.5 <= lo <= hi <= 20:
        raise UsageError("--speed: need 0.5 <= low <= high <= 20")

    try:
        scenarios = generate_dataset(args.count, args.branches, priors, args.seed, (lo, hi),
                                     args.neighbors, args.agent_class)
    except (GeometryError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = args.out or "scenarios.jsonl"
    write_dataset(scenarios, out)

    counts = Counter(sc.latent_branch.index for sc in scenarios)
    print(f"wrote {len(scenarios)} scenarios to {out}")
    print("branch  prior   count  freq")
    for b, p in enumerate(priors):
        freq = counts[b] / len(scenarios) if scenarios else 0.0
        print(f"{b:>6}  {p:.3f}  {counts[b]:>5}  {freq:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- train / eval

def sweep(model, scenarios, ks, rearrange, family, step_duration, out_dir: Path) -> list[dict]:
    """Evaluate at each K' and write predictions, metrics.csv and the SVG."""
    from .inference import evaluate, write_predictions
    from .plotting import plot_extrapolation

    rows = []
    for k in ks:
        preds, report = evaluate(model, scenarios, k, rearrange, family, step_duration)
        write_predictions(preds, out_dir / f"predictions_K{k}.jsonl")
        rows.append({"K": k, **report.as_dict()})
    _write_csv(out_dir / "metrics.csv", METRIC_COLUMNS, rows, comment=f"rearrange={str(rearrange).lower()}")
    plot_extrapolation(rows, out_dir / "extrapolation.svg")
    return rows


def _print_metrics(rows) -> None:
    print("   K'     MR    mAP  softmAP  minADE  minFDE  b-minFDE")
    for r in rows:
        print(f"{r['K']:>5}  {r['MR']:.3f}  {r['mAP']:.3f}  {r['soft_mAP']:.3f}  "
              f"{r['minADE']:6.3f}  {r['minFDE']:6.3f}  {r['b_minFDE']:8.3f}")


def cmd_train(args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
    from .plotting import plot_training
    from .training import DivergenceError, train

    try:
        cfg = load_config(args.config)
        cfg = with_overrides(cfg, strategy=args.strategy, seed=args.seed, out=args.out)
        cfg.validate()
    except FileNotFoundError:
        raise UsageError(f"config not found: {args.config!r}") from None
    except ConfigError as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    train_set = _read_scenarios(cfg.train_data)
    eval_set = _read_scenarios(cfg.eval_data) if cfg.eval_data else None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    ckpt = out / "checkpoint.mseq"

    state = None
    if args.resume:
        try:
            state = load_checkpoint(args.resume)
        except (OSError, CheckpointError) as exc:
            raise UsageError(f"--resume: {exc}") from None
        if state.config != cfg.train_config():
            raise UsageError("--resume: checkpoint was trained with a different configuration")

    tcfg = cfg.train_config()
    header = f"strategy={tcfg.strategy} ignore_variant={tcfg.ignore_variant} rearrange={str(tcfg.rearrange).lower()} seed={tcfg.seed}"

    def on_epoch(st):
        save_checkpoint(st, ckpt)
        _write_csv(out / "train_log.csv", LOG_COLUMNS, st.history, comment=header)
        row = st.history[-1]
        extra = f" MR {row['MR']:.3f} mAP {row['mAP']:.3f}" if "MR" in row else ""
        print(f"epoch {row['epoch']:>3}  loss {row['train_loss']:.4f}{extra}", flush=True)

    try:
        state = train(train_set, tcfg, eval_set, state=state, stop_after=args.stop_after,
                      eval_every=cfg.eval_every, on_epoch=on_epoch)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not state.history:
        save_checkpoint(state, ckpt)
        _write_csv(out / "train_log.csv", LOG_COLUMNS, state.history, comment=header)
    plot_training(state.history, out / "train_curve.svg")
    if eval_set and state.epoch == tcfg.epochs:
        rows = sweep(state.model, eval_set, cfg.extrapolation, tcfg.rearrange,
                     tcfg.match_family, tcfg.step_duration, out)
        _print_metrics(rows)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint

    ks = _int_list(args.modes, "--modes") if args.modes else None
    if ks is not None and (not ks or min(ks) < 1):
        raise UsageError("--modes: every K' must be >= 1")
    try:
        state = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise UsageError(f"--checkpoint: {exc}") from None
    scenarios = _read_scenarios(args.data)
    cfg = state.config
    out = Path(args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    rearrange = cfg.rearrange and not args.no_rearrange
    rows = sweep(state.model, scenarios, ks or [cfg.K], rearrange, cfg.match_family, cfg.step_duration, out)
    _print_metrics(rows)
    return EXIT_OK


# ---------------------------------------------------------------- ensemble

def _class_factors(text: str | None) -> dict:
    from .ensemble import CLASS_FACTORS

    factors = dict(CLASS_FACTORS)
    if not text:
        return factors
    for item in text.split(","):
        name, sep, value = item.partition("=")
        if not sep or name.strip() not in factors:
            raise UsageError(f"--classes: expected class=factor with class in {sorted(factors)}, got {item!r}")
        try:
            factors[name.strip()] = float(value)
        except ValueError:
            raise UsageError(f"--classes: bad factor {value!r}") from None
        if factors[name.strip()] <= 0:
            raise UsageError("--classes: factors must be positive")
    return factors


def cmd_ensemble(args) -> int:
    from .ensemble import FusionConfig, fuse
    from .inference import Prediction, read_predictions, write_predictions
    from .scenario import DatasetFormatError

    if args.modes < 1:
        raise UsageError("--modes must be >= 1")
    sources = []
    for path in args.files:
        try:
            sources.append({p.scenario_id: p for p in read_predictions(path)})
        except OSError as exc:
            raise UsageError(f"{path}: {exc.strerror}") from None
        except DatasetFormatError as exc:
            raise UsageError(f"{path}: {exc}") from None
    ids = sorted(sources[0])
    for path, src in zip(args.files[1:], sources[1:]):
        diff = sorted(set(ids) ^ set(src))
        if diff:
            raise UsageError(f"{path}: scenario id {diff[0]} is not present in every input file")
    config = FusionConfig(_class_factors(args.classes), num_models=len(sources), max_modes=args.modes)

    fused, sizes = [], Counter()
    for sid in ids:
        preds = [src[sid] for src in sources]
        ref = preds[0]
        criterion = MatchCriterion("velocity_aware", ref.focal_speed, ref.focal_heading, args.step_duration)
        try:
            trajs, confs, clusters = fuse([(p.trajectories, p.confidences) for p in preds], config,
                                          criterion, ref.agent_class)
        except ValueError as exc:
            raise UsageError(f"scenario {sid}: {exc}") from None
        sizes.update(len(c.members) for c in clusters)
        fused.append(Prediction(sid, trajs, confs, ref.agent_class, ref.focal_speed, ref.focal_heading))
    out = args.out or "fused.jsonl"
    write_predictions(fused, out)
    print(f"fused {len(args.files)} model(s) over {len(ids)} scenarios into {out}")
    print("cluster size  count")
    for size in sorted(sizes):
        print(f"{size:>12}  {sizes[size]:>5}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted both before and after the subcommand; the
    # subcommand copies use SUPPRESS so they never clobber an earlier value
    def add_globals(p, default):
        p.add_argument("--seed", type=int, default=default(None), help="random seed")
        p.add_argument("--jobs", type=int, default=default(None), help="worker threads (default: all cores)")
        p.add_argument("--out", default=default(None), help="output path")
        p.add_argument("-v", "--verbose", action="store_true", default=default(False))

    parser = argparse.ArgumentParser(prog="modeseq", description="Sequential mode decoding for trajectory prediction.")
    add_globals(parser, lambda d: d)
    sub = parser.add_subparsers(dest="command", required=True)
    local = lambda d: argparse.SUPPRESS  # noqa: E731

    p = sub.add_parser("gen", help="generate a synthetic fork dataset")
    add_globals(p, local)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--branches", type=int, default=3)
    p.add_argument("--priors", help="comma-separated branch probabilities (default: uniform)")
    p.add_argument("--speed", default="8,14", help="approach speed or low,high range in m/s")
    p.add_argument("--neighbors", type=int, default=2)
    p.add_argument("--class", dest="agent_class", default="vehicle", choices=["vehicle", "pedestrian", "cyclist"])
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model from a key = value config file")
    add_globals(p, local)
    p.add_argument("config")
    p.add_argument("--strategy", choices=["emta", "wta"])
    p.add_argument("--resume", metavar="CHECKPOINT")
    p.add_argument("--stop-after", type=int, metavar="EPOCHS", help="stop after this many epochs in total")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint at one or more mode counts")
    add_globals(p, local)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--modes", help="comma-separated K' values (default: the training K)")
    p.add_argument("--no-rearrange", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="fuse prediction files with Weighted Trajectory Fusion")
    add_globals(p, local)
    p.add_argument("files", nargs="+")
    p.add_argument("--classes", help="class scaling factors, e.g. vehicle=1.5,pedestrian=1.4")
    p.add_argument("--modes", type=int, default=6, help="maximum fused modes")
    p.add_argument("--step-duration", type=float, default=0.5)
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    jobs = args.jobs or os.cpu_count() or 1
    if jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(jobs)
    if args.command == "gen" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
