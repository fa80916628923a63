"""Command-line entry point: gen-data, train, eval, embed, ablate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .config import REGIMES, ConfigError, RunConfig, load_config
from .data import (DataError, GenConfig, PLACEHOLDER_ACTION, class_histogram, denormalize_boxes,
                   gen_synthetic, read_jsonl, read_vocab, stack_windows, write_jsonl, write_vocab)
from .metrics import evaluate, predict_pixels
from .nn import CheckpointError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("trajabc")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajabc", description=__doc__)
    p.add_argument("--config", help="run configuration file (sectioned key = value)")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--out", help="output directory (overrides [run] out)")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-data", help="write a synthetic JSONL dataset and its vocabulary")
    g.add_argument("--n-records", type=int)
    g.add_argument("--actions", help="comma-separated action classes")

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--regime", choices=REGIMES)
    t.add_argument("--beta", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--generator-checkpoint", help="frozen model that supplies synthetic samples")

    for name, helptext in (("eval", "evaluate a checkpoint"), ("embed", "export encoder embeddings")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
        e.add_argument("--data", help="JSONL dataset (default: the config's dataset, test split)")
        e.add_argument("--split-file", help="split.json written by train")
        e.add_argument("--split", default="test")
        if name == "eval":
            e.add_argument("--horizons", help="comma-separated seconds")
            e.add_argument("-L", "--samples", type=int, help="samples per window")
            e.add_argument("--mode", choices=("best-of-L", "single"), default="best-of-L")
            e.add_argument("--predictions", action="store_true", help="also write predictions.csv")

    a = sub.add_parser("ablate", help="regime x beta x seed grid")
    a.add_argument("--betas", default="0.25,0.5,0.75")
    a.add_argument("--regimes", default="none,simclr,abc,abc_plus")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--workers", type=int, default=1)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.out:
        cfg.run.out = args.out
    if args.command == "gen-data":
        if args.n_records is not None:
            cfg.data.n_records = args.n_records
        if args.actions:
            cfg.data.actions = args.actions
        if args.seed is not None:
            cfg.data.gen_seed = args.seed
    if args.command == "train":
        if args.regime:
            cfg.loss.regime = args.regime
        if args.beta is not None:
            cfg.loss.beta = args.beta
        if args.epochs is not None:
            cfg.optim.epochs = args.epochs
        if args.generator_checkpoint:
            cfg.loss.generator_checkpoint = args.generator_checkpoint
    return cfg.validate()


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig) -> int:
    d = cfg.data
    gen = GenConfig(n_records=d.n_records, actions=tuple(d.action_list), fps=d.fps,
                    frame_range=(d.frame_min, d.frame_max), arena=(d.arena_w, d.arena_h),
                    seed=d.gen_seed)
    records = gen_synthetic(gen)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "dataset.jsonl", records, gen.actions)
    write_vocab(out / "vocab.txt", gen.actions)
    hist = class_histogram(records, gen.actions)
    for name, n in hist.items():
        print(f"{name:>14} {n:6d}")
    print(f"{'total':>14} {sum(hist.values()):6d}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    from .train import train

    res = train(cfg, out_dir=cfg.run.out)
    last = res.reports[-1] if res.reports else None
    print(f"trained {len(res.reports)} steps; best epoch {res.best_epoch}; "
          f"val ade_sq {min(res.val_history) if res.val_history else float('nan'):.3f}")
    if last:
        print(f"last step: L_traj {last.l_traj:.5f}  L_con {last.l_con:.5f}  L_final {last.l_final:.5f}")
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def _inference_windows(cfg: RunConfig, args):
    """Windows for eval/embed plus a per-window label string; labels are never fed to the model."""
    from .train import load_dataset, split_dataset, windows_for

    if args.data:
        vocab = read_vocab(cfg.data.vocab) if cfg.data.vocab else None
        records = read_jsonl(args.data, vocab, strict_actions=False)
        names = vocab or _names_in_order(args.data)
    else:
        records, names = load_dataset(cfg)
    if args.split_file:
        ids = set(json.loads(Path(args.split_file).read_text())[args.split])
        records = [r for r in records if r.id in ids]
    elif not args.data:
        records = split_dataset(cfg, records)[args.split]
    windows = windows_for(cfg, records)
    labels = [names[w.action] if w.action != PLACEHOLDER_ACTION and w.action < len(names) else "unknown"
              for w in windows]
    return windows, labels


def _names_in_order(path) -> list[str]:
    from .train import _vocab_from_first_use

    return _vocab_from_first_use(path)


def _load_checked(cfg: RunConfig, args):
    from .train import load_model

    model = load_model(args.checkpoint)
    if args.config:
        diff = model.cfg.diff(cfg.model_config())
        if diff:
            raise ConfigError(f"checkpoint/config mismatch in: {', '.join(diff)}")
    # window geometry always follows the checkpoint
    cfg.data.t_obs, cfg.data.t_pred = model.cfg.t_obs, model.cfg.t_pred
    return model


def cmd_eval(cfg: RunConfig, args) -> int:
    model = _load_checked(cfg, args)
    windows, _ = _inference_windows(cfg, args)
    if not windows:
        raise DataError("no evaluation windows")
    horizons = _floats(args.horizons) if args.horizons else cfg.data.horizon_list
    L = args.samples or cfg.run.eval_l
    if args.mode == "single":
        L = 1
    seed = cfg.run.seed
    pred = predict_pixels(model, windows, L, seed)
    report = evaluate(model, windows, horizons, L=L, mode=args.mode, seed=seed, predictions=pred)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out / "metrics.txt").write_text(report.to_table(), encoding="utf-8")
    print(report.to_table(), end="")
    if args.predictions:
        write_predictions(out / "predictions.csv", windows, pred)
    return EXIT_OK


def write_predictions(path, windows, pred) -> None:
    """Plot-ready rows: window, kind (observed/truth/sample), sample index, frame, box."""
    obs, fut, _, refs = stack_windows(windows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["window_id", "kind", "sample", "frame", "x1", "y1", "x2", "y2"])
        for i, win in enumerate(windows):
            t_obs = len(win.observed)
            for t, b in enumerate(denormalize_boxes(obs[i], refs[i])):
                w.writerow([win.window_id, "observed", -1, t, *np.round(b, 4)])
            for t, b in enumerate(denormalize_boxes(fut[i], refs[i])):
                w.writerow([win.window_id, "truth", -1, t_obs + t, *np.round(b, 4)])
            for l in range(pred.shape[1]):
                for t, b in enumerate(pred[i, l]):
                    w.writerow([win.window_id, "sample", l, t_obs + t, *np.round(b, 4)])


def cmd_embed(cfg: RunConfig, args) -> int:
    from .train import embed_windows

    model = _load_checked(cfg, args)
    windows, labels = _inference_windows(cfg, args)
    emb = embed_windows(model, windows) if windows else np.zeros((0, model.cfg.d_h))
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "embeddings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["window_id", "action"] + [f"h{k}" for k in range(emb.shape[1])])
        for win, lab, row in zip(windows, labels, emb):
            w.writerow([win.window_id, lab] + [repr(float(v)) for v in row])
    print(f"wrote {len(windows)} embeddings to {out / 'embeddings.csv'}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    from .experiments import ablate, format_table, summarize

    regimes = [r.strip() for r in args.regimes.split(",") if r.strip()]
    bad = [r for r in regimes if r not in REGIMES]
    if bad:
        raise ConfigError(f"unknown regimes {bad}")
    rows = ablate(cfg, _floats(args.betas), regimes, _ints(args.seeds), out_dir=cfg.run.out,
                  workers=args.workers)
    print(format_table(summarize(rows)), end="")
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"cell {r['regime']}/{r['beta']}/{r['seed']}: {r['status']}", file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(cfg.to_text(), end="")
            return EXIT_OK
        if args.command is None:
            parser.print_help()
            return EXIT_CONFIG
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        if args.command == "embed":
            return cmd_embed(cfg, args)
        return cmd_ablate(cfg, args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
