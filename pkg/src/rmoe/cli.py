"""Command-line entry point: ``rmoe <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 runtime or numeric failure.
Every command also accepts ``--config FILE``, a flat ``key = value`` file
whose keys are flag names (dashes or underscores); explicit flags win.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .data import (DatasetFormatError, EventVocabulary, SyntheticWorld, generate_synthetic,
                   load_dataset, make_world, save_dataset, split_train_test, split_validation)
from .evaluation import (MetricsReport, evaluate_model, evaluate_oracle, gain_report,
                         occurrence_ratio, write_gain_files)
from .models import BaseModel, load_checkpoint, save_checkpoint
from .training import (BASE_L2, BASE_LR, EXPERT_GRID, HIDDEN_GRID, RMOE_L2, RMOE_LR,
                       TrainConfig, TrainingDiverged, FreezeViolation, train_base, train_lr,
                       train_moe_ablation, train_rmoe)

EXIT_USAGE = 2
EXIT_RUNTIME = 3
SWEEP_HEADER = ["model", "n_experts", "hidden_dim", "seed", "macro_auprc", "status"]

log = logging.getLogger("rmoe")


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


# -- helpers ---------------------------------------------------------------

def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _require_file(path, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file: {p}")
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_manifest(out: Path, args, inputs: dict, artifacts: list, started: float) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    doc = {"command": args.command, "config": config, "seed": getattr(args, "seed", None),
           "inputs": {str(k): _file_hash(k) for k in inputs},
           "artifacts": sorted(str(a) for a in artifacts),
           "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
           "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
           "git_describe": _git_describe(), "version": __version__}
    (out / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def _load(path, vocab=None):
    try:
        return load_dataset(path, vocab)
    except DatasetFormatError as exc:
        raise RuntimeFailure(str(exc)) from None


def _train_config(args, lr_default: float, l2_default: float) -> TrainConfig:
    try:
        return TrainConfig(lr=args.lr if args.lr is not None else lr_default,
                           l2=args.l2 if args.l2 is not None else l2_default,
                           max_epochs=args.max_epochs, patience=args.patience,
                           batch_size=args.batch_size, seed=args.seed,
                           val_fraction=args.val_fraction, decoupled_l2=args.decoupled_l2)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_val(split, args):
    if len(split.train) < 2:
        raise RuntimeFailure("training split needs at least two sequences")
    return split_validation(split.train, args.val_fraction, args.seed)


def _finish_training(out: Path, model, history, vocab, args, inputs, started, extra=None):
    ckpt = out / "checkpoint.json"
    save_checkpoint(ckpt, model, vocab.hash(), extra)
    history.write_csv(out / "history.csv")
    _write_manifest(out, args, inputs, [ckpt, out / "history.csv"], started)
    best = history.best_val_loss()
    print(f"{model.kind}: {len(history)} epochs, best epoch {history.best_epoch}, "
          f"best val loss {best:.6f} -> {ckpt}")


# -- commands --------------------------------------------------------------

def cmd_gen_data(args) -> None:
    started = time.time()
    if args.len_min < 2:
        raise UsageError("--len-min must be >= 2 (need two windows to predict anything)")
    if args.len_max < args.len_min:
        raise UsageError("--len-max must be >= --len-min")
    if args.k_subpops < 1 or args.n_events < 1 or args.n_seqs < 2:
        raise UsageError("--k-subpops, --n-events >= 1 and --n-seqs >= 2 required")
    if args.n_events < args.k_subpops and args.world_style == "markers":
        raise UsageError("markers world needs --n-events >= --k-subpops")
    if not args.window > 0:
        raise UsageError("--window must be positive")
    out = _out_dir(args.out)
    world = make_world(args.k_subpops, args.n_events, args.seed, style=args.world_style)
    seqs, labels = generate_synthetic(world, args.n_seqs, (args.len_min, args.len_max),
                                      args.seed + 1)
    world.labels = {s.admission_id: k for s, k in zip(seqs, labels)}
    vocab = EventVocabulary.default(args.n_events)
    split = split_train_test(seqs, args.split_ratio, args.seed)
    save_dataset(out / "dataset.jsonl", split, vocab, args.window)
    (out / "vocab.json").write_text(json.dumps(vocab.to_json(), sort_keys=True) + "\n")
    (out / "world.json").write_text(json.dumps(world.to_json(), sort_keys=True) + "\n")
    _write_manifest(out, args, [], [out / "dataset.jsonl", out / "vocab.json",
                                    out / "world.json"], started)
    ratio = occurrence_ratio(seqs, args.n_events).mean()
    print(f"wrote {len(split.train)} train / {len(split.test)} test sequences, "
          f"{sum(len(s) for s in seqs)} windows, mean occurrence ratio {ratio:.4f} -> {out}")


def cmd_train_base(args) -> None:
    started = time.time()
    data = _require_file(args.data, "--data")
    split, vocab, _ = _load(data)
    cfg = _train_config(args, BASE_LR, BASE_L2)
    tr, va = _train_val(split, args)
    model, history = train_base(tr, va, vocab, cfg, args.emb_dim, args.hidden_dim)
    _finish_training(_out_dir(args.out), model, history, vocab, args, [data], started)


def cmd_train_lr(args) -> None:
    started = time.time()
    data = _require_file(args.data, "--data")
    split, vocab, _ = _load(data)
    cfg = _train_config(args, BASE_LR, BASE_L2)
    tr, va = _train_val(split, args)
    model, history = train_lr(tr, va, vocab, cfg)
    _finish_training(_out_dir(args.out), model, history, vocab, args, [data], started)


def _load_base(path, vocab) -> BaseModel:
    base, vhash, _ = load_checkpoint(path)
    if not isinstance(base, BaseModel):
        raise RuntimeFailure(f"{path}: expected a base checkpoint, got {base.kind!r}")
    if vhash != vocab.hash():
        raise RuntimeFailure(f"{path}: vocabulary hash does not match the dataset")
    return base


def cmd_train_rmoe(args) -> None:
    started = time.time()
    if args.base_checkpoint is None:
        raise UsageError("train-rmoe requires --base-checkpoint")
    ckpt = _require_file(args.base_checkpoint, "--base-checkpoint")
    data = _require_file(args.data, "--data")
    split, vocab, _ = _load(data)
    base = _load_base(ckpt, vocab)
    cfg = _train_config(args, RMOE_LR, RMOE_L2)
    tr, va = _train_val(split, args)
    model, history = train_rmoe(base, tr, va, vocab, cfg, args.experts, args.hidden_dim,
                                args.combine)
    _finish_training(_out_dir(args.out), model, history, vocab, args, [data, ckpt], started)


def cmd_train_moe(args) -> None:
    started = time.time()
    data = _require_file(args.data, "--data")
    split, vocab, _ = _load(data)
    cfg = _train_config(args, BASE_LR, BASE_L2)
    tr, va = _train_val(split, args)
    model, history = train_moe_ablation(tr, va, vocab, cfg, args.experts, args.hidden_dim,
                                        args.emb_dim)
    _finish_training(_out_dir(args.out), model, history, vocab, args, [data], started)


def cmd_eval(args) -> None:
    started = time.time()
    if args.oracle and args.world is None:
        raise UsageError("--oracle needs --world")
    data = _require_file(args.data, "--data")
    split, vocab, _ = _load(data)
    seqs = split.test if args.split == "test" else split.train
    if not seqs:
        raise RuntimeFailure(f"{data}: the {args.split} split is empty")
    out = _out_dir(args.out)
    inputs, artifacts = [data], []
    if args.checkpoint is not None:
        ckpt = _require_file(args.checkpoint, "--checkpoint")
        model, vhash, _ = load_checkpoint(ckpt)
        if vhash != vocab.hash():
            raise RuntimeFailure(f"{ckpt}: vocabulary hash does not match {data}")
        report = evaluate_model(model, seqs, vocab)
        report.write_csv(out / "metrics.csv")
        inputs.append(ckpt)
        artifacts.append(out / "metrics.csv")
        print(f"macro AUPRC {report.macro:.6f} over {report.n_evaluated} event types "
              f"({len(report.excluded)} without positives)")
    elif not args.oracle:
        raise UsageError("give --checkpoint, --oracle, or both")
    if args.oracle:
        wpath = _require_file(args.world, "--world")
        world = SyntheticWorld.from_json(json.loads(wpath.read_text()))
        missing = [s.admission_id for s in seqs if s.admission_id not in world.labels]
        if missing:
            raise RuntimeFailure(f"{wpath}: no latent label for sequence {missing[0]}")
        oracle = evaluate_oracle(world, world.labels, seqs, vocab)
        oracle.write_csv(out / "oracle_metrics.csv")
        inputs.append(wpath)
        artifacts.append(out / "oracle_metrics.csv")
        print(f"oracle macro AUPRC {oracle.macro:.6f}")
    _write_manifest(out, args, inputs, artifacts, started)


def _sweep_cell(cell):
    """Train and score one ``(model, n, d', seed)`` cell; never raises."""
    model_kind, n, hidden, seed, data, base_path, out, cfg_kw, combine, emb_dim = cell
    row = [model_kind, n, hidden, seed]
    try:
        split, vocab, _ = load_dataset(data)
        tr, va = split_validation(split.train, cfg_kw["val_fraction"], seed)
        cfg = TrainConfig(seed=seed, **cfg_kw)
        if model_kind == "rmoe":
            base = _load_base(base_path, vocab)
            model, history = train_rmoe(base, tr, va, vocab, cfg, n, hidden, combine)
        else:
            model, history = train_moe_ablation(tr, va, vocab, cfg, n, hidden, emb_dim)
        report = evaluate_model(model, split.test, vocab)
        cell_dir = Path(out) / f"{model_kind}_n{n}_d{hidden}_s{seed}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(cell_dir / "checkpoint.json", model, vocab.hash())
        history.write_csv(cell_dir / "history.csv")
        report.write_csv(cell_dir / "metrics.csv")
        return row + [f"{report.macro:.6f}", "ok"]
    except Exception as exc:  # a failed cell is recorded, the sweep goes on
        return row + ["nan", f"error: {type(exc).__name__}: {exc}".replace("\n", " ")]


def _int_list(text: str) -> list:
    try:
        values = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def cmd_sweep(args) -> int:
    started = time.time()
    data = _require_file(args.data, "--data")
    base_path = _require_file(args.base_checkpoint, "--base-checkpoint")
    split, vocab, _ = _load(data)
    _load_base(base_path, vocab)
    if any(n < 1 for n in args.experts) or any(d < 1 for d in args.hidden_dims):
        raise UsageError("--experts and --hidden-dims entries must be positive")
    out = _out_dir(args.out)
    kinds = ["rmoe", "moe"] if args.ablation else ["rmoe"]
    cells = []
    for kind in kinds:
        rmoe_kind = kind == "rmoe"
        cfg_kw = {"lr": args.lr if args.lr is not None else (RMOE_LR if rmoe_kind else BASE_LR),
                  "l2": args.l2 if args.l2 is not None else (RMOE_L2 if rmoe_kind else BASE_L2),
                  "max_epochs": args.max_epochs, "patience": args.patience,
                  "batch_size": args.batch_size, "val_fraction": args.val_fraction,
                  "decoupled_l2": args.decoupled_l2}
        for n in args.experts:
            for d in args.hidden_dims:
                for seed in args.seeds:
                    cells.append((kind, n, d, seed, str(data), str(base_path), str(out), cfg_kw,
                                  args.combine, args.emb_dim))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        w.writerows(rows)
    _write_manifest(out, args, [data, base_path], [out / "sweep.csv"], started)
    failed = [r for r in rows if r[5] != "ok"]
    for r in rows:
        print(",".join(str(x) for x in r))
    if failed:
        print(f"{len(failed)} of {len(rows)} cells failed", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


def cmd_report(args) -> None:
    started = time.time()
    base_path = _require_file(args.base, "--base")
    chal_path = _require_file(args.challenger, "--challenger")
    try:
        base = MetricsReport.read_csv(base_path)
        chal = MetricsReport.read_csv(chal_path)
        rows = gain_report(base, chal)
    except ValueError as exc:
        raise RuntimeFailure(str(exc)) from None
    out = _out_dir(args.out)
    write_gain_files(rows, out / "gains.csv", out / "gain_vs_occurrence.csv")
    _write_manifest(out, args, [base_path, chal_path],
                    [out / "gains.csv", out / "gain_vs_occurrence.csv"], started)
    macro = rows[-1]
    gain = "n/a" if macro[4] is None else f"{macro[4]:+.2f}%"
    print(f"macro AUPRC {macro[2]:.6f} -> {macro[3]:.6f} ({gain})")


# -- parser ----------------------------------------------------------------

def _add_training_flags(p, lr_default: float, l2_default: float, hidden_default) -> None:
    p.add_argument("--data", help="dataset file (JSON lines)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lr", type=float, default=None,
                   help=f"Adam learning rate (default {lr_default})")
    p.add_argument("--l2", type=float, default=None,
                   help=f"L2 weight decay (default {l2_default})")
    p.add_argument("--decoupled-l2", action="store_true",
                   help="apply decay directly to the weights (AdamW) instead of the gradient")
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=5,
                   help="stop after this many epochs without a better validation loss")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    if hidden_default is not None:
        p.add_argument("--hidden-dim", type=int, default=hidden_default, help="GRU hidden size")
    p.add_argument("--emb-dim", type=int, default=64, help="embedding size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rmoe", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic heterogeneous dataset")
    p.add_argument("--k-subpops", type=int, default=4)
    p.add_argument("--n-events", type=int, default=30)
    p.add_argument("--n-seqs", type=int, default=2500)
    p.add_argument("--len-min", type=int, default=10)
    p.add_argument("--len-max", type=int, default=20)
    p.add_argument("--window", type=float, default=24.0, help="window length in hours")
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--world-style", choices=["markers", "plain"], default="markers")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train-base", help="phase 1: train the population GRU")
    _add_training_flags(p, BASE_LR, BASE_L2, 512)
    p.set_defaults(func=cmd_train_base)

    p = subs.add_parser("train-rmoe", help="phase 2: train the residual mixture on a frozen base")
    _add_training_flags(p, RMOE_LR, RMOE_L2, 64)
    p.add_argument("--base-checkpoint", help="checkpoint written by train-base")
    p.add_argument("--experts", type=int, default=50, help="number of experts")
    p.add_argument("--combine", choices=["prob_sum", "logit_sum"], default="prob_sum")
    p.set_defaults(func=cmd_train_rmoe)

    p = subs.add_parser("train-moe", help="ablation: plain mixture trained from scratch")
    _add_training_flags(p, BASE_LR, BASE_L2, 64)
    p.add_argument("--experts", type=int, default=50, help="number of experts")
    p.set_defaults(func=cmd_train_moe)

    p = subs.add_parser("train-lr", help="baseline: logistic regression on the OR of the history")
    _add_training_flags(p, BASE_LR, BASE_L2, None)
    p.set_defaults(func=cmd_train_lr)

    p = subs.add_parser("eval", help="per-event AUPRC of a checkpoint (and/or the oracle)")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.add_argument("--oracle", action="store_true",
                   help="also score the exact generator probabilities (needs --world)")
    p.add_argument("--world", help="world.json written by gen-data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("sweep", help="grid over experts x hidden size x seed")
    _add_training_flags(p, RMOE_LR, RMOE_L2, None)
    p.add_argument("--base-checkpoint")
    p.add_argument("--experts", type=_int_list, default=list(EXPERT_GRID))
    p.add_argument("--hidden-dims", type=_int_list, default=list(HIDDEN_GRID))
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--ablation", action="store_true", help="also train plain mixtures")
    p.add_argument("--combine", choices=["prob_sum", "logit_sum"], default="prob_sum")
    p.add_argument("--jobs", type=int, default=1, help="cells trained in parallel")
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("report", help="per-event gains between two metrics.csv files")
    p.add_argument("--base", help="metrics.csv of the reference model")
    p.add_argument("--challenger", help="metrics.csv of the compared model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _read_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"--config: no such file: {p}")
    values = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(parser, argv: list) -> list:
    """Splice ``--config`` entries in front of the explicit flags."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise UsageError("--config needs a path")
    values = _read_config(argv[i + 1])
    rest = argv[:i] + argv[i + 2:]
    if not rest:
        raise UsageError("missing command")
    extra = []
    for key, value in values.items():
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "false"):
            if value.lower() == "true":
                extra.append(flag)
        else:
            extra += [flag, value]
    return rest[:1] + extra + rest[1:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config(parser, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rmoe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rmoe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeFailure, TrainingDiverged, FreezeViolation) as exc:
        print(f"rmoe {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
