"""Command-line driver.

Subcommands: train, eval, prune-schedule, bench, report, sweep. Outputs are
CSV files written to --out (or a path-valued flag); exit code is 0 on
success, 1 with a one-line diagnostic on stderr otherwise.
"""

from __future__ import annotations

import argparse
import csv
import sys

from . import analysis, data
from .config import load_config
from .model import evaluate
from .pruning import (PruningHyperParams, heuristic_schedule, resolve_slopes,
                      threshold_at)
from .training import load_report_csv, model_from_checkpoint, train


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _cmd_train(args):
    cfg = load_config(args.config)
    report = train(cfg, checkpoint_path=args.checkpoint, report_path=args.out)
    if report.diverged:
        print("error: training diverged (non-finite loss); "
              f"last good checkpoint: {args.checkpoint}", file=sys.stderr)
        return 1
    last_val = report.epochs[-1].val_loss if report.epochs else float("nan")
    print(f"trained {len(report.records)} iterations; "
          f"final block sparsity {report.final_block_sparsity:.4f}; "
          f"val loss {last_val:.4f}")
    return 0


def _cmd_eval(args):
    model, _, _ = model_from_checkpoint(args.checkpoint)
    ids = data.load_corpus(args.corpus)
    loss = evaluate(model, ids, args.batch, args.seq_len, kernel=args.kernel)
    _write(args.out, "val_loss,kernel\n" + f"{loss!r},{args.kernel}\n")
    print(f"val loss {loss:.6f} ({args.kernel} kernels)")
    return 0


def _schedule_from_config(cfg):
    ps = cfg.prune
    if ps.start_itr is not None and ps.ramp_itr is not None and ps.end_itr is not None:
        hyper = PruningHyperParams(ps.start_itr, ps.ramp_itr, ps.end_itr, freq=ps.freq)
    else:
        if cfg.data_path is None:
            raise ValueError("prune-schedule needs either explicit "
                             "prune.start/ramp/end_itr or data.path to size the run")
        ids = data.load_corpus(cfg.data_path)
        train_ids, _ = data.split_corpus(ids, cfg.val_fraction)
        per_epoch = data.windows_per_epoch(train_ids.size, cfg.batch, cfg.seq_len)
        hyper = heuristic_schedule(per_epoch * cfg.epochs, per_epoch, cfg.epochs,
                                   freq=ps.freq)
    block_elems = cfg.block[0] * cfg.block[1]
    if ps.theta is not None:
        theta_b = ps.theta * block_elems ** 0.25
        from dataclasses import replace
        hyper = replace(hyper, start_slope=theta_b,
                        ramp_slope=ps.ramp_factor * theta_b)
    elif ps.q is not None:
        hyper = resolve_slopes(hyper, ps.q, block_elems, ps.ramp_factor)
    else:
        raise ValueError("prune-schedule needs prune.q or prune.theta "
                         "(no live weights to take a quantile from)")
    return hyper


def _cmd_prune_schedule(args):
    cfg = load_config(args.config)
    hyper = _schedule_from_config(cfg)
    last = args.iterations if args.iterations else hyper.end_itr + 2 * hyper.freq
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "epsilon"])
        for it in range(last + 1):
            w.writerow([it, repr(threshold_at(hyper, it))])
    print(f"wrote threshold curve for iterations 0..{last}")
    return 0


def _parse_blocks(spec):
    out = []
    for part in spec.split(","):
        h, _, w = part.lower().partition("x")
        out.append((int(h), int(w)))
    return out


def _cmd_bench(args):
    blocks = _parse_blocks(args.blocks)
    batches = [int(b) for b in args.batches.split(",")]
    backends = args.backends.split(",") if args.backends else None
    records = analysis.run_bench(args.rows, args.cols, args.sparsity, blocks,
                                 batches, reps=args.reps, seed=args.seed,
                                 backends=backends)
    _write(args.out, analysis.bench_csv(records))
    print(f"wrote {len(records)} benchmark records")
    return 0


def _cmd_report(args):
    if args.what == "curve":
        report = load_report_csv(args.source)
        _write(args.out, analysis.export_prune_curve(report))
    else:
        model, _, meta = model_from_checkpoint(args.source)
        if args.what == "fanout":
            _write(args.out, analysis.fanout_csv(
                analysis.fanout_histograms(model, bins=args.bins)))
        else:
            block = model.block or (1, 1)
            _write(args.out, analysis.layer_sparsity_csv(model, block))
    print(f"wrote {args.what} report to {args.out}")
    return 0


def _cmd_sweep(args):
    cfg = load_config(args.config)
    grid = []
    with open(args.grid, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            overrides = {}
            for part in line.split():
                k, _, v = part.partition("=")
                overrides[k] = v
            grid.append(overrides)
    tokens = data.load_corpus(cfg.data_path)
    rows = analysis.sparsity_sweep(cfg, grid, tokens)
    _write(args.out, analysis.sweep_csv(rows))
    print(f"swept {len(rows)} runs")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="blockrnn",
                                description="block-sparse RNN training toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config")
    t.add_argument("--checkpoint", required=True, help="checkpoint output path")
    t.add_argument("--out", required=True, help="run report CSV path")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="held-out loss of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("corpus")
    e.add_argument("--out", required=True)
    e.add_argument("--kernel", choices=("dense", "bsr"), default="dense")
    e.add_argument("--batch", type=int, default=32)
    e.add_argument("--seq-len", type=int, default=64)
    e.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("prune-schedule", help="emit the threshold curve")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int, default=0,
                   help="last iteration to emit (default: end + 2*freq)")
    s.set_defaults(fn=_cmd_prune_schedule)

    b = sub.add_parser("bench", help="time dense/csr/bsr multiply kernels")
    b.add_argument("--rows", type=int, default=1760)
    b.add_argument("--cols", type=int, default=1760)
    b.add_argument("--sparsity", type=float, default=0.9)
    b.add_argument("--blocks", default="1x1,4x4,16x16")
    b.add_argument("--batches", default="1,8,32,64")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--backends", default="",
                   help="comma list of numba,numpy (default: all available)")
    b.add_argument("--out", required=True)
    b.set_defaults(fn=_cmd_bench)

    r = sub.add_parser("report", help="diagnostics from a checkpoint or run report")
    r.add_argument("what", choices=("fanout", "layers", "curve"))
    r.add_argument("source", help="checkpoint (fanout/layers) or report CSV (curve)")
    r.add_argument("--out", required=True)
    r.add_argument("--bins", type=int, default=16)
    r.set_defaults(fn=_cmd_report)

    w = sub.add_parser("sweep", help="train once per grid line, tabulate results")
    w.add_argument("config")
    w.add_argument("grid", help="file of space-separated key=value overrides per line")
    w.add_argument("--out", required=True)
    w.set_defaults(fn=_cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        raise
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
