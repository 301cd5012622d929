"""Diagnostics: kernel benchmarks, pruning curves, fan-out histograms,
per-layer sparsity, and hyper-parameter sweeps.

Every CSV here is deterministic given seed and config, timing columns
excepted. Benchmarks verify each configuration against the dense product
before timing it; a mismatching kernel is rejected, never timed.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .config import TrainingConfig, apply_overrides
from .formats import dense_to_bsr, dense_to_csr, indexing_overhead
from .kernels import BACKENDS, bsr_matmul, csr_matmul, dense_matmul, numba_available
from .model import RecurrentModel
from .training import RunReport, train

_VALUE_BYTES = 8  # kernels run on float64
_INDEX_BYTES = 8


@dataclass
class BenchmarkRecord:
    kernel: str
    backend: str
    rows: int
    cols: int
    batch: int
    block_h: int
    block_w: int
    sparsity: float
    wall_time: float
    speedup_vs_dense: float
    footprint_bytes: int
    footprint_ratio: float


def _bench_matrix(rows, cols, block, sparsity_target, rng):
    a = rng.uniform(-1.0, 1.0, size=(rows, cols))
    bh, bw = block
    grid = (rows // bh, cols // bw)
    dead = rng.random(grid) < sparsity_target
    a = np.where(np.repeat(np.repeat(~dead, bh, axis=0), bw, axis=1), a, 0.0)
    return a, float(dead.mean())


def _time_call(fn, reps):
    fn()  # warm-up (also triggers jit compilation), excluded
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def _footprint(kind, a_dense, block):
    n = a_dense.size * _VALUE_BYTES
    if kind == "dense":
        return n
    if kind == "csr":
        m = dense_to_csr(a_dense)
        return (m.nnz * _VALUE_BYTES + m.nnz * _INDEX_BYTES
                + m.row_ptr.size * _INDEX_BYTES)
    m = dense_to_bsr(a_dense, *block)
    return (m.blocks.size * _VALUE_BYTES + m.col_idx.size * _INDEX_BYTES
            + m.row_ptr.size * _INDEX_BYTES)


def run_bench(rows: int, cols: int, sparsity_target: float,
              block_sizes: list[tuple[int, int]], batch_sizes: list[int],
              reps: int = 5, seed: int = 0,
              backends: list[str] | None = None) -> list[BenchmarkRecord]:
    """Time dense/csr/bsr products for every (block, batch, backend) cell."""
    if reps < 3:
        raise ValueError(f"need reps >= 3, got {reps}")
    if backends is None:
        backends = [b for b in BACKENDS if b != "numba" or numba_available()]
    records = []
    for block in block_sizes:
        rng = np.random.default_rng(seed)
        a, achieved = _bench_matrix(rows, cols, block, sparsity_target, rng)
        a_csr = dense_to_csr(a)
        a_bsr = dense_to_bsr(a, *block)
        for batch in batch_sizes:
            b = rng.uniform(-1.0, 1.0, size=(cols, batch))
            reference = a @ b
            ref_scale = max(np.abs(reference).max(), 1.0)
            for backend in backends:
                runs = {
                    "dense": lambda: dense_matmul(a, b, backend=backend),
                    "csr": lambda: csr_matmul(a_csr, b, backend=backend),
                    "bsr": lambda: bsr_matmul(a_bsr, b, backend=backend),
                }
                times = {}
                for kernel, fn in runs.items():
                    err = np.abs(fn() - reference).max() / ref_scale
                    if err > 1e-6:
                        raise RuntimeError(
                            f"{kernel}/{backend} product mismatches the dense "
                            f"oracle (rel err {err:.3e}); refusing to time it")
                    times[kernel] = _time_call(fn, reps)
                for kernel in runs:
                    fp = _footprint(kernel, a, block)
                    records.append(BenchmarkRecord(
                        kernel, backend, rows, cols, batch, block[0], block[1],
                        achieved, times[kernel], times["dense"] / times[kernel],
                        fp, fp / (a.size * _VALUE_BYTES)))
    return records


def bench_csv(records: list[BenchmarkRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kernel", "backend", "rows", "cols", "batch", "block_h", "block_w",
                "sparsity", "wall_time_s", "speedup_vs_dense", "footprint_bytes",
                "footprint_ratio"])
    for r in records:
        w.writerow([r.kernel, r.backend, r.rows, r.cols, r.batch, r.block_h,
                    r.block_w, repr(r.sparsity), repr(r.wall_time),
                    repr(r.speedup_vs_dense), r.footprint_bytes,
                    repr(r.footprint_ratio)])
    return buf.getvalue()


def analytic_footprint_ratio(block: tuple[int, int], block_sparsity: float) -> float:
    """Expected BSR bytes over dense bytes for a given block sparsity."""
    rep = indexing_overhead(_VALUE_BYTES * 8, _INDEX_BYTES * 8, block[0], block[1])
    return (1.0 - block_sparsity) * (1.0 + rep.overhead_ratio)


def export_prune_curve(report: RunReport) -> str:
    """CSV (iteration, epsilon, sparsity) for the threshold/sparsity staircase.

    ``epsilon`` is the recurrent-type threshold (both layer types share the
    schedule timing; only the slope scale differs).
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "epsilon", "sparsity"])
    for r in report.records:
        w.writerow([r.iteration, repr(r.epsilon_recurrent), repr(r.block_sparsity)])
    return buf.getvalue()


@dataclass
class FanoutHistogram:
    """Output-connection counts for one layer's hidden neurons.

    A neuron's fan-out is the number of nonzero weights consuming its
    activation: column nonzeros of the layer's own recurrent matrices plus
    the next layer's input matrices (or the head). The first bin [0, 0]
    holds the dead-neuron count.
    """

    layer: int
    neuron_count: int
    dead_count: int
    bin_edges: list[tuple[int, int]] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)


def _consumers(model: RecurrentModel, layer: int) -> list[str]:
    names = []
    if model.kind == "rnn":
        names.append(f"l{layer}.w_h")
    else:
        names += [f"l{layer}.u_{g}" for g in ("z", "r", "c")]
    if layer + 1 < model.n_layers:
        if model.kind == "rnn":
            names.append(f"l{layer + 1}.w_x")
        else:
            names += [f"l{layer + 1}.w_{g}" for g in ("z", "r", "c")]
    else:
        names.append("head.w")
    return names


def fanout_histograms(model: RecurrentModel, bins: int = 16) -> list[FanoutHistogram]:
    out = []
    for layer in range(model.n_layers):
        fan = np.zeros(model.hidden, dtype=np.int64)
        for name in _consumers(model, layer):
            fan += np.count_nonzero(model.params[name] != 0.0, axis=0)
        dead = int(np.count_nonzero(fan == 0))
        hist = FanoutHistogram(layer, model.hidden, dead)
        hist.bin_edges.append((0, 0))
        hist.counts.append(dead)
        top = int(fan.max())
        if top > 0:
            width = max(1, -(-top // bins))  # ceil division
            lo = 1
            while lo <= top:
                hi = min(lo + width - 1, top)
                hist.bin_edges.append((lo, hi))
                hist.counts.append(int(np.count_nonzero((fan >= lo) & (fan <= hi))))
                lo = hi + 1
        out.append(hist)
    return out


def fanout_csv(hists: list[FanoutHistogram]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "bin_lo", "bin_hi", "count"])
    for h in hists:
        for (lo, hi), c in zip(h.bin_edges, h.counts):
            w.writerow([h.layer, lo, hi, c])
    return buf.getvalue()


def layer_sparsity_csv(model: RecurrentModel, block: tuple[int, int]) -> str:
    """Per prunable matrix: elementwise and block sparsity, recomputed."""
    from .formats import block_sparsity, sparsity

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["matrix", "rows", "cols", "sparsity", "block_sparsity"])
    for name in model.prunable():
        m = model.params[name]
        bs = ""
        if m.shape[0] % block[0] == 0 and m.shape[1] % block[1] == 0:
            bs = repr(block_sparsity(m, *block))
        w.writerow([name, m.shape[0], m.shape[1], repr(sparsity(m)), bs])
    return buf.getvalue()


def sparsity_sweep(base: TrainingConfig, grid: list[dict[str, str]],
                   tokens: np.ndarray) -> list[dict]:
    """One training run per grid line; divergent runs are recorded, not fatal.

    Returns rows sorted by achieved sparsity: run id, status, block size,
    final block sparsity, last validation loss.
    """
    rows = []
    for i, overrides in enumerate(grid):
        cfg = base
        try:
            cfg = apply_overrides(base, overrides)
            report = train(cfg, tokens=tokens)
        except Exception as e:  # config errors count as failed runs
            rows.append({"run": i, "status": f"error:{type(e).__name__}",
                         "block": f"{cfg.block[0]}x{cfg.block[1]}",
                         "sparsity": "", "val_loss": ""})
            continue
        status = "diverged" if report.diverged else "ok"
        val = report.epochs[-1].val_loss if report.epochs else ""
        rows.append({"run": i, "status": status,
                     "block": f"{cfg.block[0]}x{cfg.block[1]}",
                     "sparsity": report.final_block_sparsity if not report.diverged else "",
                     "val_loss": val})
    rows.sort(key=lambda r: (r["sparsity"] == "", r["sparsity"]))
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "status", "block", "sparsity", "val_loss"])
    for r in rows:
        w.writerow([r["run"], r["status"], r["block"],
                    repr(r["sparsity"]) if r["sparsity"] != "" else "",
                    repr(r["val_loss"]) if r["val_loss"] != "" else ""])
    return buf.getvalue()
