"""Training loop: Nesterov SGD over truncated BPTT windows, with the pruning
schedule and regularization window woven in.

Per iteration: gradients are taken at the momentum lookahead point,
`nesterov_step` advances (weights, velocity), then masks are re-applied so
dead blocks stay exactly zero. At update iterations inside the pruning
window the threshold is recomputed and masks shrink; after the end
iteration both freeze. A run is deterministic given its seed and config.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as data_mod
from .config import TrainingConfig
from .container import load_checkpoint, save_checkpoint
from .formats import block_sparsity, sparsity
from .model import DivergenceError, RecurrentModel, evaluate, forward_backward
from .pruning import (PruningHyperParams, PruningState, full_mask,
                      heuristic_schedule, percentile_q, resolve_slopes)

LAYER_TYPES = ("recurrent", "linear")


def nesterov_step(params, velocity, grads, lr: float, momentum: float):
    """Classical Nesterov update: v' = mu*v - lr*g, w' = w + v'.

    ``grads`` must be evaluated at the lookahead point (w + mu*v); the
    training loop does exactly that. Accepts dicts of arrays or bare arrays.
    """
    if isinstance(params, np.ndarray):
        v = momentum * velocity - lr * grads
        return params + v, v
    new_p, new_v = {}, {}
    for k, w in params.items():
        if w.shape != grads[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        v = momentum * velocity[k] - lr * grads[k]
        new_v[k] = v
        new_p[k] = w + v
    return new_p, new_v


def clip_global_norm(grads: dict[str, np.ndarray], threshold: float) -> float:
    """Scale all gradients so their joint l2 norm is at most ``threshold``."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = total ** 0.5
    if threshold > 0 and norm > threshold:
        scale = threshold / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    epsilon_recurrent: float
    epsilon_linear: float
    block_sparsity: float


@dataclass
class EpochRecord:
    epoch: int
    iteration: int
    val_loss: float


@dataclass
class RunReport:
    """Everything the analysis commands need from one training run."""

    records: list[IterationRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    layer_sparsity: dict[str, tuple[float, float]] = field(default_factory=dict)
    checkpoint_path: str | None = None
    diverged: bool = False
    final_block_sparsity: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "loss", "epsilon_recurrent", "epsilon_linear",
                    "block_sparsity", "epoch", "val_loss"])
        by_iter = {e.iteration: e for e in self.epochs}
        for r in self.records:
            e = by_iter.get(r.iteration)
            w.writerow([r.iteration, repr(r.loss), repr(r.epsilon_recurrent),
                        repr(r.epsilon_linear), repr(r.block_sparsity),
                        e.epoch if e else "", repr(e.val_loss) if e else ""])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def _global_dead_fraction(states: dict[str, PruningState]) -> float:
    dead = sum(s.dead_blocks for s in states.values())
    total = sum(s.total_blocks for s in states.values())
    return dead / total if total else 0.0


def _build_pruning_states(cfg: TrainingConfig, model: RecurrentModel,
                          total_iters: int, iters_per_epoch: int):
    ps = cfg.prune
    if not ps.enabled:
        return {}
    if ps.start_itr is not None or ps.ramp_itr is not None or ps.end_itr is not None:
        if None in (ps.start_itr, ps.ramp_itr, ps.end_itr):
            raise ValueError("explicit schedules need all of start/ramp/end")
        hyper = PruningHyperParams(ps.start_itr, ps.ramp_itr, ps.end_itr, freq=ps.freq)
        hyper.validate(require_slopes=False)
    else:
        hyper = heuristic_schedule(total_iters, iters_per_epoch, cfg.epochs,
                                   freq=ps.freq)
    states = {}
    for lt in LAYER_TYPES:
        names = [n for n in model.prunable() if model.layer_type(n) == lt]
        if not names:
            continue
        masks = {n: full_mask(*model.params[n].shape, *cfg.block) for n in names}
        states[lt] = PruningState(hyper=hyper, masks=masks)
    return states


def _q_for_type(params: dict[str, np.ndarray], names: list[str],
                target: float) -> float:
    flat = np.concatenate([params[n].ravel() for n in names])
    return percentile_q(flat, target)


def _resolve_state_slopes(cfg: TrainingConfig, live_params: dict,
                          states: dict[str, PruningState],
                          warm_params: dict[str, np.ndarray] | None) -> None:
    ps = cfg.prune
    block_elems = cfg.block[0] * cfg.block[1]
    for lt, st in states.items():
        if st.hyper.start_slope is not None:
            continue
        if ps.theta is not None:
            theta_b = ps.theta * block_elems ** 0.25
            st.hyper = replace(st.hyper, start_slope=theta_b,
                               ramp_slope=ps.ramp_factor * theta_b)
            continue
        if ps.q is not None:
            q = ps.q
        else:
            source = warm_params if warm_params is not None else live_params
            names = [n for n in st.masks]
            q = _q_for_type(source, names, ps.target_sparsity)
        st.hyper = resolve_slopes(st.hyper, q, block_elems, ps.ramp_factor)


def _all_masks(states: dict[str, PruningState]):
    masks = {}
    for st in states.values():
        masks.update(st.masks)
    return masks


def _apply_all_masks(states, params, velocity) -> None:
    for st in states.values():
        for name, mask in st.masks.items():
            em = mask.element_mask()
            params[name] = np.where(em, params[name], 0.0)
            velocity[name] = np.where(em, velocity[name], 0.0)


def train(cfg: TrainingConfig, tokens: np.ndarray | None = None,
          checkpoint_path: str | None = None, report_path: str | None = None,
          on_mask_update=None) -> RunReport:
    """Run the full schedule; returns the populated RunReport.

    ``on_mask_update(iteration, epsilons, params, masks)`` fires after every
    threshold update (before the new masks are applied to the weights), which
    is enough to audit the whole mask trajectory.
    """
    cfg.validate()
    if tokens is None:
        if cfg.data_path is None:
            raise ValueError("no corpus: provide tokens or set data.path")
        tokens = data_mod.load_corpus(cfg.data_path)
    train_ids, val_ids = data_mod.split_corpus(tokens, cfg.val_fraction)
    streams = data_mod.make_streams(train_ids, cfg.batch)
    iters_per_epoch = data_mod.windows_per_epoch(train_ids.size, cfg.batch, cfg.seq_len)
    if iters_per_epoch < 1:
        raise ValueError("corpus too small for one window per epoch")
    total_iters = iters_per_epoch * cfg.epochs

    model = RecurrentModel(cfg.model_kind, cfg.vocab, cfg.hidden, cfg.n_layers,
                           block=cfg.block if cfg.prune.enabled else None,
                           seed=cfg.seed)
    params = model.params
    velocity = {k: np.zeros_like(v) for k, v in params.items()}

    states = _build_pruning_states(cfg, model, total_iters, iters_per_epoch)
    warm_params = None
    if cfg.prune.enabled and cfg.prune.warm_checkpoint:
        _, warm_params, _ = load_checkpoint(cfg.prune.warm_checkpoint)

    reg = cfg.reg
    if reg.kind != "none" and reg.active_until is None:
        end = next(iter(states.values())).hyper.end_itr if states else total_iters - 1
        reg = replace(reg, active_until=end)

    report = RunReport()
    mu = cfg.momentum
    iteration = 0
    can_eval = val_ids.size >= cfg.batch * (cfg.seq_len + 1)

    def _checkpoint(path):
        if path is None:
            return
        meta = model.meta()
        meta["config_hash"] = cfg.hash
        grids = {n: m.kept for n, m in _all_masks(states).items()}
        save_checkpoint(path, meta, params, grids)

    for epoch in range(cfg.epochs):
        h = model.zero_states(cfg.batch)
        for x, y in data_mod.iter_windows(streams, cfg.seq_len):
            if states and iteration == next(iter(states.values())).hyper.start_itr:
                _resolve_state_slopes(cfg, params, states, warm_params)
            look = {k: params[k] + mu * velocity[k] for k in params}
            masks = _all_masks(states)
            try:
                loss, grads, h = forward_backward(
                    model.with_params(look), x, y, h0=h, reg=reg,
                    iteration=iteration, masks=masks or None)
            except DivergenceError:
                report.diverged = True
                report.checkpoint_path = checkpoint_path
                if report_path:
                    report.save_csv(report_path)
                return report
            clip_global_norm(grads, cfg.clip)
            params, velocity = nesterov_step(params, velocity, grads, cfg.lr, mu)
            updated = False
            for st in states.values():
                updated |= st.maybe_update(iteration, params)
            if updated and on_mask_update is not None:
                eps = {lt: st.epsilon for lt, st in states.items()}
                on_mask_update(iteration, eps, params, _all_masks(states))
            _apply_all_masks(states, params, velocity)
            report.records.append(IterationRecord(
                iteration, loss,
                states["recurrent"].epsilon if "recurrent" in states else 0.0,
                states["linear"].epsilon if "linear" in states else 0.0,
                _global_dead_fraction(states)))
            iteration += 1
        model.params = params
        if can_eval:
            val = evaluate(model, val_ids, cfg.batch, cfg.seq_len)
            report.epochs.append(EpochRecord(epoch, iteration - 1, val))
        _checkpoint(checkpoint_path)

    model.params = params
    for name in model.prunable():
        report.layer_sparsity[name] = (
            sparsity(params[name]),
            block_sparsity(params[name], *cfg.block))
    report.final_block_sparsity = _global_dead_fraction(states)
    report.checkpoint_path = checkpoint_path
    _checkpoint(checkpoint_path)
    if report_path:
        report.save_csv(report_path)
    return report


def model_from_checkpoint(path) -> tuple[RecurrentModel, dict, dict]:
    """Rebuild a RecurrentModel (plus masks and meta) from a checkpoint."""
    meta, raw, mask_grids = load_checkpoint(path)
    kind = meta["model"]
    vocab, hidden, layers = int(meta["vocab"]), int(meta["hidden"]), int(meta["layers"])
    block = None
    if meta.get("block", "none") != "none":
        bh, _, bw = meta["block"].partition("x")
        block = (int(bh), int(bw))
    params = {}
    for name, v in raw.items():
        base = name.rsplit(".", 1)[-1]
        if base == "b" or base.startswith("b_"):
            params[name] = v.ravel()
        else:
            params[name] = v
    model = RecurrentModel(kind, vocab, hidden, layers, block=block, params=params)
    return model, mask_grids, meta


def load_report_csv(path) -> RunReport:
    report = RunReport()
    with open(path, "r", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        for row in rd:
            report.records.append(IterationRecord(
                int(row["iteration"]), float(row["loss"]),
                float(row["epsilon_recurrent"]), float(row["epsilon_linear"]),
                float(row["block_sparsity"])))
            if row["val_loss"]:
                report.epochs.append(EpochRecord(
                    int(row["epoch"]), int(row["iteration"]), float(row["val_loss"])))
    if report.records:
        report.final_block_sparsity = report.records[-1].block_sparsity
    return report
