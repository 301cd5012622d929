"""Gradual block pruning.

A monotonically growing magnitude threshold kills whole blocks: a live block
dies once its max absolute weight falls below the current threshold
(strict <), and dead blocks never come back. The threshold is recomputed
every ``freq`` iterations and is piecewise constant in between; it grows at
``start_slope`` per update until ``ramp_itr``, at ``ramp_slope`` afterwards,
and freezes at ``end_itr``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .formats import ShapeError, as_dense, check_divisible, _tiles


@dataclass(frozen=True)
class PruningHyperParams:
    start_itr: int
    ramp_itr: int
    end_itr: int
    start_slope: float | None = None  # threshold units per update
    ramp_slope: float | None = None
    freq: int = 100

    def validate(self, require_slopes: bool = True) -> None:
        if not (0 <= self.start_itr <= self.ramp_itr <= self.end_itr):
            raise ValueError(
                f"need 0 <= start <= ramp <= end, got "
                f"{self.start_itr}/{self.ramp_itr}/{self.end_itr}")
        if self.freq < 1:
            raise ValueError(f"freq must be >= 1, got {self.freq}")
        if require_slopes:
            if self.start_slope is None or self.ramp_slope is None:
                raise ValueError("slopes are unset; call resolve_slopes first")
            if self.start_slope <= 0:
                raise ValueError("start_slope must be positive")
            if self.ramp_slope < self.start_slope:
                raise ValueError("ramp_slope must be >= start_slope")


def start_slope_weight(q: float, freq: int, start_itr: int, ramp_itr: int,
                       end_itr: int) -> float:
    """Initial threshold slope for elementwise pruning.

    Chosen so the threshold reaches roughly ``q`` by ``end_itr`` assuming the
    post-ramp slope is 1.5x the initial one.
    """
    if q <= 0:
        raise ValueError(f"q must be positive, got {q}")
    if freq < 1:
        raise ValueError(f"freq must be >= 1, got {freq}")
    denom = 2 * (ramp_itr - start_itr) + 3 * (end_itr - ramp_itr)
    if denom <= 0:
        raise ValueError("degenerate schedule: start/ramp/end give a zero denominator")
    return 2.0 * q * freq / denom


def start_slope_block(theta_w: float, block_elems: int) -> float:
    """Scale the elementwise slope by the fourth root of the block area."""
    if theta_w <= 0:
        raise ValueError(f"theta_w must be positive, got {theta_w}")
    if block_elems < 1:
        raise ValueError(f"block_elems must be >= 1, got {block_elems}")
    return theta_w * block_elems ** 0.25


def percentile_q(weights, target_sparsity: float) -> float:
    """Nearest-rank quantile of |weights| (rank = ceil(p * n))."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("weights must be non-empty")
    if not 0.0 < target_sparsity < 1.0:
        raise ValueError(f"target_sparsity must be in (0, 1), got {target_sparsity}")
    mags = np.sort(np.abs(w))
    # small guard so p * n that lands on an integer is not pushed up by fp noise
    rank = max(1, int(math.ceil(target_sparsity * w.size - 1e-9)))
    return float(mags[rank - 1])


def threshold_at(hyper: PruningHyperParams, iteration: int) -> float:
    """Threshold in effect at ``iteration`` (0 before the first update)."""
    hyper.validate()
    if iteration < hyper.start_itr:
        return 0.0
    it = min(iteration, hyper.end_itr)
    n_updates = (it - hyper.start_itr + 1) // hyper.freq
    if n_updates == 0:
        return 0.0
    u = hyper.start_itr - 1 + n_updates * hyper.freq
    theta, phi, f = hyper.start_slope, hyper.ramp_slope, hyper.freq
    if u < hyper.ramp_itr:
        return theta * (u - hyper.start_itr + 1) / f
    return (theta * (hyper.ramp_itr - hyper.start_itr + 1)
            + phi * (u - hyper.ramp_itr + 1)) / f


def is_update_iteration(hyper: PruningHyperParams, iteration: int) -> bool:
    if not hyper.start_itr <= iteration <= hyper.end_itr:
        return False
    return (iteration - hyper.start_itr + 1) % hyper.freq == 0


def heuristic_schedule(total_iters: int, iters_per_epoch: int, total_epochs: int,
                       freq: int = 100) -> PruningHyperParams:
    """Schedule from run length alone: start at epoch 2, ramp at 20%, end at 40%.

    Slopes are left unset; resolve them from a weight quantile once weights
    exist (`resolve_slopes`).
    """
    if total_epochs < 5:
        raise ValueError(f"schedule needs at least 5 epochs, got {total_epochs}")
    if iters_per_epoch < 1 or total_iters < iters_per_epoch:
        raise ValueError("bad iteration counts")
    start = iters_per_epoch
    ramp = int(round(0.20 * total_iters))
    end = int(round(0.40 * total_iters))
    hp = PruningHyperParams(start, ramp, end, freq=freq)
    hp.validate(require_slopes=False)
    return hp


def resolve_slopes(hyper: PruningHyperParams, q: float, block_elems: int,
                   ramp_factor: float = 1.5) -> PruningHyperParams:
    """Fill in slopes from a magnitude quantile ``q`` and the block area."""
    theta_w = start_slope_weight(q, hyper.freq, hyper.start_itr, hyper.ramp_itr,
                                 hyper.end_itr)
    theta_b = start_slope_block(theta_w, block_elems)
    if ramp_factor < 1.0:
        raise ValueError(f"ramp_factor must be >= 1, got {ramp_factor}")
    return replace(hyper, start_slope=theta_b, ramp_slope=ramp_factor * theta_b)


def block_reduce_max(weights, block_h: int, block_w: int) -> np.ndarray:
    """Grid of per-block max |w|."""
    a = as_dense(weights)
    check_divisible(a.shape[0], a.shape[1], block_h, block_w)
    return np.abs(_tiles(a, block_h, block_w)).max(axis=(2, 3))


@dataclass(frozen=True)
class BlockMask:
    """Boolean grid over block positions; True = block alive.

    Masks only ever lose live blocks (see `update_mask`), which keeps the
    dead set monotone over a training run.
    """

    block_h: int
    block_w: int
    kept: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kept", np.ascontiguousarray(self.kept, dtype=bool))
        if self.kept.ndim != 2:
            raise ShapeError("mask grid must be 2-D")

    @property
    def dead_fraction(self) -> float:
        return float(np.count_nonzero(~self.kept)) / self.kept.size

    def element_mask(self) -> np.ndarray:
        return np.repeat(np.repeat(self.kept, self.block_h, axis=0),
                         self.block_w, axis=1)


def full_mask(rows: int, cols: int, block_h: int, block_w: int) -> BlockMask:
    check_divisible(rows, cols, block_h, block_w)
    return BlockMask(block_h, block_w,
                     np.ones((rows // block_h, cols // block_w), dtype=bool))


def update_mask(mask: BlockMask, weights, epsilon: float) -> BlockMask:
    """Kill live blocks whose max magnitude is strictly below ``epsilon``."""
    a = as_dense(weights)
    bm = block_reduce_max(a, mask.block_h, mask.block_w)
    if bm.shape != mask.kept.shape:
        raise ShapeError(f"mask grid {mask.kept.shape} does not match "
                         f"weight block grid {bm.shape}")
    return BlockMask(mask.block_h, mask.block_w, mask.kept & (bm >= epsilon))


def apply_mask(weights, mask: BlockMask) -> np.ndarray:
    """Zero the dead blocks; live blocks pass through unchanged."""
    a = as_dense(weights)
    em = mask.element_mask()
    if em.shape != a.shape:
        raise ShapeError(f"mask covers {em.shape}, weights are {a.shape}")
    return np.where(em, a, 0.0)


def truncate_to_block_sparsity(weights, block_h: int, block_w: int,
                               fraction: float) -> tuple[np.ndarray, BlockMask]:
    """One-shot magnitude pruning: zero the smallest blocks until the dead
    fraction is at least ``fraction``. Ties resolve in grid scan order."""
    a = as_dense(weights)
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    bm = block_reduce_max(a, block_h, block_w)
    n = bm.size
    k = int(math.ceil(fraction * n - 1e-9))
    kept = np.ones(n, dtype=bool)
    if k > 0:
        order = np.argsort(bm.ravel(), kind="stable")
        kept[order[:k]] = False
    mask = BlockMask(block_h, block_w, kept.reshape(bm.shape))
    return apply_mask(a, mask), mask


@dataclass
class PruningState:
    """Evolving threshold and masks for one layer type.

    Owned by a single training loop; the threshold moves only at update
    iterations and never decreases, and `masks` only lose blocks.
    """

    hyper: PruningHyperParams
    masks: dict[str, BlockMask]
    epsilon: float = 0.0
    iteration: int = 0

    def maybe_update(self, iteration: int, weights: dict[str, np.ndarray]) -> bool:
        """Advance to ``iteration``; refresh threshold and masks when due."""
        self.iteration = iteration
        if not is_update_iteration(self.hyper, iteration):
            return False
        self.epsilon = threshold_at(self.hyper, iteration)
        for name, mask in self.masks.items():
            self.masks[name] = update_mask(mask, weights[name], self.epsilon)
        return True

    @property
    def dead_blocks(self) -> int:
        return sum(int(np.count_nonzero(~m.kept)) for m in self.masks.values())

    @property
    def total_blocks(self) -> int:
        return sum(m.kept.size for m in self.masks.values())
