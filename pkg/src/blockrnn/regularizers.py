"""Sparsity-inducing penalties with analytic gradients.

Group lasso sums the l2 norm over weight blocks and can drive whole blocks
to exact zero; l1 and l-half act elementwise. Subgradient conventions:
sgn(0) = 0, and a zero-norm block contributes a zero gradient. The l-half
gradient clamps |w| below at ``L_HALF_DELTA`` to bound its singularity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formats import as_dense, check_divisible, _tiles
from .pruning import BlockMask

KINDS = ("none", "group_lasso", "l1", "l_half")
L_HALF_DELTA = 1e-8


@dataclass(frozen=True)
class RegularizerConfig:
    kind: str = "none"
    lam: float = 0.0
    block_h: int = 1
    block_w: int = 1
    active_until: int | None = None  # defaults to the pruning end iteration

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.kind == "group_lasso" and (self.block_h < 1 or self.block_w < 1):
            raise ValueError("group lasso needs positive block dims")


def regularizer_active(cfg: RegularizerConfig, iteration: int) -> bool:
    """The penalty applies through ``active_until`` inclusive (always, if unset)."""
    if cfg.active_until is None:
        return True
    return iteration <= cfg.active_until


def _require(cfg: RegularizerConfig, kind: str) -> None:
    cfg.validate()
    if cfg.kind != kind:
        raise ValueError(f"config kind is {cfg.kind!r}, operation needs {kind!r}")


def _block_norms(a: np.ndarray, cfg: RegularizerConfig,
                 mask: BlockMask | None) -> tuple[np.ndarray, np.ndarray]:
    check_divisible(a.shape[0], a.shape[1], cfg.block_h, cfg.block_w)
    tiles = _tiles(a, cfg.block_h, cfg.block_w)
    norms = np.sqrt((tiles * tiles).sum(axis=(2, 3)))
    if mask is not None:
        if mask.kept.shape != norms.shape:
            raise ValueError(f"mask grid {mask.kept.shape} does not match "
                             f"block grid {norms.shape}")
        norms = np.where(mask.kept, norms, 0.0)
    return tiles, norms


def group_lasso_loss(weights, cfg: RegularizerConfig,
                     mask: BlockMask | None = None) -> float:
    _require(cfg, "group_lasso")
    _, norms = _block_norms(as_dense(weights), cfg, mask)
    return cfg.lam * float(norms.sum())


def group_lasso_grad(weights, cfg: RegularizerConfig,
                     mask: BlockMask | None = None) -> np.ndarray:
    _require(cfg, "group_lasso")
    a = as_dense(weights)
    tiles, norms = _block_norms(a, cfg, mask)
    # normalize before scaling by lambda: for singleton blocks w/|w| is
    # exactly +-1, which keeps the 1x1 case identical to the l1 gradient
    safe = np.where(norms > 0.0, norms, 1.0)[:, :, None, None]
    g = tiles / safe * cfg.lam
    g[~(norms > 0.0)] = 0.0
    return np.ascontiguousarray(g.swapaxes(1, 2).reshape(a.shape))


def l1_loss(weights, cfg: RegularizerConfig) -> float:
    _require(cfg, "l1")
    return cfg.lam * float(np.abs(as_dense(weights)).sum())


def l1_grad(weights, cfg: RegularizerConfig) -> np.ndarray:
    _require(cfg, "l1")
    return cfg.lam * np.sign(as_dense(weights))


def l_half_loss(weights, cfg: RegularizerConfig) -> float:
    _require(cfg, "l_half")
    return cfg.lam * float(np.sqrt(np.abs(as_dense(weights))).sum())


def l_half_grad(weights, cfg: RegularizerConfig) -> np.ndarray:
    _require(cfg, "l_half")
    a = as_dense(weights)
    mag = np.maximum(np.abs(a), L_HALF_DELTA)
    return cfg.lam * 0.5 / np.sqrt(mag) * np.sign(a)


def penalty_loss(weights, cfg: RegularizerConfig,
                 mask: BlockMask | None = None) -> float:
    if cfg.kind == "none":
        return 0.0
    if cfg.kind == "group_lasso":
        return group_lasso_loss(weights, cfg, mask)
    if cfg.kind == "l1":
        return l1_loss(weights, cfg)
    return l_half_loss(weights, cfg)


def penalty_grad(weights, cfg: RegularizerConfig,
                 mask: BlockMask | None = None) -> np.ndarray:
    if cfg.kind == "none":
        return np.zeros_like(as_dense(weights))
    if cfg.kind == "group_lasso":
        return group_lasso_grad(weights, cfg, mask)
    if cfg.kind == "l1":
        return l1_grad(weights, cfg)
    return l_half_grad(weights, cfg)
