"""Flat key=value training configuration files.

Lines are ``section.key=value``; blank lines and ``#`` comments are ignored.
Unknown keys are an error so typos fail loudly. See README for the full key
reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .container import config_hash
from .regularizers import RegularizerConfig


@dataclass(frozen=True)
class PruneSettings:
    enabled: bool = False
    target_sparsity: float = 0.9
    freq: int = 100
    start_itr: int | None = None  # explicit schedule overrides the heuristic
    ramp_itr: int | None = None
    end_itr: int | None = None
    q: float | None = None        # explicit magnitude quantile
    theta: float | None = None    # explicit elementwise slope
    ramp_factor: float = 1.5
    warm_checkpoint: str | None = None


@dataclass(frozen=True)
class TrainingConfig:
    model_kind: str = "gru"
    hidden: int = 64
    n_layers: int = 2
    vocab: int = 256
    data_path: str | None = None
    val_fraction: float = 0.05
    epochs: int = 25
    lr: float = 0.5
    momentum: float = 0.9
    batch: int = 32
    seq_len: int = 64
    seed: int = 1234
    clip: float = 5.0
    block: tuple[int, int] = (4, 4)
    prune: PruneSettings = field(default_factory=PruneSettings)
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    raw_text: str = ""

    def validate(self) -> None:
        if self.model_kind not in ("rnn", "gru"):
            raise ValueError(f"model.kind must be rnn or gru, got {self.model_kind!r}")
        if self.epochs < 5:
            raise ValueError(f"train.epochs must be >= 5, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"train.momentum must be in [0, 1), got {self.momentum}")
        if self.lr <= 0 or self.batch < 1 or self.seq_len < 1:
            raise ValueError("lr/batch/seq_len must be positive")
        if self.block[0] < 1 or self.block[1] < 1:
            raise ValueError("block dims must be >= 1")
        self.reg.validate()

    @property
    def hash(self) -> str:
        return config_hash(self.raw_text)


def _parse_bool(v: str) -> bool:
    lv = v.strip().lower()
    if lv in ("1", "true", "yes", "on"):
        return True
    if lv in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _parse_block(v: str) -> tuple[int, int]:
    try:
        h, _, w = v.lower().partition("x")
        return int(h), int(w)
    except ValueError:
        raise ValueError(f"expected HxW block spec, got {v!r}") from None


def parse_config(text: str) -> TrainingConfig:
    kv: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, _, v = line.partition("=")
        k = k.strip()
        if k in kv:
            raise ValueError(f"line {lineno}: duplicate key {k}")
        kv[k] = v.strip()
    return config_from_dict(kv, raw_text=text)


def load_config(path) -> TrainingConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


_SCALARS = {
    "model.kind": ("model_kind", str),
    "model.hidden": ("hidden", int),
    "model.layers": ("n_layers", int),
    "model.vocab": ("vocab", int),
    "data.path": ("data_path", str),
    "data.val_fraction": ("val_fraction", float),
    "train.epochs": ("epochs", int),
    "train.lr": ("lr", float),
    "train.momentum": ("momentum", float),
    "train.batch": ("batch", int),
    "train.seq_len": ("seq_len", int),
    "train.seed": ("seed", int),
    "train.clip": ("clip", float),
}

_PRUNE = {
    "prune.enabled": ("enabled", _parse_bool),
    "prune.target_sparsity": ("target_sparsity", float),
    "prune.freq": ("freq", int),
    "prune.start_itr": ("start_itr", int),
    "prune.ramp_itr": ("ramp_itr", int),
    "prune.end_itr": ("end_itr", int),
    "prune.q": ("q", float),
    "prune.theta": ("theta", float),
    "prune.ramp_factor": ("ramp_factor", float),
    "prune.warm_checkpoint": ("warm_checkpoint", str),
}


def config_from_dict(kv: dict[str, str], raw_text: str = "") -> TrainingConfig:
    cfg = TrainingConfig(raw_text=raw_text)
    prune_kw, reg_kw, top_kw = {}, {}, {}
    block = cfg.block
    for key, val in kv.items():
        if key in _SCALARS:
            attr, conv = _SCALARS[key]
            top_kw[attr] = conv(val)
        elif key in _PRUNE:
            attr, conv = _PRUNE[key]
            prune_kw[attr] = conv(val)
        elif key == "block.h":
            block = (int(val), block[1])
        elif key == "block.w":
            block = (block[0], int(val))
        elif key == "reg.kind":
            reg_kw["kind"] = val
        elif key == "reg.lambda":
            reg_kw["lam"] = float(val)
        elif key == "reg.block":
            reg_kw["block_h"], reg_kw["block_w"] = _parse_block(val)
        elif key == "reg.active_until":
            reg_kw["active_until"] = int(val)
        else:
            raise ValueError(f"unknown config key {key!r}")
    # regularizer group geometry follows the pruning block unless overridden
    reg_kw.setdefault("block_h", block[0])
    reg_kw.setdefault("block_w", block[1])
    cfg = replace(cfg, block=block, prune=replace(cfg.prune, **prune_kw),
                  reg=replace(cfg.reg, **reg_kw), **top_kw)
    cfg.validate()
    return cfg


def apply_overrides(cfg: TrainingConfig, overrides: dict[str, str]) -> TrainingConfig:
    """Re-parse the config text with extra/overridden keys (for sweeps)."""
    kv: dict[str, str] = {}
    for line in cfg.raw_text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        k, _, v = line.partition("=")
        kv[k.strip()] = v.strip()
    kv.update(overrides)
    text = "\n".join(f"{k}={v}" for k, v in sorted(kv.items()))
    return config_from_dict(kv, raw_text=text)
