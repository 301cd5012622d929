"""Desk-scale recurrent language models with hand-written backprop.

Vanilla RNN and GRU layer stacks over a byte vocabulary, with a softmax
head. The sequence dimension is unrolled explicitly (truncated BPTT over a
window), input and head projections are batched over the whole window, and
only the recurrent matmuls run step by step. All math is float64.

GRU convention: z = sig(Wz x + Uz h + bz), r = sig(Wr x + Ur h + br),
c = tanh(Wc x + Uc (r*h) + bc), h' = (1-z)*h + z*c — so z gates the
candidate in, and z -> 0 copies the previous state through.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .formats import ShapeError, check_divisible, dense_to_bsr
from .kernels import bsr_matmul
from .pruning import BlockMask
from .regularizers import RegularizerConfig, penalty_grad, penalty_loss, regularizer_active

KINDS = ("rnn", "gru")
GATES = ("z", "r", "c")


class DivergenceError(RuntimeError):
    """Loss became non-finite."""


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class RecurrentModel:
    """Parameter container for an RNN/GRU stack plus output head.

    Per recurrent layer: input weights w_* (hidden x in_dim), recurrent
    weights (w_h for rnn, u_z/u_r/u_c for gru; hidden x hidden), biases.
    Head: ``head.w`` (vocab x hidden), ``head.b``. When ``block`` is given,
    every prunable matrix must tile evenly by it.
    """

    def __init__(self, kind: str, vocab: int, hidden: int, n_layers: int,
                 block: tuple[int, int] | None = None, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
        if vocab < 2 or hidden < 1 or n_layers < 1:
            raise ValueError("need vocab >= 2, hidden >= 1, layers >= 1")
        self.kind = kind
        self.vocab = vocab
        self.hidden = hidden
        self.n_layers = n_layers
        self.block = block
        self.params = params if params is not None else self._init_params(seed)
        if block is not None:
            for name in self.prunable():
                w = self.params[name]
                check_divisible(w.shape[0], w.shape[1], block[0], block[1])

    def _init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)

        def mat(rows, cols, fan_in):
            k = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-k, k, size=(rows, cols))

        p: dict[str, np.ndarray] = {}
        in_dim = self.vocab
        for li in range(self.n_layers):
            h = self.hidden
            if self.kind == "rnn":
                p[f"l{li}.w_x"] = mat(h, in_dim, in_dim)
                p[f"l{li}.w_h"] = mat(h, h, h)
                p[f"l{li}.b"] = np.zeros(h)
            else:
                for g in GATES:
                    p[f"l{li}.w_{g}"] = mat(h, in_dim, in_dim)
                    p[f"l{li}.u_{g}"] = mat(h, h, h)
                    p[f"l{li}.b_{g}"] = np.zeros(h)
            in_dim = h
        p["head.w"] = mat(self.vocab, self.hidden, self.hidden)
        p["head.b"] = np.zeros(self.vocab)
        return p

    def prunable(self) -> list[str]:
        return [n for n, v in self.params.items() if v.ndim == 2]

    @staticmethod
    def layer_type(name: str) -> str:
        """Hyper-parameter grouping: hidden-to-hidden vs everything else."""
        base = name.rsplit(".", 1)[-1]
        if base == "w_h" or base.startswith("u_"):
            return "recurrent"
        return "linear"

    def with_params(self, params: dict[str, np.ndarray]) -> "RecurrentModel":
        return RecurrentModel(self.kind, self.vocab, self.hidden, self.n_layers,
                              self.block, params=params)

    def zero_states(self, batch: int) -> list[np.ndarray]:
        return [np.zeros((self.hidden, batch)) for _ in range(self.n_layers)]

    def meta(self) -> dict:
        b = self.block
        return {"model": self.kind, "vocab": self.vocab, "hidden": self.hidden,
                "layers": self.n_layers,
                "block": f"{b[0]}x{b[1]}" if b else "none"}


def rnn_cell_forward(w_x, w_h, b, x_t, h_prev) -> np.ndarray:
    """h_t = tanh(w_x @ x_t + w_h @ h_prev + b); accepts vectors or panels."""
    w_x, w_h = np.asarray(w_x, float), np.asarray(w_h, float)
    x_t, h_prev, b = (np.asarray(v, float) for v in (x_t, h_prev, b))
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t, h_prev = x_t[:, None], h_prev[:, None]
    if w_x.shape[1] != x_t.shape[0] or w_h.shape[1] != h_prev.shape[0] \
            or w_x.shape[0] != w_h.shape[0] or b.shape[0] != w_x.shape[0]:
        raise ShapeError("rnn cell shapes do not chain")
    h = np.tanh(w_x @ x_t + w_h @ h_prev + b[:, None])
    return h[:, 0] if squeeze else h


def gru_cell_forward(params: dict, x_t, h_prev) -> np.ndarray:
    """One GRU step; ``params`` holds w_z/u_z/b_z, w_r/u_r/b_r, w_c/u_c/b_c."""
    x_t, h_prev = np.asarray(x_t, float), np.asarray(h_prev, float)
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t, h_prev = x_t[:, None], h_prev[:, None]
    try:
        wz, uz, bz = params["w_z"], params["u_z"], params["b_z"]
        wr, ur, br = params["w_r"], params["u_r"], params["b_r"]
        wc, uc, bc = params["w_c"], params["u_c"], params["b_c"]
    except KeyError as e:
        raise ShapeError(f"missing gru parameter {e}") from None
    if wz.shape[1] != x_t.shape[0] or uz.shape[1] != h_prev.shape[0]:
        raise ShapeError("gru cell shapes do not chain")
    z = _sigmoid(wz @ x_t + uz @ h_prev + np.asarray(bz)[:, None])
    r = _sigmoid(wr @ x_t + ur @ h_prev + np.asarray(br)[:, None])
    c = np.tanh(wc @ x_t + uc @ (r * h_prev) + np.asarray(bc)[:, None])
    h = (1.0 - z) * h_prev + z * c
    return h[:, 0] if squeeze else h


def _flat(x: np.ndarray) -> np.ndarray:
    # (T, H, B) -> (H, T*B), columns ordered t*B + b
    t, h, b = x.shape
    return x.transpose(1, 0, 2).reshape(h, t * b)


def _unflat(x: np.ndarray, t: int, b: int) -> np.ndarray:
    return np.ascontiguousarray(
        x.reshape(x.shape[0], t, b).transpose(1, 0, 2))


def _input_proj(w: np.ndarray, below: np.ndarray | None,
                ids: np.ndarray | None) -> np.ndarray:
    if ids is not None:
        # one-hot input = column gather
        return np.ascontiguousarray(w[:, ids].transpose(1, 0, 2))
    return _unflat(w @ _flat(below), below.shape[0], below.shape[2])


def _input_grads(w: np.ndarray, dPf: np.ndarray, below: np.ndarray | None,
                 ids: np.ndarray | None, vocab: int):
    if ids is not None:
        buf = np.zeros((vocab, dPf.shape[0]))
        np.add.at(buf, ids.reshape(-1), dPf.T)
        return np.ascontiguousarray(buf.T), None
    dW = dPf @ _flat(below).T
    dBelow = _unflat(w.T @ dPf, below.shape[0], below.shape[2])
    return dW, dBelow


# Forward recursions run the numpy kernel path unconditionally: they are
# tanh-bound, and numpy's vectorized transcendentals beat jitted scalar libm
# calls. Backward recursions are pure arithmetic and follow the env backend.


def _rnn_layer_forward(p, li, below, ids, h0):
    wx, wh, b = p[f"l{li}.w_x"], p[f"l{li}.w_h"], p[f"l{li}.b"]
    P = _input_proj(wx, below, ids)
    Hs = kernels.rnn_seq_forward(P, np.ascontiguousarray(wh), b,
                                 np.ascontiguousarray(h0), backend="numpy")
    return Hs, (Hs, h0)


def _rnn_layer_backward(p, li, below, ids, cache, dH, vocab, grads):
    wx, wh = p[f"l{li}.w_x"], p[f"l{li}.w_h"]
    Hs, h0 = cache
    dP, _ = kernels.rnn_seq_backward(np.ascontiguousarray(dH), Hs,
                                     np.ascontiguousarray(wh.T))
    Hprev = np.concatenate([h0[None], Hs[:-1]], axis=0)
    dPf = _flat(dP)
    grads[f"l{li}.w_h"] = dPf @ _flat(Hprev).T
    grads[f"l{li}.b"] = dP.sum(axis=(0, 2))
    dW, dBelow = _input_grads(wx, dPf, below, ids, vocab)
    grads[f"l{li}.w_x"] = dW
    return dBelow


def _gru_layer_forward(p, li, below, ids, h0):
    W = np.vstack([p[f"l{li}.w_{g}"] for g in GATES])
    Uzr = np.ascontiguousarray(np.vstack([p[f"l{li}.u_z"], p[f"l{li}.u_r"]]))
    uc = np.ascontiguousarray(p[f"l{li}.u_c"])
    P = _input_proj(W, below, ids)
    Z, R, C, RH, Hs = kernels.gru_seq_forward(
        P, Uzr, uc, p[f"l{li}.b_z"], p[f"l{li}.b_r"], p[f"l{li}.b_c"],
        np.ascontiguousarray(h0), backend="numpy")
    return Hs, (Z, R, C, RH, Hs, h0, Uzr, uc, W)


def _gru_layer_backward(p, li, below, ids, cache, dH, vocab, grads):
    Z, R, C, RH, Hs, h0, Uzr, uc, W = cache
    H = Hs.shape[1]
    dAz, dAr, dAc, _ = kernels.gru_seq_backward(
        np.ascontiguousarray(dH), Z, R, C, Hs, np.ascontiguousarray(h0),
        np.ascontiguousarray(Uzr.T), np.ascontiguousarray(uc.T))
    Hprev = np.concatenate([h0[None], Hs[:-1]], axis=0)
    Hpf = _flat(Hprev)
    dAzf, dArf, dAcf = _flat(dAz), _flat(dAr), _flat(dAc)
    grads[f"l{li}.u_z"] = dAzf @ Hpf.T
    grads[f"l{li}.u_r"] = dArf @ Hpf.T
    grads[f"l{li}.u_c"] = dAcf @ _flat(RH).T
    grads[f"l{li}.b_z"] = dAz.sum(axis=(0, 2))
    grads[f"l{li}.b_r"] = dAr.sum(axis=(0, 2))
    grads[f"l{li}.b_c"] = dAc.sum(axis=(0, 2))
    dPf = np.vstack([dAzf, dArf, dAcf])
    dW, dBelow = _input_grads(W, dPf, below, ids, vocab)
    grads[f"l{li}.w_z"] = dW[:H]
    grads[f"l{li}.w_r"] = dW[H:2 * H]
    grads[f"l{li}.w_c"] = dW[2 * H:]
    return dBelow


def _check_batch(model, inputs, targets):
    X = np.asarray(inputs)
    Y = np.asarray(targets)
    if X.ndim != 2 or X.shape != Y.shape:
        raise ShapeError(f"inputs/targets must be equal (batch, time) arrays, "
                         f"got {X.shape} and {Y.shape}")
    if X.min() < 0 or X.max() >= model.vocab or Y.min() < 0 or Y.max() >= model.vocab:
        raise ShapeError("token id out of vocabulary range")
    return X.T.astype(np.intp), Y.T.astype(np.intp)  # time-major


def forward_backward(model: RecurrentModel, inputs, targets,
                     h0: list[np.ndarray] | None = None,
                     reg: RegularizerConfig | None = None, iteration: int = 0,
                     masks: dict[str, BlockMask] | None = None):
    """Window loss and exact gradients of it.

    Loss is mean cross-entropy per token plus any active penalty terms over
    the prunable matrices. Gradients inside dead blocks are zeroed. Returns
    (loss, grads, final hidden states).
    """
    ids, tgt = _check_batch(model, inputs, targets)
    T, B = ids.shape
    p = model.params
    if h0 is None:
        h0 = model.zero_states(B)

    fwd = _rnn_layer_forward if model.kind == "rnn" else _gru_layer_forward
    bwd = _rnn_layer_backward if model.kind == "rnn" else _gru_layer_backward

    caches, acts = [], []
    below, below_ids = None, ids
    for li in range(model.n_layers):
        out, cache = fwd(p, li, below, below_ids, h0[li])
        caches.append(cache)
        acts.append(out)
        below, below_ids = out, None

    Hf = _flat(acts[-1])
    n_tok = Hf.shape[1]
    logits = p["head.w"] @ Hf
    logits += p["head.b"][:, None]
    cols = np.arange(n_tok)
    tgt_flat = tgt.reshape(-1)
    tgt_vals = logits[tgt_flat, cols].copy()
    mx = logits.max(axis=0)
    logits -= mx
    np.exp(logits, out=logits)  # logits now holds shifted exponentials
    zsum = logits.sum(axis=0)
    lse = mx + np.log(zsum)
    data_loss = float((lse - tgt_vals).mean())

    loss = data_loss
    pen = {}
    if reg is not None and reg.kind != "none" and regularizer_active(reg, iteration):
        for name in model.prunable():
            m = masks.get(name) if masks else None
            loss += penalty_loss(p[name], reg, m)
            pen[name] = penalty_grad(p[name], reg, m)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss at iteration {iteration}")

    dlogits = logits  # reuse the buffer: softmax minus one-hot, over tokens
    dlogits /= zsum
    dlogits[tgt_flat, cols] -= 1.0
    dlogits /= n_tok
    grads: dict[str, np.ndarray] = {
        "head.w": dlogits @ Hf.T,
        "head.b": dlogits.sum(axis=1),
    }
    dH = _unflat(p["head.w"].T @ dlogits, T, B)
    for li in range(model.n_layers - 1, -1, -1):
        below = acts[li - 1] if li > 0 else None
        below_ids = ids if li == 0 else None
        dH = bwd(p, li, below, below_ids, caches[li], dH, model.vocab, grads)

    for name, g in pen.items():
        grads[name] = grads[name] + g
    if masks:
        for name, m in masks.items():
            grads[name] = np.where(m.element_mask(), grads[name], 0.0)
    h_final = [np.ascontiguousarray(a[-1]) for a in acts]
    return loss, grads, h_final


def _matmul_closure(model: RecurrentModel, kernel: str):
    if kernel == "dense":
        return lambda name, x: model.params[name] @ x
    if kernel != "bsr":
        raise ValueError(f"kernel must be 'dense' or 'bsr', got {kernel!r}")
    bh, bw = model.block if model.block else (1, 1)
    cache = {n: dense_to_bsr(model.params[n], bh, bw) for n in model.prunable()}
    return lambda name, x: bsr_matmul(cache[name], x)


def evaluate(model: RecurrentModel, token_ids, batch: int, seq_len: int,
             kernel: str = "dense") -> float:
    """Mean cross-entropy (nats/token) over contiguous windows of the corpus.

    Deterministic and side-effect free; ``kernel='bsr'`` routes every
    prunable matmul through the block-sparse kernels.
    """
    ids = np.asarray(token_ids).ravel().astype(np.intp)
    if ids.size < batch * (seq_len + 1):
        raise ShapeError("corpus too small for one evaluation window")
    mm = _matmul_closure(model, kernel)
    stream_len = ids.size // batch
    data = ids[:stream_len * batch].reshape(batch, stream_len)
    n_windows = (stream_len - 1) // seq_len
    h = model.zero_states(batch)
    total, count = 0.0, 0
    for w in range(n_windows):
        x = data[:, w * seq_len:(w + 1) * seq_len].T
        y = data[:, w * seq_len + 1:(w + 1) * seq_len + 1].T
        T, B = x.shape
        p = model.params
        below, below_ids = None, x
        for li in range(model.n_layers):
            if below_ids is not None:
                xf = np.zeros((model.vocab, T * B))
                xf[below_ids.reshape(-1), np.arange(T * B)] = 1.0
            else:
                xf = _flat(below)
            hi = h[li]
            Hs = np.empty((T, model.hidden, B))
            if model.kind == "rnn":
                P = _unflat(mm(f"l{li}.w_x", xf), T, B)
                bc = p[f"l{li}.b"][:, None]
                for t in range(T):
                    hi = np.tanh(P[t] + mm(f"l{li}.w_h", hi) + bc)
                    Hs[t] = hi
            else:
                Pz = _unflat(mm(f"l{li}.w_z", xf), T, B)
                Pr = _unflat(mm(f"l{li}.w_r", xf), T, B)
                Pc = _unflat(mm(f"l{li}.w_c", xf), T, B)
                bz, br, bcc = (p[f"l{li}.b_{g}"][:, None] for g in GATES)
                for t in range(T):
                    z = _sigmoid(Pz[t] + mm(f"l{li}.u_z", hi) + bz)
                    r = _sigmoid(Pr[t] + mm(f"l{li}.u_r", hi) + br)
                    c = np.tanh(Pc[t] + mm(f"l{li}.u_c", r * hi) + bcc)
                    hi = (1.0 - z) * hi + z * c
                    Hs[t] = hi
            h[li] = hi
            below, below_ids = Hs, None
        logits = mm("head.w", _flat(below)) + p["head.b"][:, None]
        mx = logits.max(axis=0)
        lse = mx + np.log(np.exp(logits - mx).sum(axis=0))
        cols = np.arange(T * B)
        total += float((lse - logits[y.reshape(-1), cols]).sum())
        count += T * B
    return total / count
