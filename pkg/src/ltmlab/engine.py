"""Unrolling, cross-entropy loss, exact BPTT, optimizers, and training.

The engine processes token streams in (T, B) windows: embed, run the
cell stack via the sequence kernels, project every step's top hidden
state onto the vocabulary, and backpropagate the summed negative
log-likelihood through the full window. Truncation happens only at
window boundaries; the forward state is carried across windows exactly,
so evaluation loss is independent of the window length.

Loss bookkeeping is in nats throughout; bits-per-character and
perplexity conversions happen once, in :class:`Metrics`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, asdict
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import checkpoint as ckpt_io
from . import kernels
from .model import Model, ModelConfig
from .numeric import Rng

_PROJ_CHUNK = 4096

OPTIMIZERS = ("sgd", "momentum", "adam")


class NonFiniteLossError(FloatingPointError):
    """Training hit a NaN/Inf loss; message names the offending batch."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    bptt_len: int = 64
    epochs: int = 20
    optimizer: str = "adam"
    lr: float = 2e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | str | None = "auto"
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.bptt_len < 1 or self.epochs < 0:
            raise ValueError("batch_size/bptt_len must be >= 1 and epochs >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if isinstance(self.grad_clip, str) and self.grad_clip != "auto":
            raise ValueError("grad_clip must be a number, None, or 'auto'")
        if isinstance(self.grad_clip, (int, float)) and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")

    def resolved_clip(self, cell_kind: str) -> Optional[float]:
        # plain rnn gets clipped by default; the gated cells run unclipped
        if self.grad_clip == "auto":
            return 5.0 if cell_kind == "rnn" else None
        return self.grad_clip

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Metrics(NamedTuple):
    nll_mean: float
    perplexity: float
    bpc: float
    tokens: int


def metrics_from_nll(nll_mean: float, tokens: int) -> Metrics:
    try:
        ppl = math.exp(nll_mean)
    except OverflowError:
        ppl = math.inf
    return Metrics(nll_mean, ppl, nll_mean / math.log(2.0), tokens)


class WindowRun(NamedTuple):
    loss_sum: float
    nll: np.ndarray            # (T, B) per-position nll in nats
    new_states: list
    grads: Optional[dict]
    grad_x: Optional[np.ndarray]   # (T, B, E) grad wrt embedded inputs
    traces: Optional[list]


# ---------------------------------------------------------------------------
# forward / backward over one window


def _project(model: Model, h_top: np.ndarray, y_tb: np.ndarray,
             weights: Optional[np.ndarray], need_grad: bool):
    """Project hidden states to logits chunk-wise and accumulate the loss.

    Returns (loss_sum, nll_flat, grad_h_flat, grad_w, grad_b); gradient
    entries are None when need_grad is false.
    """
    T, B, d = h_top.shape
    V = model.cfg.vocab
    W = model.projection()
    h_flat = h_top.reshape(T * B, d)
    y_flat = y_tb.reshape(T * B)
    w_flat = None if weights is None else weights.reshape(T * B)

    nll_flat = np.empty(T * B)
    gh_flat = np.empty((T * B, d)) if need_grad else None
    gw = np.zeros_like(W) if need_grad else None
    gb = np.zeros_like(model.out_b) if need_grad else None

    for lo in range(0, T * B, _PROJ_CHUNK):
        hi = min(lo + _PROJ_CHUNK, T * B)
        hc = h_flat[lo:hi]
        yc = y_flat[lo:hi]
        logits = hc @ W.T + model.out_b
        m = logits.max(axis=1, keepdims=True)
        ex = np.exp(logits - m)
        z = ex.sum(axis=1, keepdims=True)
        log_z = np.log(z) + m
        nll = log_z[:, 0] - logits[np.arange(hi - lo), yc]
        nll_flat[lo:hi] = nll
        if need_grad:
            glog = ex / z
            glog[np.arange(hi - lo), yc] -= 1.0
            if w_flat is not None:
                glog *= w_flat[lo:hi, None]
            gh_flat[lo:hi] = glog @ W
            gw += glog.T @ hc
            gb += glog.sum(axis=0)

    weighted = nll_flat if w_flat is None else nll_flat * w_flat
    return float(np.sum(weighted)), nll_flat, gh_flat, gw, gb


def run_window(model: Model, x_tb: np.ndarray, y_tb: np.ndarray, states: list,
               *, need_grad: bool = True, loss_weights: Optional[np.ndarray] = None,
               want_input_grads: bool = False, keep_traces: bool = False) -> WindowRun:
    """One truncated-BPTT window over ids of shape (T, B)."""
    cfg = model.cfg
    T, B = x_tb.shape
    E = cfg.embed_dim

    x_emb = model.embed[x_tb]  # (T, B, E)
    inp = x_emb
    traces = []
    new_states = []
    for li, p in enumerate(model.layers):
        trace, ns = kernels.seq_forward(p, inp, states[li], cfg.gate_mask)
        traces.append(trace)
        new_states.append(ns)
        inp = trace_h(trace)

    loss_sum, nll_flat, gh_flat, gw, gb = _project(
        model, inp, y_tb, loss_weights, need_grad)
    nll = nll_flat.reshape(T, B)

    if not need_grad:
        return WindowRun(loss_sum, nll, new_states, None, None,
                         traces if keep_traces else None)

    grads: dict[str, np.ndarray] = {}
    gh_seq = gh_flat.reshape(T, B, model.cfg.hidden)
    for li in range(len(model.layers) - 1, -1, -1):
        gparams, gx_seq, _gstate0 = kernels.seq_backward(
            model.layers[li], traces[li], gh_seq, cfg.gate_mask)
        for fname, arr in _grad_fields(gparams):
            grads[f"layer{li}.{fname}"] = arr
        gh_seq = gx_seq

    g_embed = np.zeros_like(model.embed)
    np.add.at(g_embed, x_tb.ravel(), gh_seq.reshape(T * B, E))
    if cfg.tie_embeddings:
        g_embed += gw
    else:
        grads["out.w"] = gw
    grads["embed"] = g_embed
    grads["out.b"] = gb

    return WindowRun(loss_sum, nll, new_states, grads,
                     gh_seq if want_input_grads else None,
                     traces if keep_traces else None)


def trace_h(trace: kernels.SeqTrace) -> np.ndarray:
    idx = {"ltm": 6, "lstm": 7, "gru": 4, "rnn": 1}[trace.kind]
    return trace.arrays[idx]


def _grad_fields(gparams):
    from dataclasses import fields
    for f in fields(gparams):
        v = getattr(gparams, f.name)
        if isinstance(v, np.ndarray):
            yield f.name, v


def _check_tokens(model: Model, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.shape[0] < 2:
        raise ValueError("token sequence must be 1-D with length >= 2")
    if tokens.min() < 0 or tokens.max() >= model.cfg.vocab:
        bad = int(tokens.max() if tokens.max() >= model.cfg.vocab else tokens.min())
        raise ValueError(f"token id {bad} outside vocabulary of size {model.cfg.vocab}")
    return tokens


def forward_sequence(model: Model, tokens, *, chunk: int = 512,
                     ) -> tuple[float, np.ndarray, list]:
    """Next-token loss over one full sequence (batch of one).

    Returns (loss_sum, per_step_nll, final_states); per_step_nll[t] is the
    nll of predicting tokens[t+1]. Internally chunked; state carry makes
    the result independent of the chunk size.
    """
    tokens = _check_tokens(model, tokens)
    states = model.zero_states(1)
    pieces = []
    n = tokens.shape[0]
    for lo in range(0, n - 1, chunk):
        hi = min(lo + chunk, n - 1)
        x = tokens[lo:hi, None]
        y = tokens[lo + 1:hi + 1, None]
        run = run_window(model, x, y, states, need_grad=False)
        states = run.new_states
        pieces.append(run.nll[:, 0])
    nll = np.concatenate(pieces)
    return float(np.sum(nll)), nll, states


def sequence_grads(model: Model, tokens) -> tuple[float, dict]:
    """Loss and exact full-window BPTT gradients for one sequence."""
    tokens = _check_tokens(model, tokens)
    states = model.zero_states(1)
    run = run_window(model, tokens[:-1, None], tokens[1:, None], states)
    return run.loss_sum, run.grads


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    kind = "base"

    def __init__(self, lr: float):
        self.lr = lr
        self.step_count = 0
        self.slots: dict[str, dict[str, np.ndarray]] = {}

    def slot_names(self) -> tuple[str, ...]:
        return ()

    def ensure_slots(self, model: Model) -> None:
        for name, p in model.named_params():
            entry = self.slots.setdefault(name, {})
            for s in self.slot_names():
                if s not in entry:
                    entry[s] = np.zeros_like(p)

    def step(self, model: Model, grads: dict) -> None:
        raise NotImplementedError

    def hyper(self) -> dict:
        return {"lr": self.lr}

    def named_slots(self, model: Model):
        """Deterministic (name, tensor) order for checkpointing."""
        self.ensure_slots(model)
        for name, _ in model.named_params():
            for s in self.slot_names():
                yield f"opt.{s}.{name}", self.slots[name][s]


class Sgd(Optimizer):
    kind = "sgd"

    def step(self, model, grads):
        self.step_count += 1
        for name, p in model.named_params():
            p -= self.lr * grads[name]


class Momentum(Optimizer):
    kind = "momentum"

    def __init__(self, lr, momentum=0.9):
        super().__init__(lr)
        self.momentum = momentum

    def slot_names(self):
        return ("vel",)

    def hyper(self):
        return {"lr": self.lr, "momentum": self.momentum}

    def step(self, model, grads):
        self.ensure_slots(model)
        self.step_count += 1
        for name, p in model.named_params():
            vel = self.slots[name]["vel"]
            vel *= self.momentum
            vel += grads[name]
            p -= self.lr * vel


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def slot_names(self):
        return ("m", "v")

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps}

    def step(self, model, grads):
        self.ensure_slots(model)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in model.named_params():
            g = grads[name]
            m = self.slots[name]["m"]
            v = self.slots[name]["v"]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == "sgd":
        return Sgd(cfg.lr)
    if cfg.optimizer == "momentum":
        return Momentum(cfg.lr, cfg.momentum)
    return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_grads(grads: dict, max_norm: Optional[float]) -> float:
    """Scale gradients to max_norm when they exceed it; returns the raw norm."""
    norm = global_grad_norm(grads)
    if max_norm is not None and norm > max_norm and norm > 0.0:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


# ---------------------------------------------------------------------------
# batching, evaluation, training


def batch_stream(ids: np.ndarray, batch_size: int) -> np.ndarray:
    """Split a token stream into batch_size contiguous shards, shape (B, S)."""
    n = ids.shape[0]
    s = n // batch_size
    if s < 2:
        raise ValueError(
            f"stream of {n} tokens is too short for batch_size={batch_size}")
    return ids[: batch_size * s].reshape(batch_size, s)


def _iter_windows(data: np.ndarray, bptt_len: int):
    """Yield (x, y) id windows of shape (T, B) walking the shards in order."""
    s = data.shape[1]
    for lo in range(0, s - 1, bptt_len):
        hi = min(lo + bptt_len, s - 1)
        x = np.ascontiguousarray(data[:, lo:hi].T)
        y = np.ascontiguousarray(data[:, lo + 1:hi + 1].T)
        yield lo, x, y


def evaluate(model: Model, ids, *, batch_size: int = 8,
             bptt_len: int = 256) -> Metrics:
    """Mean next-token nll over a split, with perplexity and bpc views."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[0] < 2:
        raise ValueError("cannot evaluate an empty split")
    b_eff = max(1, min(batch_size, ids.shape[0] // 2))
    data = batch_stream(ids, b_eff)
    states = model.zero_states(b_eff)
    total = 0.0
    count = 0
    for _, x, y in _iter_windows(data, bptt_len):
        run = run_window(model, x, y, states, need_grad=False)
        states = run.new_states
        total += float(np.sum(run.nll))
        count += run.nll.size
    return metrics_from_nll(total / count, count)


def train(model: Model, corpus, cfg: TrainConfig,
          report_sink: Optional[Callable[[dict], None]] = None,
          *, clock: Callable[[], float] = time.perf_counter) -> ckpt_io.Checkpoint:
    """Train over the corpus train split, reporting once per epoch per split.

    The report stream and returned checkpoint are bit-reproducible for a
    fixed config and seed (``clock`` is injectable so even the wall-time
    fields can be pinned in tests). Raises :class:`NonFiniteLossError`
    as soon as a window produces a NaN/Inf loss.
    """
    cfg.validate()
    opt = make_optimizer(cfg)
    opt.ensure_slots(model)
    rng = Rng(cfg.seed).child("train")
    clip = cfg.resolved_clip(model.cfg.cell_kind)
    data = batch_stream(np.asarray(corpus.train, dtype=np.int64), cfg.batch_size)

    for epoch in range(1, cfg.epochs + 1):
        t0 = clock()
        states = model.zero_states(cfg.batch_size)
        loss_total = 0.0
        token_total = 0
        norms = []
        for wi, (lo, x, y) in enumerate(_iter_windows(data, cfg.bptt_len)):
            run = run_window(model, x, y, states)
            if not math.isfinite(run.loss_sum):
                raise NonFiniteLossError(
                    f"non-finite loss in epoch {epoch}, window {wi} "
                    f"(shard positions {lo}..{lo + x.shape[0]})")
            states = run.new_states
            tokens = run.nll.size
            # update on the mean-loss gradient so lr is scale-free
            for g in run.grads.values():
                g /= tokens
            norms.append(clip_grads(run.grads, clip))
            opt.step(model, run.grads)
            loss_total += run.loss_sum
            token_total += tokens
        seconds = clock() - t0
        _emit(report_sink, epoch, "train", loss_total / token_total,
              float(np.mean(norms)), float(np.max(norms)), seconds)

        t1 = clock()
        vm = evaluate(model, corpus.valid, batch_size=cfg.batch_size,
                      bptt_len=cfg.bptt_len)
        _emit(report_sink, epoch, "valid", vm.nll_mean, None, None, clock() - t1)

    return make_checkpoint(model, opt, cfg, cfg.epochs, rng)


def _emit(sink, epoch: int, split: str, nll: float,
          gn_mean, gn_max, seconds: float) -> None:
    if sink is None:
        return
    m = metrics_from_nll(nll, 0)
    sink({
        "epoch": epoch,
        "split": split,
        "nll": nll,
        "ppl": m.perplexity,
        "bpc": m.bpc,
        "grad_norm_mean": gn_mean,
        "grad_norm_max": gn_max,
        "seconds": seconds,
    })


# ---------------------------------------------------------------------------
# checkpoint glue


def make_checkpoint(model: Model, opt: Optimizer, cfg: TrainConfig,
                    epoch: int, rng: Rng) -> ckpt_io.Checkpoint:
    tensors = dict(model.named_params())
    tensors.update(opt.named_slots(model))
    return ckpt_io.Checkpoint(
        model_config=model.cfg.to_dict(),
        train_config=cfg.to_dict(),
        epoch=epoch,
        rng_state=rng.get_state(),
        optimizer={"kind": opt.kind, "hyper": opt.hyper(),
                   "step_count": opt.step_count},
        tensors=tensors,
    )


def model_from_checkpoint(ckpt: ckpt_io.Checkpoint) -> Model:
    cfg = ModelConfig.from_dict(ckpt.model_config)
    params = {k: v for k, v in ckpt.tensors.items() if not k.startswith("opt.")}
    return Model.from_tensors(cfg, params)


def optimizer_from_checkpoint(ckpt: ckpt_io.Checkpoint, model: Model) -> Optimizer:
    cfg = TrainConfig.from_dict(ckpt.train_config) if ckpt.train_config else TrainConfig()
    info = ckpt.optimizer
    base = TrainConfig(optimizer=info["kind"], lr=info["hyper"]["lr"],
                       seed=cfg.seed)
    for k, v in info["hyper"].items():
        if hasattr(base, k):
            setattr(base, k, v)
    opt = make_optimizer(base)
    opt.step_count = info["step_count"]
    opt.ensure_slots(model)
    for name, arr in opt.named_slots(model):
        if name in ckpt.tensors:
            self_arr = arr
            self_arr[...] = ckpt.tensors[name]
    return opt
