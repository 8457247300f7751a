"""Single-step recurrent cells with exact hand-derived backward passes.

Four cell kinds live here: the sigmoid-gated additive-memory cell ("ltm")
and the rnn/lstm/gru baselines. Each forward step is a pure function from
(params, state, input) to (trace, new state); each backward consumes the
trace and upstream gradients and returns exact gradients for every
parameter, the previous state, and the input.

The ltm step computes, in order (W applied as matrix-vector products,
``*`` elementwise):

    a   = h_prev + x
    L1  = gate1(W1 a)          input branch
    L2  = gate2(W2 a)          input branch
    Lp  = L1 * L2
    Cp  = Lp + c_prev          additive carry, never erases state
    C   = gate4(W4 Cp)         squashed cell state
    L3  = gate3(W3 a)          output branch
    h   = C * L3

where gate_k is the logistic sigmoid, or the constant all-ones function
when the corresponding :class:`GateMask` flag is set ("opening" the gate
for ablation; the matrix product is then skipped entirely). With
``gate3_linear`` the third gate applies no squashing at all.

Functions in this module operate on single 1-D state/input vectors and
are the auditable reference; the batched sequence loops used by the
training engine live in :mod:`ltmlab.kernels` and are tested against
these step functions.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import NamedTuple, Optional

import numpy as np

from .numeric import Rng, ShapeError, sigmoid

CELL_KINDS = ("ltm", "lstm", "gru", "rnn")


@dataclass(frozen=True)
class GateMask:
    """Which sigmoid gates are forced to emit all-ones (ablation)."""

    open1: bool = False
    open2: bool = False
    open3: bool = False
    open4: bool = False

    def any_open(self) -> bool:
        return self.open1 or self.open2 or self.open3 or self.open4

    def to_dict(self) -> dict:
        return {
            "open1": self.open1,
            "open2": self.open2,
            "open3": self.open3,
            "open4": self.open4,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GateMask":
        return cls(**{k: bool(v) for k, v in d.items()})


ALL_GATES_ACTIVE = GateMask()


def _check_square(name: str, w: np.ndarray, d: int) -> None:
    if w.shape != (d, d):
        raise ShapeError(f"{name} must be {d}x{d}, got {w.shape}")


def _zeros_like_params(p):
    """Params-shaped container of zero arrays (used as a gradient accumulator)."""
    kw = {}
    for f in fields(p):
        v = getattr(p, f.name)
        kw[f.name] = np.zeros_like(v) if isinstance(v, np.ndarray) else v
    return replace(p, **kw)


# ---------------------------------------------------------------------------
# ltm


@dataclass
class LtmParams:
    """Four square weight matrices, one per gate; optional per-gate biases."""

    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    w4: np.ndarray
    b1: Optional[np.ndarray] = None
    b2: Optional[np.ndarray] = None
    b3: Optional[np.ndarray] = None
    b4: Optional[np.ndarray] = None
    gate3_linear: bool = False

    def __post_init__(self):
        d = self.w1.shape[0]
        for name in ("w1", "w2", "w3", "w4"):
            _check_square(name, getattr(self, name), d)
        for name in ("b1", "b2", "b3", "b4"):
            b = getattr(self, name)
            if b is not None and b.shape != (d,):
                raise ShapeError(f"{name} must have length {d}, got {b.shape}")

    @property
    def d(self) -> int:
        return self.w1.shape[0]


class LtmState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


class LtmStepTrace(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    lp: np.ndarray
    cp: np.ndarray
    c: np.ndarray
    l3: np.ndarray
    h: np.ndarray


def ltm_init(rng: Rng, d: int, bound: float | None = None,
             bias: bool = False, gate3_linear: bool = False) -> LtmParams:
    b = 1.0 / np.sqrt(d) if bound is None else bound
    mats = [rng.uniform(-b, b, (d, d)) for _ in range(4)]
    biases = [np.zeros(d) for _ in range(4)] if bias else [None] * 4
    return LtmParams(*mats, *biases, gate3_linear=gate3_linear)


def ltm_zero_state(d: int) -> LtmState:
    return LtmState(np.zeros(d), np.zeros(d))


def _gate_pre(w: np.ndarray, a: np.ndarray, b: Optional[np.ndarray]) -> np.ndarray:
    z = w @ a
    return z if b is None else z + b


def ltm_step(p: LtmParams, s: LtmState, x: np.ndarray,
             mask: GateMask = ALL_GATES_ACTIVE) -> tuple[LtmStepTrace, LtmState]:
    d = p.d
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (d,):
        raise ShapeError(f"input must have length {d}, got {x.shape}")
    if s.h.shape != (d,) or s.c.shape != (d,):
        raise ShapeError(f"state dims {s.h.shape}/{s.c.shape} do not match d={d}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(s.h)) and np.all(np.isfinite(s.c))):
        raise FloatingPointError("ltm_step requires finite input and state")

    a = s.h + x
    ones = np.ones(d)
    l1 = ones if mask.open1 else sigmoid(_gate_pre(p.w1, a, p.b1))
    l2 = ones if mask.open2 else sigmoid(_gate_pre(p.w2, a, p.b2))
    lp = l1 * l2
    cp = lp + s.c
    c = ones if mask.open4 else sigmoid(_gate_pre(p.w4, cp, p.b4))
    if mask.open3:
        l3 = ones
    elif p.gate3_linear:
        l3 = _gate_pre(p.w3, a, p.b3)
    else:
        l3 = sigmoid(_gate_pre(p.w3, a, p.b3))
    h = c * l3
    trace = LtmStepTrace(x, s.h, s.c, l1, l2, lp, cp, c, l3, h)
    return trace, LtmState(h, c)


def ltm_backward(p: LtmParams, trace: LtmStepTrace, grad_h: np.ndarray,
                 grad_c: np.ndarray, mask: GateMask = ALL_GATES_ACTIVE,
                 ) -> tuple[LtmParams, np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of grad_h . h + grad_c . C through one step.

    Returns (param_grads, grad_h_prev, grad_c_prev, grad_x). Opened gates
    contribute exact-zero weight gradients and pass no gradient.
    """
    d = p.d
    if trace.h.shape != (d,):
        raise ShapeError("trace does not match params")
    a = trace.h_prev + trace.x
    g = _zeros_like_params(p)
    ga = np.zeros(d)

    # h = C * L3
    g_c_total = grad_c + grad_h * trace.l3
    if not mask.open3:
        gl3 = grad_h * trace.c
        gz3 = gl3 if p.gate3_linear else gl3 * trace.l3 * (1.0 - trace.l3)
        g.w3 += np.outer(gz3, a)
        if p.b3 is not None:
            g.b3 += gz3
        ga += p.w3.T @ gz3

    # C = sigmoid(W4 Cp); opened gate emits a constant, so nothing flows back
    if mask.open4:
        gcp = np.zeros(d)
    else:
        gz4 = g_c_total * trace.c * (1.0 - trace.c)
        g.w4 += np.outer(gz4, trace.cp)
        if p.b4 is not None:
            g.b4 += gz4
        gcp = p.w4.T @ gz4

    # Cp = L1*L2 + c_prev
    grad_c_prev = gcp.copy()
    gl1 = gcp * trace.l2
    gl2 = gcp * trace.l1
    if not mask.open1:
        gz1 = gl1 * trace.l1 * (1.0 - trace.l1)
        g.w1 += np.outer(gz1, a)
        if p.b1 is not None:
            g.b1 += gz1
        ga += p.w1.T @ gz1
    if not mask.open2:
        gz2 = gl2 * trace.l2 * (1.0 - trace.l2)
        g.w2 += np.outer(gz2, a)
        if p.b2 is not None:
            g.b2 += gz2
        ga += p.w2.T @ gz2

    return g, ga.copy(), grad_c_prev, ga.copy()


# ---------------------------------------------------------------------------
# lstm


@dataclass
class LstmParams:
    """Gate weights over the concatenation [h_prev, x]; one bias per gate."""

    wf: np.ndarray
    wi: np.ndarray
    wg: np.ndarray
    wo: np.ndarray
    bf: np.ndarray
    bi: np.ndarray
    bg: np.ndarray
    bo: np.ndarray

    def __post_init__(self):
        d, cat = self.wf.shape
        if cat <= d:
            raise ShapeError(f"wf must be (d, d+in) with in >= 1, got {self.wf.shape}")
        for name in ("wi", "wg", "wo"):
            if getattr(self, name).shape != (d, cat):
                raise ShapeError(f"{name} must be {d}x{cat}")
        for name in ("bf", "bi", "bg", "bo"):
            if getattr(self, name).shape != (d,):
                raise ShapeError(f"{name} must have length {d}")

    @property
    def d(self) -> int:
        return self.wf.shape[0]

    @property
    def in_dim(self) -> int:
        return self.wf.shape[1] - self.wf.shape[0]


class LstmState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


class LstmStepTrace(NamedTuple):
    xcat: np.ndarray
    c_prev: np.ndarray
    f: np.ndarray
    i: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tc: np.ndarray
    h: np.ndarray


def lstm_init(rng: Rng, d: int, in_dim: int, bound: float | None = None) -> LstmParams:
    b = 1.0 / np.sqrt(d + in_dim) if bound is None else bound
    mats = [rng.uniform(-b, b, (d, d + in_dim)) for _ in range(4)]
    # forget gate starts open: standard trick to ease early carry of state
    biases = [np.ones(d), np.zeros(d), np.zeros(d), np.zeros(d)]
    return LstmParams(*mats, *biases)


def lstm_zero_state(d: int) -> LstmState:
    return LstmState(np.zeros(d), np.zeros(d))


def lstm_step(p: LstmParams, s: LstmState, x: np.ndarray) -> tuple[LstmStepTrace, LstmState]:
    if x.shape != (p.in_dim,):
        raise ShapeError(f"input must have length {p.in_dim}, got {x.shape}")
    xcat = np.concatenate([s.h, np.asarray(x, dtype=np.float64)])
    f = sigmoid(p.wf @ xcat + p.bf)
    i = sigmoid(p.wi @ xcat + p.bi)
    g = np.tanh(p.wg @ xcat + p.bg)
    o = sigmoid(p.wo @ xcat + p.bo)
    c = f * s.c + i * g
    tc = np.tanh(c)
    h = o * tc
    return LstmStepTrace(xcat, s.c, f, i, g, o, c, tc, h), LstmState(h, c)


def lstm_backward(p: LstmParams, trace: LstmStepTrace, grad_h: np.ndarray,
                  grad_c: np.ndarray) -> tuple[LstmParams, np.ndarray, np.ndarray, np.ndarray]:
    d = p.d
    g = _zeros_like_params(p)
    go = grad_h * trace.tc
    gc_tot = grad_c + grad_h * trace.o * (1.0 - trace.tc ** 2)
    gf = gc_tot * trace.c_prev
    gi = gc_tot * trace.g
    gg = gc_tot * trace.i
    grad_c_prev = gc_tot * trace.f

    gcat = np.zeros_like(trace.xcat)
    for w_name, b_name, gate, ggate, kind in (
        ("wf", "bf", trace.f, gf, "sig"),
        ("wi", "bi", trace.i, gi, "sig"),
        ("wg", "bg", trace.g, gg, "tanh"),
        ("wo", "bo", trace.o, go, "sig"),
    ):
        gz = ggate * (gate * (1.0 - gate) if kind == "sig" else (1.0 - gate ** 2))
        setattr(g, w_name, getattr(g, w_name) + np.outer(gz, trace.xcat))
        setattr(g, b_name, getattr(g, b_name) + gz)
        gcat += getattr(p, w_name).T @ gz

    return g, gcat[:d].copy(), grad_c_prev, gcat[d:].copy()


# ---------------------------------------------------------------------------
# gru


@dataclass
class GruParams:
    """Update (z), reset (r) and candidate (n) transforms, split by source."""

    wzx: np.ndarray
    wzh: np.ndarray
    wrx: np.ndarray
    wrh: np.ndarray
    wnx: np.ndarray
    wnh: np.ndarray
    bz: np.ndarray
    br: np.ndarray
    bnx: np.ndarray
    bnh: np.ndarray

    def __post_init__(self):
        d, in_dim = self.wzx.shape
        for name in ("wrx", "wnx"):
            if getattr(self, name).shape != (d, in_dim):
                raise ShapeError(f"{name} must be {d}x{in_dim}")
        for name in ("wzh", "wrh", "wnh"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}")
        for name in ("bz", "br", "bnx", "bnh"):
            if getattr(self, name).shape != (d,):
                raise ShapeError(f"{name} must have length {d}")

    @property
    def d(self) -> int:
        return self.wzx.shape[0]

    @property
    def in_dim(self) -> int:
        return self.wzx.shape[1]


class GruState(NamedTuple):
    h: np.ndarray


class GruStepTrace(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    hh: np.ndarray
    n: np.ndarray
    h: np.ndarray


def gru_init(rng: Rng, d: int, in_dim: int, bound: float | None = None) -> GruParams:
    b = 1.0 / np.sqrt(d + in_dim) if bound is None else bound
    mats = [rng.uniform(-b, b, shape) for shape in
            [(d, in_dim), (d, d)] * 3]
    biases = [np.zeros(d) for _ in range(4)]
    return GruParams(*mats, *biases)


def gru_zero_state(d: int) -> GruState:
    return GruState(np.zeros(d))


def gru_step(p: GruParams, s: GruState, x: np.ndarray) -> tuple[GruStepTrace, GruState]:
    if x.shape != (p.in_dim,):
        raise ShapeError(f"input must have length {p.in_dim}, got {x.shape}")
    x = np.asarray(x, dtype=np.float64)
    z = sigmoid(p.wzx @ x + p.wzh @ s.h + p.bz)
    r = sigmoid(p.wrx @ x + p.wrh @ s.h + p.br)
    hh = p.wnh @ s.h + p.bnh
    n = np.tanh(p.wnx @ x + p.bnx + r * hh)
    h = (1.0 - z) * n + z * s.h
    return GruStepTrace(x, s.h, z, r, hh, n, h), GruState(h)


def gru_backward(p: GruParams, trace: GruStepTrace, grad_h: np.ndarray,
                 ) -> tuple[GruParams, np.ndarray, np.ndarray]:
    """Returns (param_grads, grad_h_prev, grad_x)."""
    g = _zeros_like_params(p)
    gz = grad_h * (trace.h_prev - trace.n)
    gn = grad_h * (1.0 - trace.z)
    grad_h_prev = grad_h * trace.z

    gan = gn * (1.0 - trace.n ** 2)
    g.wnx += np.outer(gan, trace.x)
    g.bnx += gan
    gx = p.wnx.T @ gan
    ghh = gan * trace.r
    gr = gan * trace.hh
    g.wnh += np.outer(ghh, trace.h_prev)
    g.bnh += ghh
    grad_h_prev = grad_h_prev + p.wnh.T @ ghh

    gar = gr * trace.r * (1.0 - trace.r)
    g.wrx += np.outer(gar, trace.x)
    g.wrh += np.outer(gar, trace.h_prev)
    g.br += gar
    gx += p.wrx.T @ gar
    grad_h_prev = grad_h_prev + p.wrh.T @ gar

    gaz = gz * trace.z * (1.0 - trace.z)
    g.wzx += np.outer(gaz, trace.x)
    g.wzh += np.outer(gaz, trace.h_prev)
    g.bz += gaz
    gx += p.wzx.T @ gaz
    grad_h_prev = grad_h_prev + p.wzh.T @ gaz

    return g, grad_h_prev, gx


# ---------------------------------------------------------------------------
# rnn


@dataclass
class RnnParams:
    """Single tanh transform over the concatenation [y_prev, x]."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        d, cat = self.w.shape
        if cat <= d:
            raise ShapeError(f"w must be (d, d+in) with in >= 1, got {self.w.shape}")
        if self.b.shape != (d,):
            raise ShapeError(f"b must have length {d}")

    @property
    def d(self) -> int:
        return self.w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w.shape[1] - self.w.shape[0]


class RnnState(NamedTuple):
    h: np.ndarray


class RnnStepTrace(NamedTuple):
    xcat: np.ndarray
    h: np.ndarray


def rnn_init(rng: Rng, d: int, in_dim: int, bound: float | None = None) -> RnnParams:
    b = 1.0 / np.sqrt(d + in_dim) if bound is None else bound
    return RnnParams(rng.uniform(-b, b, (d, d + in_dim)), np.zeros(d))


def rnn_zero_state(d: int) -> RnnState:
    return RnnState(np.zeros(d))


def rnn_step(p: RnnParams, s: RnnState, x: np.ndarray) -> tuple[RnnStepTrace, RnnState]:
    if x.shape != (p.in_dim,):
        raise ShapeError(f"input must have length {p.in_dim}, got {x.shape}")
    xcat = np.concatenate([s.h, np.asarray(x, dtype=np.float64)])
    h = np.tanh(p.w @ xcat + p.b)
    return RnnStepTrace(xcat, h), RnnState(h)


def rnn_backward(p: RnnParams, trace: RnnStepTrace, grad_h: np.ndarray,
                 ) -> tuple[RnnParams, np.ndarray, np.ndarray]:
    """Returns (param_grads, grad_h_prev, grad_x)."""
    d = p.d
    g = _zeros_like_params(p)
    ga = grad_h * (1.0 - trace.h ** 2)
    g.w += np.outer(ga, trace.xcat)
    g.b += ga
    gcat = p.w.T @ ga
    return g, gcat[:d].copy(), gcat[d:].copy()


# ---------------------------------------------------------------------------
# stacking


def zero_state(params) -> tuple:
    """Zero initial state matching a params object's cell kind."""
    if isinstance(params, LtmParams):
        return ltm_zero_state(params.d)
    if isinstance(params, LstmParams):
        return lstm_zero_state(params.d)
    if isinstance(params, GruParams):
        return gru_zero_state(params.d)
    if isinstance(params, RnnParams):
        return rnn_zero_state(params.d)
    raise TypeError(f"unknown cell params {type(params)!r}")


def _step_any(params, state, x, mask):
    if isinstance(params, LtmParams):
        return ltm_step(params, state, x, mask)
    if isinstance(params, LstmParams):
        return lstm_step(params, state, x)
    if isinstance(params, GruParams):
        return gru_step(params, state, x)
    if isinstance(params, RnnParams):
        return rnn_step(params, state, x)
    raise TypeError(f"unknown cell params {type(params)!r}")


def stack_step(layers: list, states: list, x: np.ndarray,
               mask: GateMask = ALL_GATES_ACTIVE) -> tuple[list, list, np.ndarray]:
    """Feed x through a stack of cells, layer l consuming layer l-1's output.

    Returns (per-layer traces, per-layer new states, top layer's h).
    """
    traces, new_states = [], []
    inp = x
    for li, (p, s) in enumerate(zip(layers, states)):
        try:
            trace, ns = _step_any(p, s, inp, mask)
        except ShapeError as e:
            raise ShapeError(f"layer {li}: {e}") from None
        traces.append(trace)
        new_states.append(ns)
        inp = ns.h if hasattr(ns, "h") else ns[0]
    return traces, new_states, inp


def stack_backward(layers: list, traces: list, grad_top_h: np.ndarray,
                   grad_states: list | None = None,
                   mask: GateMask = ALL_GATES_ACTIVE) -> tuple[list, list, np.ndarray]:
    """Backward through one stacked step.

    grad_states carries upstream gradients on each layer's new state (h and,
    where present, c); grad_top_h is added to the top layer's h gradient.
    Returns (per-layer param grads, per-layer grads on the previous states,
    grad wrt the stack input x).
    """
    n = len(layers)
    if grad_states is None:
        grad_states = [None] * n
    layer_grads: list = [None] * n
    prev_state_grads: list = [None] * n
    gh_from_above = grad_top_h
    for li in range(n - 1, -1, -1):
        p, tr, gs = layers[li], traces[li], grad_states[li]
        d = p.d
        gh = np.array(gh_from_above, dtype=np.float64, copy=True)
        gc = np.zeros(d)
        if gs is not None:
            gh = gh + gs[0]
            if len(gs) > 1:
                gc = gc + gs[1]
        if isinstance(p, LtmParams):
            g, ghp, gcp, gx = ltm_backward(p, tr, gh, gc, mask)
            prev_state_grads[li] = (ghp, gcp)
        elif isinstance(p, LstmParams):
            g, ghp, gcp, gx = lstm_backward(p, tr, gh, gc)
            prev_state_grads[li] = (ghp, gcp)
        elif isinstance(p, GruParams):
            g, ghp, gx = gru_backward(p, tr, gh)
            prev_state_grads[li] = (ghp,)
        else:
            g, ghp, gx = rnn_backward(p, tr, gh)
            prev_state_grads[li] = (ghp,)
        layer_grads[li] = g
        gh_from_above = gx
    return layer_grads, prev_state_grads, gh_from_above
