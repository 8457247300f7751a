"""Sequence-level cell loops: the hot kernels of the training engine.

Each kernel unrolls one cell over a (T, B, d) input block in a single
call, which is where essentially all training time goes. The kernel
bodies are written once in numpy style and JIT-compiled with numba when
it is available; the identical bodies run as plain numpy otherwise.

Backend selection:

    LTMLAB_BACKEND=auto    numba if importable, else numpy (default)
    LTMLAB_BACKEND=numba   require numba, error if missing
    LTMLAB_BACKEND=numpy   force the pure-numpy path

``set_backend()`` overrides the environment for the current process
(used by tests and the backend benchmark). Compilation is lazy and
cached on disk, so numpy-only runs never pay JIT cost.

Weight convention: parameters store W as (out, in) and kernels receive
the transposed copy for the forward products, so every np.dot runs on
C-contiguous operands.
"""

from __future__ import annotations

import os
from typing import NamedTuple, Optional

import numpy as np

from .cells import (
    GateMask,
    GruParams,
    GruState,
    LstmParams,
    LstmState,
    LtmParams,
    LtmState,
    RnnParams,
    RnnState,
    _zeros_like_params,
)

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco


_ENV_VAR = "LTMLAB_BACKEND"
_override: Optional[str] = None
_jitted: dict = {}


def set_backend(name: Optional[str]) -> None:
    """Force 'numba' or 'numpy' for this process; None restores env/auto."""
    global _override
    if name is not None and name not in ("numba", "numpy", "auto"):
        raise ValueError(f"unknown backend {name!r}")
    _override = None if name in (None, "auto") else name


def active_backend() -> str:
    choice = _override or os.environ.get(_ENV_VAR, "auto").lower()
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError("LTMLAB_BACKEND=numba but numba is not importable")
        return "numba"
    return "numba" if NUMBA_AVAILABLE else "numpy"


def _fn(impl):
    """Resolve an implementation for the active backend, compiling lazily."""
    if active_backend() == "numpy":
        return impl
    jf = _jitted.get(impl)
    if jf is None:
        jf = njit(cache=True, nogil=True)(impl)
        _jitted[impl] = jf
    return jf


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def _t(w: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(w.T, dtype=np.float64)


def _bias(b, d: int) -> np.ndarray:
    return np.zeros(d) if b is None else _c(b)


# ---------------------------------------------------------------------------
# ltm


def _ltm_fwd(x, h0, c0, w1t, w2t, w3t, w4t, b1, b2, b3, b4,
             open1, open2, open3, open4, lin3):
    T, B, d = x.shape
    A = np.empty((T, B, d))
    L1 = np.empty((T, B, d))
    L2 = np.empty((T, B, d))
    CP = np.empty((T, B, d))
    C = np.empty((T, B, d))
    L3 = np.empty((T, B, d))
    H = np.empty((T, B, d))
    ones = np.ones((B, d))
    h = h0
    c = c0
    for t in range(T):
        a = h + x[t]
        A[t] = a
        if open1:
            l1 = ones
        else:
            l1 = 1.0 / (1.0 + np.exp(-(np.dot(a, w1t) + b1)))
        if open2:
            l2 = ones
        else:
            l2 = 1.0 / (1.0 + np.exp(-(np.dot(a, w2t) + b2)))
        cp = l1 * l2 + c
        if open4:
            cnew = ones
        else:
            cnew = 1.0 / (1.0 + np.exp(-(np.dot(cp, w4t) + b4)))
        if open3:
            l3 = ones
        elif lin3:
            l3 = np.dot(a, w3t) + b3
        else:
            l3 = 1.0 / (1.0 + np.exp(-(np.dot(a, w3t) + b3)))
        hnew = cnew * l3
        L1[t] = l1
        L2[t] = l2
        CP[t] = cp
        C[t] = cnew
        L3[t] = l3
        H[t] = hnew
        h = hnew
        c = cnew
    return A, L1, L2, CP, C, L3, H


def _ltm_bwd(A, L1, L2, CP, C, L3, grad_h_seq, w1, w2, w3, w4,
             open1, open2, open3, open4, lin3):
    T, B, d = A.shape
    gw1 = np.zeros((d, d))
    gw2 = np.zeros((d, d))
    gw3 = np.zeros((d, d))
    gw4 = np.zeros((d, d))
    gb1 = np.zeros(d)
    gb2 = np.zeros(d)
    gb3 = np.zeros(d)
    gb4 = np.zeros(d)
    gX = np.empty((T, B, d))
    ghn = np.zeros((B, d))
    gcn = np.zeros((B, d))
    for t in range(T - 1, -1, -1):
        gh = grad_h_seq[t] + ghn
        a = A[t]
        gc_total = gcn + gh * L3[t]
        ga = np.zeros((B, d))
        if not open3:
            gl3 = gh * C[t]
            if lin3:
                gz3 = gl3
            else:
                gz3 = gl3 * L3[t] * (1.0 - L3[t])
            gw3 += np.dot(np.ascontiguousarray(gz3.T), a)
            gb3 += np.sum(gz3, axis=0)
            ga = ga + np.dot(gz3, w3)
        if open4:
            gcp = np.zeros((B, d))
        else:
            gz4 = gc_total * C[t] * (1.0 - C[t])
            gw4 += np.dot(np.ascontiguousarray(gz4.T), CP[t])
            gb4 += np.sum(gz4, axis=0)
            gcp = np.dot(gz4, w4)
        gcn = gcp
        if not open1:
            gz1 = (gcp * L2[t]) * L1[t] * (1.0 - L1[t])
            gw1 += np.dot(np.ascontiguousarray(gz1.T), a)
            gb1 += np.sum(gz1, axis=0)
            ga = ga + np.dot(gz1, w1)
        if not open2:
            gz2 = (gcp * L1[t]) * L2[t] * (1.0 - L2[t])
            gw2 += np.dot(np.ascontiguousarray(gz2.T), a)
            gb2 += np.sum(gz2, axis=0)
            ga = ga + np.dot(gz2, w2)
        gX[t] = ga
        ghn = ga
    return gw1, gw2, gw3, gw4, gb1, gb2, gb3, gb4, gX, ghn, gcn


# ---------------------------------------------------------------------------
# lstm


def _lstm_fwd(x, h0, c0, wft, wit, wgt, wot, bf, bi, bg, bo):
    T, B, in_dim = x.shape
    d = h0.shape[1]
    XCAT = np.empty((T, B, d + in_dim))
    F = np.empty((T, B, d))
    I = np.empty((T, B, d))
    G = np.empty((T, B, d))
    O = np.empty((T, B, d))
    C = np.empty((T, B, d))
    TC = np.empty((T, B, d))
    H = np.empty((T, B, d))
    h = h0
    c = c0
    for t in range(T):
        xcat = np.concatenate((h, x[t]), axis=1)
        XCAT[t] = xcat
        f = 1.0 / (1.0 + np.exp(-(np.dot(xcat, wft) + bf)))
        i = 1.0 / (1.0 + np.exp(-(np.dot(xcat, wit) + bi)))
        g = np.tanh(np.dot(xcat, wgt) + bg)
        o = 1.0 / (1.0 + np.exp(-(np.dot(xcat, wot) + bo)))
        cnew = f * c + i * g
        tc = np.tanh(cnew)
        hnew = o * tc
        F[t] = f
        I[t] = i
        G[t] = g
        O[t] = o
        C[t] = cnew
        TC[t] = tc
        H[t] = hnew
        h = hnew
        c = cnew
    return XCAT, F, I, G, O, C, TC, H


def _lstm_bwd(XCAT, F, I, G, O, C, TC, grad_h_seq, wf, wi, wg, wo, c0):
    T, B, cat = XCAT.shape
    d = F.shape[2]
    gwf = np.zeros((d, cat))
    gwi = np.zeros((d, cat))
    gwg = np.zeros((d, cat))
    gwo = np.zeros((d, cat))
    gbf = np.zeros(d)
    gbi = np.zeros(d)
    gbg = np.zeros(d)
    gbo = np.zeros(d)
    gX = np.empty((T, B, cat - d))
    ghn = np.zeros((B, d))
    gcn = np.zeros((B, d))
    for t in range(T - 1, -1, -1):
        gh = grad_h_seq[t] + ghn
        if t > 0:
            c_prev = C[t - 1]
        else:
            c_prev = c0
        go = gh * TC[t]
        gc_tot = gcn + gh * O[t] * (1.0 - TC[t] * TC[t])
        gzf = (gc_tot * c_prev) * F[t] * (1.0 - F[t])
        gzi = (gc_tot * G[t]) * I[t] * (1.0 - I[t])
        gzg = (gc_tot * I[t]) * (1.0 - G[t] * G[t])
        gzo = go * O[t] * (1.0 - O[t])
        gcn = gc_tot * F[t]
        xcat = XCAT[t]
        gwf += np.dot(np.ascontiguousarray(gzf.T), xcat)
        gwi += np.dot(np.ascontiguousarray(gzi.T), xcat)
        gwg += np.dot(np.ascontiguousarray(gzg.T), xcat)
        gwo += np.dot(np.ascontiguousarray(gzo.T), xcat)
        gbf += np.sum(gzf, axis=0)
        gbi += np.sum(gzi, axis=0)
        gbg += np.sum(gzg, axis=0)
        gbo += np.sum(gzo, axis=0)
        gcat = (np.dot(gzf, wf) + np.dot(gzi, wi)
                + np.dot(gzg, wg) + np.dot(gzo, wo))
        gX[t] = gcat[:, d:]
        ghn = np.ascontiguousarray(gcat[:, :d])
    return gwf, gwi, gwg, gwo, gbf, gbi, gbg, gbo, gX, ghn, gcn


# ---------------------------------------------------------------------------
# gru


def _gru_fwd(x, h0, wzxt, wzht, wrxt, wrht, wnxt, wnht, bz, br, bnx, bnh):
    T, B, _ = x.shape
    d = h0.shape[1]
    Z = np.empty((T, B, d))
    R = np.empty((T, B, d))
    HH = np.empty((T, B, d))
    N = np.empty((T, B, d))
    H = np.empty((T, B, d))
    h = h0
    for t in range(T):
        xt = x[t]
        z = 1.0 / (1.0 + np.exp(-(np.dot(xt, wzxt) + np.dot(h, wzht) + bz)))
        r = 1.0 / (1.0 + np.exp(-(np.dot(xt, wrxt) + np.dot(h, wrht) + br)))
        hh = np.dot(h, wnht) + bnh
        n = np.tanh(np.dot(xt, wnxt) + bnx + r * hh)
        hnew = (1.0 - z) * n + z * h
        Z[t] = z
        R[t] = r
        HH[t] = hh
        N[t] = n
        H[t] = hnew
        h = hnew
    return Z, R, HH, N, H


def _gru_bwd(x, Z, R, HH, N, H, grad_h_seq, wzx, wzh, wrx, wrh, wnx, wnh, h0):
    T, B, in_dim = x.shape
    d = Z.shape[2]
    gwzx = np.zeros((d, in_dim))
    gwzh = np.zeros((d, d))
    gwrx = np.zeros((d, in_dim))
    gwrh = np.zeros((d, d))
    gwnx = np.zeros((d, in_dim))
    gwnh = np.zeros((d, d))
    gbz = np.zeros(d)
    gbr = np.zeros(d)
    gbnx = np.zeros(d)
    gbnh = np.zeros(d)
    gX = np.empty((T, B, in_dim))
    ghn = np.zeros((B, d))
    for t in range(T - 1, -1, -1):
        gh = grad_h_seq[t] + ghn
        if t > 0:
            hp = H[t - 1]
        else:
            hp = h0
        xt = x[t]
        gz = gh * (hp - N[t])
        gn = gh * (1.0 - Z[t])
        ghp = gh * Z[t]

        gan = gn * (1.0 - N[t] * N[t])
        gwnx += np.dot(np.ascontiguousarray(gan.T), xt)
        gbnx += np.sum(gan, axis=0)
        gx = np.dot(gan, wnx)
        ghh = gan * R[t]
        gr = gan * HH[t]
        gwnh += np.dot(np.ascontiguousarray(ghh.T), hp)
        gbnh += np.sum(ghh, axis=0)
        ghp = ghp + np.dot(ghh, wnh)

        gar = gr * R[t] * (1.0 - R[t])
        gwrx += np.dot(np.ascontiguousarray(gar.T), xt)
        gwrh += np.dot(np.ascontiguousarray(gar.T), hp)
        gbr += np.sum(gar, axis=0)
        gx = gx + np.dot(gar, wrx)
        ghp = ghp + np.dot(gar, wrh)

        gaz = gz * Z[t] * (1.0 - Z[t])
        gwzx += np.dot(np.ascontiguousarray(gaz.T), xt)
        gwzh += np.dot(np.ascontiguousarray(gaz.T), hp)
        gbz += np.sum(gaz, axis=0)
        gx = gx + np.dot(gaz, wzx)
        ghp = ghp + np.dot(gaz, wzh)

        gX[t] = gx
        ghn = ghp
    return gwzx, gwzh, gwrx, gwrh, gwnx, gwnh, gbz, gbr, gbnx, gbnh, gX, ghn


# ---------------------------------------------------------------------------
# rnn


def _rnn_fwd(x, h0, wt, b):
    T, B, in_dim = x.shape
    d = h0.shape[1]
    XCAT = np.empty((T, B, d + in_dim))
    H = np.empty((T, B, d))
    h = h0
    for t in range(T):
        xcat = np.concatenate((h, x[t]), axis=1)
        XCAT[t] = xcat
        hnew = np.tanh(np.dot(xcat, wt) + b)
        H[t] = hnew
        h = hnew
    return XCAT, H


def _rnn_bwd(XCAT, H, grad_h_seq, w):
    T, B, cat = XCAT.shape
    d = H.shape[2]
    gw = np.zeros((d, cat))
    gb = np.zeros(d)
    gX = np.empty((T, B, cat - d))
    ghn = np.zeros((B, d))
    for t in range(T - 1, -1, -1):
        gh = grad_h_seq[t] + ghn
        ga = gh * (1.0 - H[t] * H[t])
        gw += np.dot(np.ascontiguousarray(ga.T), XCAT[t])
        gb += np.sum(ga, axis=0)
        gcat = np.dot(ga, w)
        gX[t] = gcat[:, d:]
        ghn = np.ascontiguousarray(gcat[:, :d])
    return gw, gb, gX, ghn


# ---------------------------------------------------------------------------
# dispatch wrappers operating on params dataclasses


class SeqTrace(NamedTuple):
    """Stacked per-step activations of one layer over one window."""

    kind: str
    arrays: tuple
    x: np.ndarray
    state0: tuple


def seq_forward(params, x_seq: np.ndarray, state, mask: GateMask | None = None,
                ) -> tuple[SeqTrace, tuple]:
    """Run one layer over x_seq of shape (T, B, in_dim).

    Returns (trace, new_state); new_state arrays are detached copies so a
    trace can be freed while the state is carried into the next window.
    """
    x = _c(x_seq)
    mask = mask or GateMask()
    if isinstance(params, LtmParams):
        p = params
        out = _fn(_ltm_fwd)(
            x, _c(state.h), _c(state.c),
            _t(p.w1), _t(p.w2), _t(p.w3), _t(p.w4),
            _bias(p.b1, p.d), _bias(p.b2, p.d), _bias(p.b3, p.d), _bias(p.b4, p.d),
            mask.open1, mask.open2, mask.open3, mask.open4, p.gate3_linear,
        )
        H, C = out[6], out[4]
        return (SeqTrace("ltm", out, x, (state.h, state.c)),
                LtmState(H[-1].copy(), C[-1].copy()))
    if isinstance(params, LstmParams):
        p = params
        out = _fn(_lstm_fwd)(
            x, _c(state.h), _c(state.c),
            _t(p.wf), _t(p.wi), _t(p.wg), _t(p.wo),
            _c(p.bf), _c(p.bi), _c(p.bg), _c(p.bo),
        )
        H, C = out[7], out[5]
        return (SeqTrace("lstm", out, x, (state.h, state.c)),
                LstmState(H[-1].copy(), C[-1].copy()))
    if isinstance(params, GruParams):
        p = params
        out = _fn(_gru_fwd)(
            x, _c(state.h),
            _t(p.wzx), _t(p.wzh), _t(p.wrx), _t(p.wrh), _t(p.wnx), _t(p.wnh),
            _c(p.bz), _c(p.br), _c(p.bnx), _c(p.bnh),
        )
        H = out[4]
        return SeqTrace("gru", out, x, (state.h,)), GruState(H[-1].copy())
    if isinstance(params, RnnParams):
        p = params
        out = _fn(_rnn_fwd)(x, _c(state.h), _t(p.w), _c(p.b))
        H = out[1]
        return SeqTrace("rnn", out, x, (state.h,)), RnnState(H[-1].copy())
    raise TypeError(f"unknown cell params {type(params)!r}")


def seq_backward(params, trace: SeqTrace, grad_h_seq: np.ndarray,
                 mask: GateMask | None = None):
    """Exact BPTT through one layer's window.

    grad_h_seq (T, B, d) carries the upstream gradient on h_t at every
    step. Returns (param_grads, grad_x_seq, grad_state0) where param_grads
    mirrors the params dataclass.
    """
    g_seq = _c(grad_h_seq)
    mask = mask or GateMask()
    if isinstance(params, LtmParams):
        p = params
        A, L1, L2, CP, C, L3, _H = trace.arrays
        out = _fn(_ltm_bwd)(
            A, L1, L2, CP, C, L3, g_seq,
            _c(p.w1), _c(p.w2), _c(p.w3), _c(p.w4),
            mask.open1, mask.open2, mask.open3, mask.open4, p.gate3_linear,
        )
        g = _zeros_like_params(p)
        g.w1, g.w2, g.w3, g.w4 = out[0], out[1], out[2], out[3]
        for name, arr in zip(("b1", "b2", "b3", "b4"), out[4:8]):
            if getattr(p, name) is not None:
                setattr(g, name, arr)
        return g, out[8], (out[9], out[10])
    if isinstance(params, LstmParams):
        p = params
        XCAT, F, I, G, O, C, TC, _H = trace.arrays
        out = _fn(_lstm_bwd)(
            XCAT, F, I, G, O, C, TC, g_seq,
            _c(p.wf), _c(p.wi), _c(p.wg), _c(p.wo), _c(trace.state0[1]),
        )
        g = _zeros_like_params(p)
        (g.wf, g.wi, g.wg, g.wo, g.bf, g.bi, g.bg, g.bo) = out[:8]
        return g, out[8], (out[9], out[10])
    if isinstance(params, GruParams):
        p = params
        Z, R, HH, N, H = trace.arrays
        out = _fn(_gru_bwd)(
            trace.x, Z, R, HH, N, H, g_seq,
            _c(p.wzx), _c(p.wzh), _c(p.wrx), _c(p.wrh), _c(p.wnx), _c(p.wnh),
            _c(trace.state0[0]),
        )
        g = _zeros_like_params(p)
        (g.wzx, g.wzh, g.wrx, g.wrh, g.wnx, g.wnh,
         g.bz, g.br, g.bnx, g.bnh) = out[:10]
        return g, out[10], (out[11],)
    if isinstance(params, RnnParams):
        p = params
        XCAT, H = trace.arrays
        out = _fn(_rnn_bwd)(XCAT, H, g_seq, _c(p.w))
        g = _zeros_like_params(p)
        g.w, g.b = out[0], out[1]
        return g, out[2], (out[3],)
    raise TypeError(f"unknown cell params {type(params)!r}")


def warmup(kinds=("ltm", "lstm", "gru", "rnn")) -> None:
    """Trigger JIT compilation of the active backend on tiny inputs."""
    from . import cells

    rng_like = np.random.default_rng(0)
    T, B, d = 2, 1, 2
    x = rng_like.uniform(-0.1, 0.1, (T, B, d))
    gh = np.zeros((T, B, d))
    for kind in kinds:
        if kind == "ltm":
            p = cells.LtmParams(*(np.eye(d) * 0.1 for _ in range(4)))
            st = cells.LtmState(np.zeros((B, d)), np.zeros((B, d)))
        elif kind == "lstm":
            p = cells.LstmParams(*(np.full((d, 2 * d), 0.1) for _ in range(4)),
                                 *(np.zeros(d) for _ in range(4)))
            st = cells.LstmState(np.zeros((B, d)), np.zeros((B, d)))
        elif kind == "gru":
            p = cells.GruParams(np.full((d, d), 0.1), np.full((d, d), 0.1),
                                np.full((d, d), 0.1), np.full((d, d), 0.1),
                                np.full((d, d), 0.1), np.full((d, d), 0.1),
                                np.zeros(d), np.zeros(d), np.zeros(d), np.zeros(d))
            st = cells.GruState(np.zeros((B, d)))
        else:
            p = cells.RnnParams(np.full((d, 2 * d), 0.1), np.zeros(d))
            st = cells.RnnState(np.zeros((B, d)))
        tr, _ = seq_forward(p, x, st)
        seq_backward(p, tr, gh)
