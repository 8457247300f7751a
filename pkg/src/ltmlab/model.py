"""Model assembly: embedding, cell stack, and output projection.

Parameters live in plain dataclasses (one per layer) plus the embedding
and projection arrays. ``named_params`` exposes them as an ordered
(name, array) list, which fixes the declaration order used by the
optimizer and the checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from . import cells
from .cells import GateMask
from .numeric import Rng

CELL_KINDS = cells.CELL_KINDS


@dataclass
class ModelConfig:
    cell_kind: str = "ltm"
    layers: int = 2
    hidden: int = 128
    embed_dim: int = 128
    vocab: int = 2
    tie_embeddings: bool = False
    gate_mask: GateMask = field(default_factory=GateMask)
    gate3_linear: bool = False
    ltm_bias: bool = False
    init_scale: float = 1.0

    def validate(self) -> None:
        if self.cell_kind not in CELL_KINDS:
            raise ValueError(f"cell_kind must be one of {CELL_KINDS}, got {self.cell_kind!r}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.vocab < 2:
            raise ValueError("vocab must be >= 2")
        if self.cell_kind == "ltm" and self.embed_dim != self.hidden:
            # the cell adds h_prev to its input, so the embedding must land in R^d
            raise ValueError(
                f"ltm requires embed_dim == hidden, got {self.embed_dim} != {self.hidden}")
        if self.tie_embeddings and self.embed_dim != self.hidden:
            raise ValueError("tied embeddings require embed_dim == hidden")
        if self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if isinstance(v, GateMask) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = dict(d)
        if "gate_mask" in kw and isinstance(kw["gate_mask"], dict):
            kw["gate_mask"] = GateMask.from_dict(kw["gate_mask"])
        return cls(**kw)


def _uniform_or_zero(rng: Rng, shape, bound: float) -> np.ndarray:
    if bound == 0.0:
        return np.zeros(shape)
    return rng.uniform(-bound, bound, shape)


class Model:
    """A cell stack with token embedding and vocabulary projection."""

    def __init__(self, cfg: ModelConfig, embed: np.ndarray, layers: list,
                 out_w: np.ndarray | None, out_b: np.ndarray):
        cfg.validate()
        self.cfg = cfg
        self.embed = embed
        self.layers = layers
        self.out_w = out_w  # None when tied to the embedding
        self.out_b = out_b

    @classmethod
    def init(cls, cfg: ModelConfig, rng: Rng) -> "Model":
        cfg.validate()
        s = cfg.init_scale
        d, e, v = cfg.hidden, cfg.embed_dim, cfg.vocab
        embed = _uniform_or_zero(rng.child("embed"), (v, e), 0.1 * s)
        layers = []
        for li in range(cfg.layers):
            in_dim = e if li == 0 else d
            lr_rng = rng.child(f"layer{li}")
            if cfg.cell_kind == "ltm":
                p = cells.ltm_init(lr_rng, d, bound=s / np.sqrt(d) if s else None,
                                   bias=cfg.ltm_bias, gate3_linear=cfg.gate3_linear)
            elif cfg.cell_kind == "lstm":
                p = cells.lstm_init(lr_rng, d, in_dim,
                                    bound=s / np.sqrt(d + in_dim) if s else None)
            elif cfg.cell_kind == "gru":
                p = cells.gru_init(lr_rng, d, in_dim,
                                   bound=s / np.sqrt(d + in_dim) if s else None)
            else:
                p = cells.rnn_init(lr_rng, d, in_dim,
                                   bound=s / np.sqrt(d + in_dim) if s else None)
            if s == 0.0:  # init_scale 0 means an all-zero (uniform-output) model
                for f in fields(p):
                    fv = getattr(p, f.name)
                    if isinstance(fv, np.ndarray):
                        setattr(p, f.name, np.zeros_like(fv))
            layers.append(p)
        out_b = np.zeros(v)
        out_w = None if cfg.tie_embeddings else _uniform_or_zero(
            rng.child("out"), (v, d), (s / np.sqrt(d)) if s else 0.0)
        return cls(cfg, embed, layers, out_w, out_b)

    # -- parameter plumbing ------------------------------------------------

    def projection(self) -> np.ndarray:
        return self.embed if self.cfg.tie_embeddings else self.out_w

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        """Fixed declaration order: embedding, layers, projection, bias."""
        yield "embed", self.embed
        for li, p in enumerate(self.layers):
            for f in fields(p):
                v = getattr(p, f.name)
                if isinstance(v, np.ndarray):
                    yield f"layer{li}.{f.name}", v
        if self.out_w is not None:
            yield "out.w", self.out_w
        yield "out.b", self.out_b

    def param_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_params())

    def set_params(self, tensors: dict[str, np.ndarray]) -> None:
        for name, arr in self.named_params():
            src = tensors[name]
            if src.shape != arr.shape:
                raise ValueError(f"tensor {name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def zero_states(self, batch: int) -> list:
        d = self.cfg.hidden
        states = []
        for p in self.layers:
            if isinstance(p, (cells.LtmParams, cells.LstmParams)):
                st_cls = cells.LtmState if isinstance(p, cells.LtmParams) else cells.LstmState
                states.append(st_cls(np.zeros((batch, d)), np.zeros((batch, d))))
            elif isinstance(p, cells.GruParams):
                states.append(cells.GruState(np.zeros((batch, d))))
            else:
                states.append(cells.RnnState(np.zeros((batch, d))))
        return states

    @classmethod
    def from_tensors(cls, cfg: ModelConfig, tensors: dict[str, np.ndarray]) -> "Model":
        rng = Rng(0)
        m = cls.init(ModelConfig.from_dict(cfg.to_dict()), rng)
        m.set_params(tensors)
        return m
