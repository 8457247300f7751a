"""Dense float64 primitives shared by every cell and the training engine.

Vectors are 1-D numpy arrays, matrices 2-D row-major, always float64.
Operations here are pure functions: they never mutate their inputs and
identical inputs give bit-identical outputs. Shape problems raise
:class:`ShapeError` naming both operands.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Rng",
    "matvec",
    "sigmoid",
    "hadamard",
    "add",
    "scale",
    "init_uniform",
]


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf encountered where a finite value is required."""


# Smallest representable values keeping sigmoid outputs inside the open
# interval (0, 1) even when exp() underflows in 64-bit.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)

_U64 = 0xFFFFFFFFFFFFFFFF


def _as_array(x, ndim: int, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {a.shape}")
    return a


def matvec(m, v) -> np.ndarray:
    """Matrix-vector product m @ v with explicit dimension checking."""
    m = _as_array(m, 2, "matrix")
    v = _as_array(v, 1, "vector")
    if m.shape[1] != v.shape[0]:
        raise ShapeError(
            f"matvec: matrix is {m.shape[0]}x{m.shape[1]} "
            f"but vector has length {v.shape[0]}"
        )
    return m @ v


def sigmoid(v) -> np.ndarray:
    """Logistic function 1 / (1 + exp(-x)), elementwise.

    Inputs must be finite. Outputs are guaranteed to lie strictly inside
    (0, 1): the two-branch evaluation never overflows, and results that
    would round to exactly 0.0 or 1.0 are nudged to the nearest
    representable interior value.
    """
    a = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("sigmoid requires finite inputs")
    t = np.exp(-np.abs(a))
    out = np.where(a >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    return np.clip(out, _SIG_LO, _SIG_HI)


def _pairwise(a, b, name: str) -> tuple[np.ndarray, np.ndarray]:
    a = _as_array(a, 1, f"{name} lhs")
    b = _as_array(b, 1, f"{name} rhs")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"{name}: lengths {a.shape[0]} and {b.shape[0]} differ")
    return a, b


def hadamard(a, b) -> np.ndarray:
    """Elementwise product of two equal-length vectors."""
    a, b = _pairwise(a, b, "hadamard")
    return a * b


def add(a, b) -> np.ndarray:
    """Elementwise sum of two equal-length vectors."""
    a, b = _pairwise(a, b, "add")
    return a + b


def scale(a, k: float) -> np.ndarray:
    """Scalar multiple k * a."""
    a = _as_array(a, 1, "scale operand")
    return a * float(k)


class Rng:
    """Counter-based deterministic generator (Philox).

    The same seed yields the same draw sequence on every platform, so
    experiments replay exactly. ``child(label)`` derives an independent
    stream from a text label, which is how submodules obtain their own
    reproducible randomness from a single top-level seed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def child(self, label: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}:{label}".encode("utf-8")).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, n: int, size) -> np.ndarray:
        """Uniform ids in [0, n)."""
        return self._gen.integers(0, n, size=size, dtype=np.int64)

    def get_state(self) -> dict:
        """JSON-serializable snapshot of the generator state."""
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "counter": [int(x) for x in st["state"]["counter"]],
            "key": [int(x) for x in st["state"]["key"]],
            "buffer": [int(x) for x in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, snap: dict) -> None:
        self.seed = int(snap["seed"])
        bg = np.random.Philox(self.seed)
        bg.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(snap["counter"], dtype=np.uint64),
                "key": np.array(snap["key"], dtype=np.uint64),
            },
            "buffer": np.array(snap["buffer"], dtype=np.uint64),
            "buffer_pos": int(snap["buffer_pos"]),
            "has_uint32": int(snap["has_uint32"]),
            "uinteger": int(snap["uinteger"]),
        }
        self._gen = np.random.Generator(bg)

    @classmethod
    def from_state(cls, snap: dict) -> "Rng":
        rng = cls(0)
        rng.set_state(snap)
        return rng


def init_uniform(rng: Rng, rows: int, cols: int, bound: float) -> np.ndarray:
    """Matrix with i.i.d. entries uniform in [-bound, +bound]."""
    if not bound > 0:
        raise ValueError(f"init_uniform: bound must be positive, got {bound}")
    return rng.uniform(-bound, bound, (int(rows), int(cols)))
