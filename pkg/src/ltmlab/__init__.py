"""Recurrent-cell laboratory with exact-gradient training.

Implements a sigmoid-gated additive-memory recurrent cell alongside
rnn/lstm/gru baselines, a character/word language-modeling harness with
exact backpropagation through time, and an experiment suite covering
gradient verification, gate ablations, stability probes, and timing.
"""

__version__ = "0.1.0"

from .cells import GateMask  # noqa: F401
from .engine import Metrics, TrainConfig, evaluate, forward_sequence, train  # noqa: F401
from .model import Model, ModelConfig  # noqa: F401
from .numeric import Rng  # noqa: F401
