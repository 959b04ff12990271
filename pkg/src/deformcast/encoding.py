"""Per-node input features: log-frequency positions plus a force descriptor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

NUM_FREQUENCIES = 3
SOFT_WIDTH = 3 + 6 * NUM_FREQUENCIES   # 21
RIGID_WIDTH = SOFT_WIDTH + 4           # 25
ABLATION_MODES = ("both", "positional_only", "physics_only")


@dataclass(frozen=True)
class ForceDescriptor:
    """Unit direction and non-negative magnitude. A zero force carries a
    zero direction."""

    direction: np.ndarray
    magnitude: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        m = float(self.magnitude)
        if not np.isfinite(m) or m < 0:
            raise InvalidArgumentError(f"force magnitude must be finite and >= 0, got {m}")
        if m == 0.0:
            if np.any(d != 0):
                raise InvalidArgumentError("zero-magnitude force must have zero direction")
        elif abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise InvalidArgumentError(f"force direction must be unit length, got |d|={np.linalg.norm(d)}")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "magnitude", m)

    @classmethod
    def from_vector(cls, force):
        """Split a raw force vector into direction and magnitude."""
        f = np.asarray(force, dtype=np.float64).reshape(3)
        m = float(np.linalg.norm(f))
        if m == 0.0:
            return cls(np.zeros(3), 0.0)
        return cls(f / m, m)

    def as_array(self):
        return np.concatenate([self.direction, [self.magnitude]])


@dataclass(frozen=True)
class NodeFeatures:
    matrix: np.ndarray
    kind: str

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        width = {"soft": SOFT_WIDTH, "rigid": RIGID_WIDTH}.get(self.kind)
        if width is None:
            raise InvalidArgumentError(f"kind must be 'soft' or 'rigid', got {self.kind!r}")
        if m.ndim != 2 or m.shape[1] != width:
            raise InvalidArgumentError(f"{self.kind} features must be N x {width}, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidArgumentError("node features contain non-finite values")
        object.__setattr__(self, "matrix", m)


def logfreq_encode(positions, num_frequencies):
    """Raw coordinates followed by ``sin(2**k * pi * p_c)``,
    ``cos(2**k * pi * p_c)`` for each coordinate ``c`` and ``k < num_frequencies``.

    Column order is coordinate-major, then frequency, sin before cos, so for
    three frequencies the x block is ``sin(pi x), cos(pi x), sin(2 pi x), ...``.
    """
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise InvalidArgumentError(f"positions must be (N, 3), got {p.shape}")
    if num_frequencies < 0:
        raise InvalidArgumentError(f"num_frequencies must be >= 0, got {num_frequencies}")
    if not np.all(np.isfinite(p)):
        raise InvalidArgumentError("positions contain non-finite values")
    freqs = np.pi * 2.0 ** np.arange(num_frequencies)
    arg = p[:, :, None] * freqs                       # (N, 3, F)
    sc = np.stack([np.sin(arg), np.cos(arg)], axis=-1)  # (N, 3, F, 2)
    return np.concatenate([p, sc.reshape(len(p), -1)], axis=1)


def encode_soft(graph):
    return NodeFeatures(logfreq_encode(graph.positions, NUM_FREQUENCIES), "soft")


def encode_rigid(graph, force):
    pos = logfreq_encode(graph.positions, NUM_FREQUENCIES)
    f = np.broadcast_to(force.as_array(), (graph.n_nodes, 4))
    return NodeFeatures(np.concatenate([pos, f], axis=1), "rigid")


def ablation_mask(features, mode):
    """Zero the channels an ablation run hides from the network.

    ``positional_only`` drops the force columns (rigid only), ``physics_only``
    drops the sin/cos columns but keeps raw xyz, ``both`` is the identity.
    """
    if mode not in ABLATION_MODES:
        raise InvalidArgumentError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    if mode == "both":
        return features
    m = features.matrix.copy()
    if mode == "positional_only":
        if features.kind == "rigid":
            m[:, SOFT_WIDTH:] = 0.0
    else:
        m[:, 3:SOFT_WIDTH] = 0.0
    return NodeFeatures(m, features.kind)
