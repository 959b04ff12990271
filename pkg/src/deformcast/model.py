"""Physics-encoded graph network predicting deformed soft-body positions.

Pipeline per sample::

    soft features (N_s x 21) -> MLP -> TAGConv x L -+
                                                    +-> cross-attention -> TAGConv x L -> linear -> displacement
    rigid features (N_r x 25) -> MLP -> TAGConv x L -+

The prediction is ``rest positions + displacement``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .encoding import (
    ABLATION_MODES,
    RIGID_WIDTH,
    SOFT_WIDTH,
    ablation_mask,
    encode_rigid,
    encode_soft,
)
from .errors import InvalidArgumentError, SchemaViolationError, WidthMismatchError


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 256
    tag_hops: int = 3
    encoder_layers: int = 3
    decoder_layers: int = 3
    heads: int = 4
    num_frequencies: int = 3
    output_scale: float = 1.0  # displacement = output_scale * final linear layer

    def __post_init__(self):
        for name in ("hidden", "encoder_layers", "decoder_layers", "heads", "num_frequencies"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.tag_hops < 0:
            raise InvalidArgumentError("tag_hops must be >= 0")
        if not self.output_scale > 0:
            raise InvalidArgumentError("output_scale must be > 0")
        if self.hidden % self.heads:
            raise InvalidArgumentError(f"hidden={self.hidden} not divisible by heads={self.heads}")

    @property
    def head_width(self):
        return self.hidden // self.heads

    @property
    def soft_width(self):
        return 3 + 6 * self.num_frequencies

    @property
    def rigid_width(self):
        return self.soft_width + 4


def param_shapes(config):
    """Ordered ``name -> shape`` for every learnable array."""
    h, shapes = config.hidden, {}
    for body, width in (("soft", config.soft_width), ("rigid", config.rigid_width)):
        shapes[f"{body}_embed.0.W"] = (width, h)
        shapes[f"{body}_embed.0.b"] = (h,)
        shapes[f"{body}_embed.1.W"] = (h, h)
        shapes[f"{body}_embed.1.b"] = (h,)
        for layer in range(config.encoder_layers):
            for k in range(config.tag_hops + 1):
                shapes[f"{body}_encoder.{layer}.W{k}"] = (h, h)
            shapes[f"{body}_encoder.{layer}.b"] = (h,)
    for head in range(config.heads):
        for proj in ("q", "k", "v"):
            shapes[f"attention.{proj}.{head}"] = (h, config.head_width)
    shapes["attention.o.W"] = (h, h)
    shapes["attention.o.b"] = (h,)
    for layer in range(config.decoder_layers):
        for k in range(config.tag_hops + 1):
            shapes[f"decoder.{layer}.W{k}"] = (h, h)
        shapes[f"decoder.{layer}.b"] = (h,)
    shapes["decoder.out.W"] = (h, 3)
    shapes["decoder.out.b"] = (3,)
    return shapes


class ModelParams:
    """Named learnable arrays plus the config and seed that produced them."""

    def __init__(self, config, arrays, seed=None):
        expected = param_shapes(config)
        if list(arrays) != list(expected):
            missing = set(expected) - set(arrays)
            extra = set(arrays) - set(expected)
            raise SchemaViolationError(
                next(iter(missing or extra)),
                f"parameter names do not match config (missing {sorted(missing)}, extra {sorted(extra)})",
            )
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != shape:
                raise WidthMismatchError(
                    f"parameter {name} has shape {arrays[name].shape}, config expects {shape}"
                )
            if not np.all(np.isfinite(arrays[name])):
                raise InvalidArgumentError(f"parameter {name} is not finite")
        self.config = config
        self.seed = seed
        self.vars = {name: Var(np.asarray(a), requires_grad=True, name=name)
                     for name, a in arrays.items()}

    def __getitem__(self, name):
        return self.vars[name]

    def __iter__(self):
        return iter(self.vars)

    def __len__(self):
        return len(self.vars)

    @property
    def dtype(self):
        return next(iter(self.vars.values())).dtype

    def arrays(self):
        return {name: v.values for name, v in self.vars.items()}

    def copy(self, dtype=None):
        return ModelParams(
            self.config,
            {k: np.array(v, dtype=dtype or v.dtype) for k, v in self.arrays().items()},
            self.seed,
        )

    def zero_grad(self):
        ad.zero_grad(self.vars.values())

    def n_parameters(self):
        return sum(v.values.size for v in self.vars.values())

    def equals(self, other):
        """Bitwise equality of every array."""
        return list(self.vars) == list(other.vars) and all(
            self[k].values.dtype == other[k].values.dtype
            and np.array_equal(self[k].values, other[k].values)
            for k in self.vars
        )


def _fan_in(name, shape, config):
    # a TAGConv layer sums tag_hops + 1 products, so its effective fan-in is that many times wider
    hop_weight = name.rsplit(".", 1)[-1][:1] == "W" and name.rsplit(".", 1)[-1][1:].isdigit()
    return shape[0] * (config.tag_hops + 1) if hop_weight else shape[0]


def init_params(config=None, seed=0, dtype=np.float64):
    """Glorot-uniform weights, zero biases, drawn in a fixed name order.

    TAGConv hop weights use the layer's combined fan-in ``(K + 1) * hidden``
    so activations keep their scale through the stack.
    """
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = math.sqrt(6.0 / (_fan_in(name, shape, config) + shape[1]))
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(config, arrays, seed)


# ----------------------------------------------------------------------------
# blocks

def linear(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def mlp(x, params, prefix):
    h = ad.relu(linear(x, params[f"{prefix}.0.W"], params[f"{prefix}.0.b"]))
    return ad.relu(linear(h, params[f"{prefix}.1.W"], params[f"{prefix}.1.b"]))


def tagconv_forward(x, adj, weights, bias):
    """``sum_k A^k X W_k + b`` with ``A`` the normalized adjacency; ``len(weights) = K + 1``."""
    x = ad.as_var(x)
    if adj.n != x.shape[0]:
        raise ad.ShapeMismatchError(f"tagconv: adjacency has {adj.n} nodes, features {x.shape}")
    out, h = None, x
    for k, w in enumerate(weights):
        if k:
            h = ad.spmm(adj, h)
        term = ad.matmul(h, w)
        out = term if out is None else ad.add(out, term)
    return ad.add(out, bias)


def _tag_layer(x, adj, params, prefix, hops):
    return tagconv_forward(x, adj, [params[f"{prefix}.W{k}"] for k in range(hops + 1)],
                           params[f"{prefix}.b"])


def cross_attention(soft_feats, rigid_feats, params, config=None, return_weights=False):
    """Soft nodes attend to rigid nodes; returns ``soft + MHA(soft, rigid)``."""
    config = config or params.config
    soft_feats, rigid_feats = ad.as_var(soft_feats), ad.as_var(rigid_feats)
    if rigid_feats.shape[0] == 0:
        raise InvalidArgumentError("cross_attention needs at least one rigid node")
    if soft_feats.shape[1] != config.hidden or rigid_feats.shape[1] != config.hidden:
        raise ad.ShapeMismatchError(
            f"cross_attention: widths {soft_feats.shape[1]}, {rigid_feats.shape[1]} != hidden {config.hidden}"
        )
    inv_sqrt = 1.0 / math.sqrt(config.head_width)
    heads, weights = [], []
    for h in range(config.heads):
        q = ad.matmul(soft_feats, params[f"attention.q.{h}"])
        k = ad.matmul(rigid_feats, params[f"attention.k.{h}"])
        v = ad.matmul(rigid_feats, params[f"attention.v.{h}"])
        scores = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt))
        weights.append(scores.values)
        heads.append(ad.matmul(scores, v))
    mixed = linear(ad.concat_cols(*heads), params["attention.o.W"], params["attention.o.b"])
    out = ad.add(soft_feats, mixed)
    return (out, weights) if return_weights else out


@dataclass
class ModelInputs:
    """Everything the network consumes for one sample, already encoded."""

    soft_features: np.ndarray
    rigid_features: np.ndarray
    soft_adj: ad.SparseAdjacency
    rigid_adj: ad.SparseAdjacency
    rest: np.ndarray


def prepare_inputs(soft_graph, rigid_graph, force, ablation="both", dtype=np.float64):
    if ablation not in ABLATION_MODES:
        raise InvalidArgumentError(f"unknown ablation mode {ablation!r}")
    soft = ablation_mask(encode_soft(soft_graph), ablation)
    rigid = ablation_mask(encode_rigid(rigid_graph, force), ablation)
    assert soft.matrix.shape[1] == SOFT_WIDTH and rigid.matrix.shape[1] == RIGID_WIDTH
    return ModelInputs(
        soft.matrix.astype(dtype),
        rigid.matrix.astype(dtype),
        ad.build_adjacency(soft_graph),
        ad.build_adjacency(rigid_graph),
        soft_graph.positions.astype(dtype),
    )


def forward_prepared(inputs, params, config=None):
    """Predicted deformed positions as a Var of shape (N_s, 3)."""
    config = config or params.config
    if inputs.soft_features.shape[1] != config.soft_width or inputs.rigid_features.shape[1] != config.rigid_width:
        raise WidthMismatchError(
            f"feature widths {inputs.soft_features.shape[1]}/{inputs.rigid_features.shape[1]} "
            f"do not match config {config.soft_width}/{config.rigid_width}"
        )
    dt = params.dtype
    xs = mlp(Var(inputs.soft_features.astype(dt, copy=False)), params, "soft_embed")
    xr = mlp(Var(inputs.rigid_features.astype(dt, copy=False)), params, "rigid_embed")
    for layer in range(config.encoder_layers):
        xs = ad.relu(_tag_layer(xs, inputs.soft_adj, params, f"soft_encoder.{layer}", config.tag_hops))
        xr = ad.relu(_tag_layer(xr, inputs.rigid_adj, params, f"rigid_encoder.{layer}", config.tag_hops))
    x = cross_attention(xs, xr, params, config)
    for layer in range(config.decoder_layers):
        x = ad.relu(_tag_layer(x, inputs.soft_adj, params, f"decoder.{layer}", config.tag_hops))
    delta = linear(x, params["decoder.out.W"], params["decoder.out.b"])
    if config.output_scale != 1.0:
        delta = ad.scale(delta, config.output_scale)
    return ad.add(Var(inputs.rest.astype(dt, copy=False)), delta)


def forward(soft_graph, rigid_graph, force, params, config=None, ablation="both"):
    inputs = prepare_inputs(soft_graph, rigid_graph, force, ablation, dtype=params.dtype)
    return forward_prepared(inputs, params, config)


# ----------------------------------------------------------------------------
# checkpoints

_META_KEY = "__meta__"


def save_checkpoint(path, params, **metadata):
    """Write config, seed, metadata and every named array into one ``.npz``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"config": asdict(params.config), "seed": params.seed,
            "names": list(params.vars), "metadata": metadata}
    payload = {f"param/{k}": v for k, v in params.arrays().items()}
    payload[_META_KEY] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path):
    """Returns ``(params, metadata)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if _META_KEY not in data:
            raise SchemaViolationError(_META_KEY, f"{path} is not a deformcast checkpoint")
        meta = json.loads(data[_META_KEY].tobytes().decode())
        arrays = {name: data[f"param/{name}"] for name in meta["names"]}
    config = ModelConfig(**meta["config"])
    return ModelParams(config, arrays, meta["seed"]), meta.get("metadata", {})
