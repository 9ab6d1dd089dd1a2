"""Attackable model families.

``build_mlp`` returns a fully connected classifier whose first operation
adds a trainable vector ``b`` to the input, so the loss gradient w.r.t.
``b`` equals the gradient w.r.t. the input pixels. ``build_vit`` returns a
single-block, single-head vision transformer whose embedded sequence ``z0``
feeds only the query/key/value projections, which makes the closed-form
reconstruction in :mod:`flrsp.attacks` exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    INPUT, TARGET, GELU, Add, BiasAdd, Graph, LayerNorm, MatMul, Node, Patchify,
    MeanRows, PrependRow, ReLU, Reshape, Scale, Softmax, SoftmaxCrossEntropy, Transpose,
)
from .params import ParamSet


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    input_bias: bool = True
    input_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all MLP dimensions must be positive, got {dims}")
        if self.input_shape is not None:
            shape = tuple(int(s) for s in self.input_shape)
            if math.prod(shape) != self.input_dim:
                raise ValueError(f"input_shape {shape} has {math.prod(shape)} entries, not {self.input_dim}")
            object.__setattr__(self, "input_shape", shape)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.input_shape or (self.input_dim,)


@dataclass(frozen=True)
class VitSpec:
    image_size: tuple[int, int, int]
    patch_size: int
    embed_dim: int
    mlp_dim: int
    num_classes: int
    heads: int = field(default=1)

    def __post_init__(self):
        c, h, w = (int(v) for v in self.image_size)
        object.__setattr__(self, "image_size", (c, h, w))
        p = int(self.patch_size)
        if min(c, h, w, p, self.embed_dim, self.mlp_dim, self.num_classes) <= 0:
            raise ValueError("all ViT dimensions must be positive")
        if h % p or w % p:
            raise ValueError(f"patch size {p} does not divide image {h}x{w}")
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")

    @property
    def num_patches(self) -> int:
        c, h, w = self.image_size
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.image_size[0]

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_mlp(spec: MlpSpec, seed: int = 0) -> tuple[Graph, ParamSet]:
    rng = np.random.default_rng(seed)
    params = {}
    nodes = [Node(Reshape((-1, spec.input_dim)), (INPUT,), "x_flat")]
    h = "x_flat"
    if spec.input_bias:
        params["b"] = np.zeros(spec.input_dim)
        nodes.append(Node(BiasAdd(), (h, "b"), "x_biased"))
        h = "x_biased"
    dims = (spec.input_dim, *spec.hidden_dims, spec.num_classes)
    n_layers = len(dims) - 1
    for k in range(1, n_layers + 1):
        fan_in, fan_out = dims[k - 1], dims[k]
        params[f"W{k}"] = _uniform(rng, fan_in, (fan_in, fan_out))
        params[f"b{k}"] = _uniform(rng, fan_in, (fan_out,))
        nodes.append(Node(MatMul(), (h, f"W{k}"), f"h{k}_lin"))
        nodes.append(Node(BiasAdd(), (f"h{k}_lin", f"b{k}"), f"h{k}_pre"))
        h = f"h{k}_pre"
        if k < n_layers:
            nodes.append(Node(ReLU(), (h,), f"h{k}"))
            h = f"h{k}"
    nodes[-1] = Node(nodes[-1].op, nodes[-1].inputs, "logits")
    nodes.append(Node(SoftmaxCrossEntropy(), ("logits", TARGET), "loss"))
    graph = Graph(spec.sample_shape, nodes, tuple(params), batched=True, name="mlp", spec=spec)
    return graph, ParamSet(params, copy=False)


VIT_ATTENTION_PARAMS = ("W_q", "W_k", "W_v")


def build_vit(spec: VitSpec, seed: int = 0) -> tuple[Graph, ParamSet]:
    rng = np.random.default_rng(seed)
    d, pd, s = spec.embed_dim, spec.patch_dim, spec.seq_len
    params = {
        "E_patch": _uniform(rng, pd, (pd, d)),
        "cls": np.zeros((1, d)),
        "E_pos": _uniform(rng, d, (s, d)),
        "W_q": _uniform(rng, d, (d, d)),
        "W_k": _uniform(rng, d, (d, d)),
        "W_v": _uniform(rng, d, (d, d)),
        "ln_gain": np.ones(d),
        "ln_shift": np.zeros(d),
        "W1": _uniform(rng, d, (d, spec.mlp_dim)),
        "b1": _uniform(rng, d, (spec.mlp_dim,)),
        "W2": _uniform(rng, spec.mlp_dim, (spec.mlp_dim, spec.num_classes)),
        "b2": _uniform(rng, spec.mlp_dim, (spec.num_classes,)),
    }
    nodes = [
        Node(Patchify(spec.patch_size), (INPUT,), "patches"),
        Node(MatMul(), ("patches", "E_patch"), "tokens"),
        Node(PrependRow(), ("cls", "tokens"), "sequence"),
        Node(Add(), ("sequence", "E_pos"), "z0"),
        Node(MatMul(), ("z0", "W_q"), "q1"),
        Node(MatMul(), ("z0", "W_k"), "k1"),
        Node(MatMul(), ("z0", "W_v"), "v1"),
        Node(Transpose(), ("k1",), "k1_t"),
        Node(MatMul(), ("q1", "k1_t"), "scores"),
        Node(Scale(1.0 / math.sqrt(d)), ("scores",), "scores_scaled"),
        Node(Softmax(), ("scores_scaled",), "attention"),
        Node(MatMul(), ("attention", "v1"), "context"),
        Node(LayerNorm(), ("context", "ln_gain", "ln_shift"), "normed"),
        Node(MeanRows(), ("normed",), "pooled"),
        Node(MatMul(), ("pooled", "W1"), "head_lin"),
        Node(BiasAdd(), ("head_lin", "b1"), "head_pre"),
        Node(GELU(), ("head_pre",), "head"),
        Node(MatMul(), ("head", "W2"), "logits_lin"),
        Node(BiasAdd(), ("logits_lin", "b2"), "logits"),
        Node(SoftmaxCrossEntropy(), ("logits", TARGET), "loss"),
    ]
    graph = Graph(spec.image_size, nodes, tuple(params), batched=False, name="vit", spec=spec)
    return graph, ParamSet(params, copy=False)


@dataclass
class CaptureRecord:
    """First-block ViT quantities seen during one forward/backward pass."""

    z0: np.ndarray
    q1: np.ndarray
    k1: np.ndarray
    v1: np.ndarray
    grad_E_pos: np.ndarray
    grad_W_q: np.ndarray
    grad_W_k: np.ndarray
    grad_W_v: np.ndarray
    grad_z0: np.ndarray


def capture(graph: Graph, params, x, y) -> CaptureRecord:
    """Run one ViT forward/backward and collect the first-block record."""
    if not isinstance(graph.spec, VitSpec):
        raise ValueError("capture records exist only for ViT graphs")
    graph.forward(params, x, y)
    grads = graph.backward(retain=("z0", "q1", "k1", "v1"))
    return CaptureRecord(
        z0=graph.activation("z0"),
        q1=graph.activation("q1"),
        k1=graph.activation("k1"),
        v1=graph.activation("v1"),
        grad_E_pos=grads["E_pos"],
        grad_W_q=grads["W_q"],
        grad_W_k=grads["W_k"],
        grad_W_v=grads["W_v"],
        grad_z0=graph.value_gradient("z0"),
    )


def build_model(spec, seed: int = 0) -> tuple[Graph, ParamSet]:
    if isinstance(spec, MlpSpec):
        return build_mlp(spec, seed)
    if isinstance(spec, VitSpec):
        return build_vit(spec, seed)
    raise TypeError(f"unknown model spec {type(spec).__name__}")


def predict_logits(graph: Graph, params, xs) -> np.ndarray:
    """Logits for a stack of samples (labels are irrelevant here)."""
    xs = np.asarray(xs, dtype=np.float64)
    if graph.batched:
        graph.forward(params, xs, np.zeros(len(xs), dtype=np.int64))
        return graph.activation("logits").copy()
    rows = []
    for x in xs:
        graph.forward(params, x, 0)
        rows.append(graph.activation("logits")[0])
    return np.array(rows)


def predict(graph: Graph, params, xs) -> np.ndarray:
    return predict_logits(graph, params, xs).argmax(axis=1)
