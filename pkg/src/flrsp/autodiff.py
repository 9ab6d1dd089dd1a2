"""Static-graph reverse-mode autodiff over numpy arrays.

A :class:`Graph` is an ordered list of :class:`Node` objects. Each node
applies one primitive :class:`Op` to named values: the graph input
(``"input"``), the training target (``"target"``), entries of the bound
:class:`~flrsp.params.ParamSet`, or outputs of earlier nodes. Because a
node may only consume values defined before it, the node list is already a
topological order.

The primitives are written against holomorphic numpy calls (plain
transposes, comparisons on the real part), so a graph also evaluates on
complex128 inputs. The attack module relies on this for complex-step
directional derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .params import ParamSet

INPUT = "input"
TARGET = "target"


class GraphError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


class Op:
    name = "op"

    def forward(self, *args):
        """Return ``(output, cache)``."""
        raise NotImplementedError

    def backward(self, grad, cache):
        """Return one gradient per input (``None`` for non-differentiable)."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        return a @ b, (a, b)

    def backward(self, grad, cache):
        a, b = cache
        return grad @ b.T, a.T @ grad


class Add(Op):
    name = "add"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
        return a + b, None

    def backward(self, grad, cache):
        return grad, grad


class BiasAdd(Op):
    """``a[r, :] + bias`` for every row ``r``; the only broadcasting op."""

    name = "bias_add"

    def forward(self, a, bias):
        if bias.ndim != 1 or a.ndim != 2 or a.shape[1] != bias.shape[0]:
            raise ValueError(f"bias_add shape mismatch: {a.shape} + {bias.shape}")
        return a + bias, None

    def backward(self, grad, cache):
        return grad, grad.sum(axis=0)


class Scale(Op):
    name = "scale"

    def __init__(self, factor: float):
        self.factor = float(factor)

    def forward(self, a):
        return a * self.factor, None

    def backward(self, grad, cache):
        return (grad * self.factor,)

    def __repr__(self):
        return f"Scale({self.factor})"


class ReLU(Op):
    name = "relu"

    def forward(self, a):
        mask = a.real > 0
        return np.where(mask, a, 0), mask

    def backward(self, grad, mask):
        return (np.where(mask, grad, 0),)


class GELU(Op):
    """Exact GELU, ``x * Phi(x)``."""

    name = "gelu"

    def forward(self, a):
        cdf = 0.5 * (1.0 + erf(a / math.sqrt(2.0)))
        return a * cdf, (a, cdf)

    def backward(self, grad, cache):
        a, cdf = cache
        pdf = np.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
        return (grad * (cdf + a * pdf),)


def _softmax_rows(a):
    shifted = a - a.real.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Softmax(Op):
    """Row-wise softmax over the last axis of a 2-D array."""

    name = "softmax"

    def forward(self, a):
        if a.ndim != 2:
            raise ValueError(f"softmax expects 2-D input, got {a.shape}")
        s = _softmax_rows(a)
        return s, s

    def backward(self, grad, s):
        inner = (grad * s).sum(axis=-1, keepdims=True)
        return (s * (grad - inner),)


class LayerNorm(Op):
    """Row-wise normalization followed by gain and shift vectors."""

    name = "layer_norm"

    def __init__(self, eps: float = 1e-5):
        self.eps = eps

    def forward(self, a, gain, shift):
        if a.ndim != 2 or gain.shape != (a.shape[1],) or shift.shape != (a.shape[1],):
            raise ValueError(f"layer_norm shape mismatch: {a.shape}, {gain.shape}, {shift.shape}")
        mu = a.mean(axis=-1, keepdims=True)
        centered = a - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv
        return xhat * gain + shift, (xhat, inv, gain)

    def backward(self, grad, cache):
        xhat, inv, gain = cache
        d = xhat.shape[1]
        gxhat = grad * gain
        da = (inv / d) * (
            d * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return da, (grad * xhat).sum(axis=0), grad.sum(axis=0)


class Reshape(Op):
    """Reshape; a leading ``-1`` keeps the batch dimension."""

    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        return a.reshape(self.shape), a.shape

    def backward(self, grad, shape):
        return (grad.reshape(shape),)

    def __repr__(self):
        return f"Reshape({self.shape})"


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(C, H, W) -> (num_patches, patch*patch*C); patches row-major, pixels (p1, p2, c)."""
    c, h, w = image.shape
    gh, gw = h // patch, w // patch
    blocks = image.reshape(c, gh, patch, gw, patch)
    return blocks.transpose(1, 3, 2, 4, 0).reshape(gh * gw, patch * patch * c)


def unpatchify(patches: np.ndarray, patch: int, image_shape) -> np.ndarray:
    c, h, w = image_shape
    gh, gw = h // patch, w // patch
    blocks = patches.reshape(gh, gw, patch, patch, c)
    return blocks.transpose(4, 0, 2, 1, 3).reshape(c, h, w)


class Patchify(Op):
    name = "patchify"

    def __init__(self, patch: int):
        self.patch = int(patch)

    def forward(self, image):
        if image.ndim != 3 or image.shape[1] % self.patch or image.shape[2] % self.patch:
            raise ValueError(f"cannot split {image.shape} into {self.patch}x{self.patch} patches")
        return patchify(image, self.patch), image.shape

    def backward(self, grad, shape):
        return (unpatchify(grad, self.patch, shape),)

    def __repr__(self):
        return f"Patchify({self.patch})"


class PrependRow(Op):
    """Stack a (1, D) row on top of an (n, D) array."""

    name = "prepend_row"

    def forward(self, row, rest):
        if row.shape != (1, rest.shape[1]):
            raise ValueError(f"prepend_row shape mismatch: {row.shape} onto {rest.shape}")
        return np.concatenate([row, rest], axis=0), None

    def backward(self, grad, cache):
        return grad[:1], grad[1:]


class TakeRow(Op):
    name = "take_row"

    def __init__(self, index: int):
        self.index = int(index)

    def forward(self, a):
        return a[self.index : self.index + 1], a.shape

    def backward(self, grad, shape):
        out = np.zeros(shape, dtype=grad.dtype)
        out[self.index : self.index + 1] = grad
        return (out,)


class MeanRows(Op):
    """Average of the rows of a 2-D array, kept as a (1, D) row."""

    name = "mean_rows"

    def forward(self, a):
        return a.mean(axis=0, keepdims=True), a.shape

    def backward(self, grad, shape):
        return (np.broadcast_to(grad / shape[0], shape).copy(),)


class Transpose(Op):
    name = "transpose"

    def forward(self, a):
        return a.T, None

    def backward(self, grad, cache):
        return (grad.T,)


class SoftmaxCrossEntropy(Op):
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""

    name = "cross_entropy"

    def forward(self, logits, labels):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
            raise ValueError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
        if labels.min() < 0 or labels.max() >= logits.shape[1]:
            raise ValueError(f"label out of range for {logits.shape[1]} classes")
        shifted = logits - logits.real.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(labels.shape[0])
        loss = (lse - shifted[rows, labels]).mean()
        return loss, (_softmax_rows(logits), labels)

    def backward(self, grad, cache):
        probs, labels = cache
        residual = probs.copy()
        residual[np.arange(labels.shape[0]), labels] -= 1.0
        return grad * residual / labels.shape[0], None


class SquaredError(Op):
    """Sum of squared residuals, averaged over the leading (batch) axis."""

    name = "squared_error"

    def forward(self, pred, target):
        target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
        diff = pred - target
        return (diff * diff).sum() / pred.shape[0], (diff, pred.shape[0])

    def backward(self, grad, cache):
        diff, n = cache
        return grad * 2.0 * diff / n, None


PRIMITIVES = (
    MatMul, Add, BiasAdd, Scale, ReLU, GELU, Softmax, LayerNorm, Reshape,
    Patchify, PrependRow, TakeRow, MeanRows, Transpose, SoftmaxCrossEntropy, SquaredError,
)


# ---------------------------------------------------------------------------
# graphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    op: Op
    inputs: tuple[str, ...]
    output: str


@dataclass
class _PassState:
    values: dict
    caches: list
    params: ParamSet


@dataclass
class Graph:
    """Fixed computation ``input -> ... -> scalar loss``.

    ``batched`` graphs accept either one sample of ``input_shape`` or a
    stack ``(B, *input_shape)``; a single sample is promoted to a batch of
    one. The last node must produce the scalar loss.
    """

    input_shape: tuple[int, ...]
    nodes: list[Node]
    param_names: tuple[str, ...]
    batched: bool = False
    name: str = "graph"
    spec: object = None
    _state: _PassState | None = field(default=None, init=False, repr=False, compare=False)
    _input_grad: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)
    _retained: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.param_names = tuple(self.param_names)
        defined = {INPUT, TARGET, *self.param_names}
        for node in self.nodes:
            for src in node.inputs:
                if src not in defined:
                    raise GraphError(f"node {node.output!r} reads undefined value {src!r}")
            if node.output in defined:
                raise GraphError(f"value {node.output!r} defined twice")
            defined.add(node.output)
        if not self.nodes:
            raise GraphError("graph has no nodes")

    @property
    def loss_name(self) -> str:
        return self.nodes[-1].output

    def _prepare_input(self, x):
        x = np.asarray(x)
        if not np.iscomplexobj(x):
            x = x.astype(np.float64, copy=False)
        if x.shape == self.input_shape:
            return (x[None] if self.batched else x), False
        if self.batched and x.shape[1:] == self.input_shape and x.shape[0] > 0:
            return x, True
        raise ValueError(
            f"{self.name}: input shape {x.shape} does not match declared {self.input_shape}"
            + (" (or a batch of it)" if self.batched else "")
        )

    def forward(self, params, x, target):
        """Evaluate the loss; keeps every activation for :meth:`backward`."""
        missing = [p for p in self.param_names if p not in params]
        if missing:
            raise GraphError(f"{self.name}: ParamSet lacks {missing}")
        xb, _ = self._prepare_input(x)
        if self.batched:
            target = np.atleast_1d(np.asarray(target))
        values = {INPUT: xb, TARGET: target}
        for p in self.param_names:
            values[p] = params[p]
        caches = []
        for node in self.nodes:
            out, cache = node.op.forward(*(values[s] for s in node.inputs))
            values[node.output] = out
            caches.append(cache)
        loss = values[self.loss_name]
        if np.ndim(loss) != 0:
            raise GraphError(f"{self.name}: final node yields shape {np.shape(loss)}, not a scalar")
        if not np.isfinite(loss):
            raise FloatingPointError(f"{self.name}: non-finite loss {loss}")
        self._state = _PassState(values, caches, params)
        self._input_grad = None
        loss = loss if np.iscomplexobj(loss) else float(loss)
        return loss, values

    def backward(self, retain=()) -> ParamSet:
        """Gradient of the last forward's loss w.r.t. every parameter.

        Gradients w.r.t. intermediate values named in ``retain`` are kept
        and available from :meth:`value_gradient`.
        """
        if self._state is None:
            raise GraphError(f"{self.name}: backward called before forward")
        values, caches = self._state.values, self._state.caches
        loss = values[self.loss_name]
        grads = {self.loss_name: np.ones_like(loss)}
        retained = {}
        for node, cache in zip(reversed(self.nodes), reversed(caches)):
            g = grads.pop(node.output, None)
            if node.output in retain:
                retained[node.output] = np.zeros_like(values[node.output]) if g is None else g
            if g is None:
                continue
            for src, gi in zip(node.inputs, node.op.backward(g, cache)):
                if gi is None or src == TARGET:
                    continue
                grads[src] = grads[src] + gi if src in grads else gi
        gx = grads.get(INPUT)
        if gx is None:
            gx = np.zeros_like(values[INPUT])
        self._input_grad = gx
        self._retained = retained
        out = {}
        for p in self.param_names:
            g = grads.get(p)
            out[p] = np.zeros_like(values[p]) if g is None else g
        return ParamSet(out, copy=False)

    def input_gradient(self) -> np.ndarray:
        """Gradient w.r.t. the graph input from the last :meth:`backward`."""
        if self._input_grad is None:
            raise GraphError(f"{self.name}: no backward pass yet")
        gx = self._input_grad
        if self.batched and self._state.values[INPUT].shape[0] == 1:
            return gx[0]
        return gx

    def value_gradient(self, name: str) -> np.ndarray:
        if name not in self._retained:
            raise GraphError(f"{self.name}: gradient of {name!r} was not retained")
        return self._retained[name]

    def activation(self, name: str) -> np.ndarray:
        if self._state is None:
            raise GraphError(f"{self.name}: no forward pass yet")
        return self._state.values[name]

    def clone(self) -> Graph:
        """Independent instance sharing the (immutable) node list."""
        return Graph(self.input_shape, list(self.nodes), self.param_names, self.batched, self.name, self.spec)


def forward(graph: Graph, params, x, target):
    return graph.forward(params, x, target)


def backward(graph: Graph) -> ParamSet:
    return graph.backward()


def loss_and_grad(graph: Graph, params, xs, ys) -> tuple[float, ParamSet]:
    """Mean loss and gradient over a batch.

    Batched graphs evaluate the stack in one pass; others loop per sample
    and average.
    """
    xs = np.asarray(xs)
    if graph.batched:
        loss, _ = graph.forward(params, xs, ys)
        return loss, graph.backward()
    ys = np.atleast_1d(ys)
    if xs.shape == graph.input_shape:
        xs, ys = xs[None], ys[:1]
    total, acc = 0.0, None
    for x, y in zip(xs, ys):
        loss, _ = graph.forward(params, x, y)
        g = graph.backward()
        total += loss
        acc = g.flat() if acc is None else acc + g.flat()
    n = len(xs)
    return total / n, ParamSet(params, copy=False).with_flat(acc / n)


def grad_check(graph: Graph, params, x, target, eps: float = 1e-5, *, max_coords=None, rng=None,
               elementwise: bool = False) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    By default the gap is measured per parameter tensor,
    ``max|a - n| / max(max|a|, max|n|, 1e-12)``, and the worst tensor is
    reported. ``elementwise=True`` applies the same ratio to every scalar,
    which is dominated by central-difference noise on coordinates whose
    gradient is near zero. ``max_coords`` optionally limits the check to a
    random subset of scalars per tensor. Never raises for numerical
    trouble; a non-finite probe reports ``inf``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    params = ParamSet(params)
    try:
        graph.forward(params, x, target)
        analytic = graph.backward()
    except FloatingPointError:
        return math.inf
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for name in graph.param_names:
        arr = params[name]
        idxs = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            idxs = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        flat = arr.reshape(-1)
        numeric = np.empty(len(idxs))
        for j, i in enumerate(idxs):
            orig = flat[i]
            try:
                flat[i] = orig + eps
                lp, _ = graph.forward(params, x, target)
                flat[i] = orig - eps
                lm, _ = graph.forward(params, x, target)
            except FloatingPointError:
                return math.inf
            finally:
                flat[i] = orig
            numeric[j] = (lp - lm) / (2 * eps)
        a = analytic[name].reshape(-1)[idxs]
        if not np.isfinite(numeric).all():
            return math.inf
        gap = np.abs(a - numeric)
        if elementwise:
            ratio = gap / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
        else:
            scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
            ratio = gap / scale
        worst = max(worst, float(np.max(ratio, initial=0.0)))
    return float(worst)
