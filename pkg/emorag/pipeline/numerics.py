# Dense float64 building blocks with a hand-written reverse mode.
#
# Every learnable component (agents, critic, RAAF gates, MB-MoE router and
# experts) is expressed with the primitives below. Values are plain numpy
# arrays; a GradTape records each primitive together with a closure that maps
# the output gradient to input gradients. Replaying the tape backward gives
# exact gradients for every watched parameter.

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from emorag.errors import DimensionError, EmptyInputError, NonFiniteError

logger = logging.getLogger(__name__)

Vec = np.ndarray
Mat = np.ndarray


class Node(object):
    __slots__ = ("value", "grad", "parents", "backward", "name")

    def __init__(self, value, parents=(), backward=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward = backward
        self.name = name

    def __repr__(self):
        return f"Node(name={self.name}, shape={self.value.shape})"


class GradTape(object):
    """Ordered record of primitive ops for one forward pass.

    A tape built with `enabled=False` computes values only, which is what
    rollouts and evaluation use. Tapes are single-writer: build one per episode
    (or per loss) and discard it after `backward`.
    """

    def __init__(self, enabled=True):
        self.enabled = enabled
        self._nodes: List[Node] = []
        self._params: Dict[str, Node] = {}

    def __len__(self):
        return len(self._nodes)

    def watch(self, name, value) -> Node:
        """Leaf node for a named parameter. Watching the same name twice returns the same node."""
        node = self._params.get(name)
        if node is None:
            node = Node(value, name=name)
            if self.enabled:
                self._params[name] = node
        return node

    def constant(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64))

    def record(self, value, parents, backward) -> Node:
        if not self.enabled:
            return Node(value)
        node = Node(value, tuple(parents), backward)
        self._nodes.append(node)
        return node

    def backward(self, root: Node) -> Dict[str, np.ndarray]:
        if not self.enabled:
            raise RuntimeError("backward() called on a tape that was not recording")
        if root.value.size != 1:
            raise DimensionError(f"backward() needs a scalar root, got shape {root.value.shape}")

        for node in self._nodes:
            node.grad = None
        for node in self._params.values():
            node.grad = None

        root.grad = np.ones_like(root.value)
        for node in reversed(self._nodes):
            if node.grad is None or node.backward is None:
                continue
            for parent, grad in zip(node.parents, node.backward(node.grad)):
                if grad is None:
                    continue
                parent.grad = grad if parent.grad is None else parent.grad + grad

        grads = {}
        for name, node in self._params.items():
            grad = node.grad if node.grad is not None else np.zeros_like(node.value)
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'", parameter=name)
            grads[name] = grad
        return grads


NodeLike = Union[Node, np.ndarray, Sequence[float], float]


def as_node(tape: GradTape, x: NodeLike) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def check_finite(what, value):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{what} produced non-finite values")
    return value


# Primitive ops


def linear(tape, x, weight, bias=None) -> Node:
    """y = x W^T + b for a vector x of shape (in,) or a row batch (n, in)."""
    x, weight = as_node(tape, x), as_node(tape, weight)
    bias = as_node(tape, bias) if bias is not None else None
    W = weight.value
    if x.value.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear layer expects input dim {W.shape[1]}, got {x.value.shape[-1]}")

    out = x.value @ W.T
    if bias is not None:
        out = out + bias.value
    xv = x.value

    def backward(g):
        gx = g @ W
        gW = np.outer(g, xv) if xv.ndim == 1 else g.T @ xv
        gb = None
        if bias is not None:
            gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gW, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return tape.record(out, parents, backward)


def tanh(tape, x) -> Node:
    x = as_node(tape, x)
    y = np.tanh(x.value)
    return tape.record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(tape, x) -> Node:
    x = as_node(tape, x)
    y = special.expit(x.value)
    return tape.record(y, (x,), lambda g: (g * y * (1.0 - y),))


def add(tape, a, b) -> Node:
    a, b = as_node(tape, a), as_node(tape, b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"add expects equal shapes, got {a.value.shape} and {b.value.shape}")
    return tape.record(a.value + b.value, (a, b), lambda g: (g, g))


def mul(tape, a, b) -> Node:
    a, b = as_node(tape, a), as_node(tape, b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"mul expects equal shapes, got {a.value.shape} and {b.value.shape}")
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(tape, x, factor: float) -> Node:
    x = as_node(tape, x)
    return tape.record(x.value * factor, (x,), lambda g: (g * factor,))


def add_n(tape, nodes: Sequence[NodeLike]) -> Node:
    nodes = [as_node(tape, n) for n in nodes]
    if not nodes:
        raise EmptyInputError("add_n needs at least one term")
    total = nodes[0].value
    for n in nodes[1:]:
        total = total + n.value
    return tape.record(total, nodes, lambda g: tuple(g for _ in nodes))


def concat(tape, parts: Sequence[NodeLike]) -> Node:
    parts = [as_node(tape, p) for p in parts]
    sizes = [p.value.shape[-1] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.value for p in parts], axis=-1)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return tape.record(out, parts, backward)


def reshape(tape, x, shape) -> Node:
    x = as_node(tape, x)
    original = x.value.shape
    return tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(original),))


def take(tape, x, indices) -> Node:
    x = as_node(tape, x)
    indices = np.asarray(indices, dtype=np.int64)
    size = x.value.shape[0]

    def backward(g):
        gx = np.zeros(size)
        np.add.at(gx, indices, g)
        return (gx,)

    return tape.record(x.value[indices], (x,), backward)


def mean_windows(tape, x, windows: int) -> Node:
    """Mean-pool a vector in `windows` equal, non-overlapping windows."""
    x = as_node(tape, x)
    dim = x.value.shape[0]
    if windows < 1 or dim % windows:
        raise DimensionError(f"cannot pool a vector of dim {dim} into {windows} windows")
    width = dim // windows
    out = x.value.reshape(windows, width).mean(axis=1)
    return tape.record(out, (x,), lambda g: (np.repeat(g / width, width),))


def weighted_sum(tape, weights, vectors: Sequence[NodeLike]) -> Node:
    """sum_j w_j v_j for a weight vector node and a list of equal-shape vector nodes."""
    weights = as_node(tape, weights)
    vectors = [as_node(tape, v) for v in vectors]
    if weights.value.shape[0] != len(vectors):
        raise DimensionError(f"{weights.value.shape[0]} weights for {len(vectors)} vectors")
    stacked = np.stack([v.value for v in vectors])
    w = weights.value
    out = w @ stacked

    def backward(g):
        return (stacked @ g,) + tuple(wj * g for wj in w)

    return tape.record(out, (weights,) + tuple(vectors), backward)


def softmax(z) -> Vec:
    """Max-shifted softmax of a finite vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise EmptyInputError("softmax of an empty vector")
    check_finite("softmax input", z)
    return special.softmax(z)


def softmax_node(tape, z) -> Node:
    z = as_node(tape, z)
    y = softmax(z.value)
    return tape.record(y, (z,), lambda g: (y * (g - g @ y),))


def attention(query, keys, values) -> Vec:
    """Parameter-free scaled dot-product attention of one query over a key/value list."""
    return attention_node(GradTape(enabled=False), query, keys, values).value


def attention_node(tape, query, keys, values) -> Node:
    query = as_node(tape, query)
    keys = as_node(tape, np.atleast_2d(keys) if not isinstance(keys, Node) else keys)
    values = as_node(tape, np.atleast_2d(values) if not isinstance(values, Node) else values)
    q, K, V = query.value, keys.value, values.value

    if K.shape[0] == 0 or K.size == 0:
        raise EmptyInputError("attention needs at least one key")
    if K.shape[0] != V.shape[0]:
        raise DimensionError(f"{K.shape[0]} keys but {V.shape[0]} values")
    if K.shape[1] != q.shape[0]:
        raise DimensionError(f"key dim {K.shape[1]} does not match query dim {q.shape[0]}")

    inv_sqrt = 1.0 / np.sqrt(q.shape[0])
    w = softmax((K @ q) * inv_sqrt)
    out = w @ V

    def backward(g):
        gw = V @ g
        gs = w * (gw - gw @ w)
        return (K.T @ gs) * inv_sqrt, np.outer(gs, q) * inv_sqrt, np.outer(w, g)

    return tape.record(out, (query, keys, values), backward)


# Log-likelihoods of the three action distributions


def categorical_logprob(tape, logits, label: int) -> Node:
    logits = as_node(tape, logits)
    logp = special.log_softmax(logits.value)
    p = np.exp(logp)

    def backward(g):
        onehot = np.zeros_like(p)
        onehot[label] = 1.0
        return (g * (onehot - p),)

    return tape.record(np.array([logp[label]]), (logits,), backward)


def bernoulli_logprob(tape, logits, decisions) -> Node:
    """Joint log-mass of independent keep/drop decisions under per-item logits."""
    logits = as_node(tape, logits)
    l = logits.value
    a = np.asarray(decisions, dtype=bool)
    if a.shape != l.shape:
        raise DimensionError(f"{a.shape[0]} decisions for {l.shape[0]} candidates")
    total = np.where(a, special.log_expit(l), special.log_expit(-l)).sum()
    return tape.record(np.array([total]), (logits,), lambda g: (g * (a - special.expit(l)),))


def gaussian_logprob(tape, mean, action, sigma: float) -> Node:
    """Log-density of `action` under N(mean, sigma^2 I)."""
    mean = as_node(tape, mean)
    a = np.asarray(action, dtype=np.float64)
    if a.shape != mean.value.shape:
        raise DimensionError(f"action dim {a.shape} does not match mean dim {mean.value.shape}")
    z = (a - mean.value) / sigma
    total = np.sum(-0.5 * z * z) - a.size * (np.log(sigma) + 0.5 * np.log(2.0 * np.pi))
    return tape.record(np.array([total]), (mean,), lambda g: (g * z / sigma,))


def softmax_cross_entropy(tape, logits, label: int) -> Node:
    return scale(tape, categorical_logprob(tape, logits, label), -1.0)


# PPO objective terms


def clipped_surrogate(tape, logprob, old_logprob: float, advantage: float, eps: float) -> Node:
    """min(r A, clip(r, 1-eps, 1+eps) A) with r = exp(logprob - old_logprob).

    The gradient is r A on the unclipped branch and exactly zero once the
    clipped branch is the smaller one.
    """
    logprob = as_node(tape, logprob)
    ratio = float(np.exp(logprob.value[0] - old_logprob))
    unclipped = ratio * advantage
    clipped = float(np.clip(ratio, 1.0 - eps, 1.0 + eps)) * advantage
    active = unclipped <= clipped
    out = unclipped if active else clipped
    return tape.record(np.array([out]), (logprob,), lambda g: (g * (unclipped if active else 0.0),))


def clipped_value_loss(tape, value, old_value: float, target: float, eps: float) -> Node:
    """max((V - target)^2, (clip(V, V_old-eps, V_old+eps) - target)^2)."""
    value = as_node(tape, value)
    v = float(value.value[0])
    v_clip = float(np.clip(v, old_value - eps, old_value + eps))
    unclipped = (v - target) ** 2
    clipped = (v_clip - target) ** 2
    use_unclipped = unclipped >= clipped
    out = unclipped if use_unclipped else clipped
    grad = 2.0 * (v - target) if use_unclipped else 0.0
    return tape.record(np.array([out]), (value,), lambda g: (g * grad,))


# Multi-layer perceptrons


@dataclass
class MLPParams:
    """Weights of a tanh MLP. Hidden layers use tanh; the output layer is linear
    unless `activate_output` is set."""

    name: str
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activate_output: bool = False

    @classmethod
    def init(cls, name, sizes, rng, gain=1.0, activate_output=False):
        if len(sizes) < 2:
            raise DimensionError(f"MLP '{name}' needs at least input and output sizes, got {sizes}")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.standard_normal((fan_out, fan_in)) * (gain / np.sqrt(fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(name, weights, biases, activate_output)

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{self.name}.w{i}", W
            yield f"{self.name}.b{i}", b

    def copy(self, name=None):
        return MLPParams(
            name or self.name,
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.activate_output,
        )


def mlp_forward(params: MLPParams, x: NodeLike, tape: GradTape) -> Node:
    x = as_node(tape, x)
    if x.value.shape[-1] != params.in_dim:
        raise DimensionError(
            f"MLP '{params.name}' expects input dim {params.in_dim}, got {x.value.shape[-1]}"
        )
    h = x
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = linear(tape, h, tape.watch(f"{params.name}.w{i}", W), tape.watch(f"{params.name}.b{i}", b))
        if i < last or params.activate_output:
            h = tanh(tape, h)
    return h


def mlp_apply(params: MLPParams, x) -> np.ndarray:
    return mlp_forward(params, x, GradTape(enabled=False)).value


# Flat parameter views and the gradient checker


def flatten(named: Dict[str, np.ndarray]) -> np.ndarray:
    if not named:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in named.values()])


def assign_flat(named: Dict[str, np.ndarray], flat: np.ndarray):
    """Write a flat vector back into the named arrays in place."""
    offset = 0
    for array in named.values():
        n = array.size
        array[...] = flat[offset:offset + n].reshape(array.shape)
        offset += n
    if offset != flat.size:
        raise DimensionError(f"flat vector has {flat.size} entries, parameters need {offset}")


def flat_gradient(named: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(grads[k]) if k in grads else np.zeros(a.size) for k, a in named.items()])


def flat_objective(named: Dict[str, np.ndarray], loss_fn: Callable[[GradTape], Node]):
    """Turn a tape-building loss into f(theta) -> (value, gradient) over the named arrays."""

    def f(theta):
        assign_flat(named, theta)
        tape = GradTape()
        loss = loss_fn(tape)
        grads = tape.backward(loss)
        return float(loss.value.reshape(-1)[0]), flat_gradient(named, grads)

    return f


def finite_diff_check(f, params, h: float = 1e-6, atol: float = 0.0) -> float:
    """Max relative error between f's analytic gradient and central differences.

    `f(theta)` returns `(value, gradient)`. Coordinates where both the analytic
    and numeric derivative are below `atol` are skipped (0 keeps all of them).
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-7, 1e-4]")
    theta = np.array(params, dtype=np.float64)
    value, analytic = f(theta.copy())
    if not np.isfinite(value):
        raise NonFiniteError("objective is non-finite at the base point")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)

    worst = 0.0
    for i in range(theta.size):
        shifted = theta.copy()
        shifted[i] = theta[i] + h
        up = f(shifted)[0]
        shifted[i] = theta[i] - h
        down = f(shifted)[0]
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"objective is non-finite when shifting coordinate {i}")
        numeric = (up - down) / (2.0 * h)
        if abs(analytic[i]) < atol and abs(numeric) < atol:
            continue
        err = abs(analytic[i] - numeric) / (abs(analytic[i]) + abs(numeric) + 1e-12)
        worst = max(worst, err)

    f(theta)
    return worst
