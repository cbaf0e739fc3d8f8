"""
Numerical substrate for the geolocalization head.

A small reverse-mode autodiff ``Tensor`` over float64 numpy arrays, the
multihead attention primitive, feed-forward stacks, Adam, finite-difference
gradient checking and deterministic seeding.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from geoloc.errors import DimensionError, EvaluationError, InputError

ArrayLike = Union["Tensor", np.ndarray, Sequence[float], float]

_MASK64 = (1 << 64) - 1


# =============================================================================
# Tensor with reverse-mode gradients
# =============================================================================

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def _stable_log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


class Tensor:
    """
    A float64 array that records how it was computed.

    Leaf tensors created with ``requires_grad=True`` accumulate ``.grad`` when
    ``backward()`` is called on a scalar computed from them. Results of
    operations on tensors that need no gradient carry no graph.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], tuple]] = None

    # -- plumbing ----------------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from this tensor to every leaf that needs them."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = np.array(g, dtype=np.float64)
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._result(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._result(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        return Tensor._result(
            a ** exponent,
            (self,),
            lambda g: (g * exponent * a ** (exponent - 1),),
        )

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
            return ga, gb

        return Tensor._result(a @ b, (self, other), backward)

    # -- elementwise -------------------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._result(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._result(out, (self,), lambda g: (g * 0.5 / out,))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._result(self.data * mask, (self,), lambda g: (g * mask,))

    # -- reductions --------------------------------------------------------

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def softmax(self, axis: int = -1) -> "Tensor":
        s = _stable_softmax(self.data, axis)
        return Tensor._result(
            s,
            (self,),
            lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),),
        )

    def log_softmax(self, axis: int = -1) -> "Tensor":
        out = _stable_log_softmax(self.data, axis)
        s = np.exp(out)
        return Tensor._result(
            out,
            (self,),
            lambda g: (g - s * g.sum(axis=axis, keepdims=True),),
        )

    # -- shape -------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor._result(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),))

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        inverse = np.argsort(axes)
        return Tensor._result(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=np.float64)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._result(self.data[index], (self,), backward)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors along ``axis``."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


# =============================================================================
# Seeding and initialization
# =============================================================================

def splitmix64(value: int) -> int:
    """One SplitMix64 mixing step on a 64-bit integer."""
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, ordinal: int) -> int:
    """Seed for submodule ``ordinal`` under ``master_seed``."""
    return splitmix64((master_seed & _MASK64) ^ splitmix64(ordinal & _MASK64))


def make_rng(master_seed: int, ordinal: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, ordinal))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


# =============================================================================
# Softmax, attention and feed-forward stacks
# =============================================================================

def softmax(v: ArrayLike) -> np.ndarray:
    """Max-shifted softmax of a non-empty finite vector."""
    x = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    if x.size == 0:
        raise DimensionError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise InputError("softmax input must be finite")
    return _stable_softmax(x, axis=-1)


@dataclass
class AttentionParams:
    """
    Weights of the scalar-token multihead attention block.

    Each scalar token t is embedded as ``t * input_weight + input_bias``
    (shape (1, E) and (E,)), attended per head, mixed by ``output_weight`` and
    read back to a scalar through ``readout_weight`` (E, 1) and ``readout_bias``.
    """

    num_heads: int
    embed_dim: int
    input_weight: Tensor
    input_bias: Tensor
    query_weight: Tensor
    query_bias: Tensor
    key_weight: Tensor
    key_bias: Tensor
    value_weight: Tensor
    value_bias: Tensor
    output_weight: Tensor
    output_bias: Tensor
    readout_weight: Tensor
    readout_bias: Tensor

    TENSOR_FIELDS = (
        "input_weight", "input_bias",
        "query_weight", "query_bias",
        "key_weight", "key_bias",
        "value_weight", "value_bias",
        "output_weight", "output_bias",
        "readout_weight", "readout_bias",
    )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        e = self.embed_dim
        return {
            "input_weight": (1, e), "input_bias": (e,),
            "query_weight": (e, e), "query_bias": (e,),
            "key_weight": (e, e), "key_bias": (e,),
            "value_weight": (e, e), "value_bias": (e,),
            "output_weight": (e, e), "output_bias": (e,),
            "readout_weight": (e, 1), "readout_bias": (1,),
        }

    def validate(self) -> None:
        if self.num_heads < 1 or self.embed_dim < 1:
            raise DimensionError("attention needs positive num_heads and embed_dim")
        if self.embed_dim % self.num_heads:
            raise DimensionError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        for name, shape in self.expected_shapes().items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise DimensionError(f"attention {name} has shape {actual}, expected {shape}")

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.TENSOR_FIELDS}

    @classmethod
    def initialize(cls, num_heads: int, embed_dim: int, rng: np.random.Generator) -> "AttentionParams":
        if num_heads < 1 or embed_dim < 1 or embed_dim % num_heads:
            raise DimensionError(
                f"embed_dim {embed_dim} must be a positive multiple of num_heads {num_heads}"
            )
        e = embed_dim

        def weight(fan_in, fan_out):
            return Tensor(glorot_uniform(rng, fan_in, fan_out), requires_grad=True)

        def bias(size):
            return Tensor(np.zeros(size), requires_grad=True)

        return cls(
            num_heads=num_heads,
            embed_dim=e,
            input_weight=weight(1, e), input_bias=bias(e),
            query_weight=weight(e, e), query_bias=bias(e),
            key_weight=weight(e, e), key_bias=bias(e),
            value_weight=weight(e, e), value_bias=bias(e),
            output_weight=weight(e, e), output_bias=bias(e),
            readout_weight=weight(e, 1), readout_bias=bias(1),
        )


def multihead_attention(tokens: ArrayLike, params: AttentionParams) -> Tensor:
    """
    Attend over a sequence of scalar tokens.

    ``tokens`` is a length-d vector or a (batch, d) matrix. Every scalar is
    embedded to ``params.embed_dim``, each head computes
    softmax(q k^T / sqrt(d_q)) v over the d tokens with d_q the head width, the
    heads are concatenated and output-projected, and every token embedding is
    read back to a scalar. The result has the shape of ``tokens``.
    """
    params.validate()
    x = as_tensor(tokens)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"attention tokens must be (d,) or (batch, d), got {x.shape}")

    batch, length = x.shape
    heads, width = params.num_heads, params.head_dim

    embedded = x.reshape(batch, length, 1) @ params.input_weight + params.input_bias

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape(batch, length, heads, width).transpose((0, 2, 1, 3))

    q = split_heads(embedded @ params.query_weight + params.query_bias)
    k = split_heads(embedded @ params.key_weight + params.key_bias)
    v = split_heads(embedded @ params.value_weight + params.value_bias)

    scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(width))
    attended = scores.softmax(axis=-1) @ v
    merged = attended.transpose((0, 2, 1, 3)).reshape(batch, length, params.embed_dim)
    mixed = merged @ params.output_weight + params.output_bias
    out = (mixed @ params.readout_weight).reshape(batch, length) + params.readout_bias
    return out.reshape(length) if squeeze else out


Layer = tuple[Tensor, Tensor, str]

ACTIVATIONS = ("relu", "identity")


def ffn_forward(x: ArrayLike, layers: Sequence[Layer]) -> Tensor:
    """Run a dense stack; ``layers`` are (weight (in, out), bias (out,), activation)."""
    h = as_tensor(x)
    squeeze = h.ndim == 1
    if squeeze:
        h = h.reshape(1, -1)
    for index, (weight, bias, activation) in enumerate(layers):
        if activation not in ACTIVATIONS:
            raise DimensionError(f"layer {index}: unknown activation {activation!r}")
        if weight.ndim != 2 or h.shape[-1] != weight.shape[0]:
            raise DimensionError(
                f"layer {index}: input width {h.shape[-1]} does not match weight {weight.shape}"
            )
        if bias.shape != (weight.shape[1],):
            raise DimensionError(
                f"layer {index}: bias shape {bias.shape} does not match weight {weight.shape}"
            )
        h = h @ weight + bias
        if activation == "relu":
            h = h.relu()
    return h.reshape(h.shape[-1]) if squeeze else h


def dense_stack(widths: Sequence[int], rng: np.random.Generator) -> list[Layer]:
    """Glorot-initialized layers for ``widths``; ReLU on hidden layers, identity on the last."""
    layers: list[Layer] = []
    for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        activation = "identity" if index == len(widths) - 2 else "relu"
        layers.append((
            Tensor(glorot_uniform(rng, fan_in, fan_out), requires_grad=True),
            Tensor(np.zeros(fan_out), requires_grad=True),
            activation,
        ))
    return layers


# =============================================================================
# Adam
# =============================================================================

@dataclass
class AdamState:
    """Moment accumulators and hyperparameters for Adam."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        return cls(
            first_moment={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            second_moment={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            **hyper,
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if set(params) != set(grads) or set(params) != set(state.first_moment):
        raise DimensionError("params, grads and Adam moments must share the same names")

    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    new_params: dict[str, np.ndarray] = {}
    first: dict[str, np.ndarray] = {}
    second: dict[str, np.ndarray] = {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.first_moment[name]
        v = state.second_moment[name]
        if not (np.shape(value) == g.shape == m.shape == v.shape):
            raise DimensionError(
                f"{name}: param {np.shape(value)}, grad {g.shape}, moments {m.shape}/{v.shape}"
            )
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        first[name] = m
        second[name] = v

    return new_params, AdamState(
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
        step=t,
        first_moment=first,
        second_moment=second,
    )


# =============================================================================
# Finite-difference gradient check
# =============================================================================

LossFn = Callable[[dict[str, Tensor]], Union[Tensor, float]]


def _scalar(value: Union[Tensor, float]) -> float:
    if isinstance(value, Tensor):
        if value.size != 1:
            raise DimensionError(f"loss must be a scalar, got shape {value.shape}")
        value = value.data.reshape(-1)[0]
    value = float(value)
    if not math.isfinite(value):
        raise EvaluationError(f"loss evaluated to {value}")
    return value


def gradient_check(
    loss_fn: LossFn,
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare backprop gradients with central differences.

    Returns the max over checked entries of
    |analytic - central| / max(1, |analytic|, |central|). ``max_entries`` caps
    how many entries of each parameter are probed (chosen with ``seed``).
    """
    if eps <= 0:
        raise InputError(f"eps must be positive, got {eps}")
    base = {name: np.array(value, dtype=np.float64) for name, value in params.items()}

    leaves = {name: Tensor(value, requires_grad=True, name=name) for name, value in base.items()}
    loss = loss_fn(leaves)
    _scalar(loss)
    if isinstance(loss, Tensor):
        loss.backward()

    def evaluate(name: str, perturbed: np.ndarray) -> float:
        inputs = {k: Tensor(perturbed if k == name else v) for k, v in base.items()}
        return _scalar(loss_fn(inputs))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in base.items():
        grad = leaves[name].grad
        analytic = np.zeros(value.size) if grad is None else grad.reshape(-1)
        indices: Iterable[int] = range(value.size)
        if max_entries is not None and value.size > max_entries:
            indices = sorted(rng.choice(value.size, size=max_entries, replace=False))
        flat = value.reshape(-1).copy()
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            up = evaluate(name, flat.reshape(value.shape))
            flat[i] = original - eps
            down = evaluate(name, flat.reshape(value.shape))
            flat[i] = original
            central = (up - down) / (2.0 * eps)
            a = float(analytic[i])
            worst = max(worst, abs(a - central) / max(1.0, abs(a), abs(central)))
    return worst
