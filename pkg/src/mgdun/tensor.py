"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every differentiable op builds a `Tensor` node that remembers its inputs and a
closure mapping the output gradient to input gradients. ``Tensor.backward``
walks the graph once in reverse topological order, summing gradients on
fan-out.

The op vocabulary is deliberately small: exactly what the denoiser, the
invertible cross-modal transform, the up/down blocks and the L1 loss need.
Storage is float32 by default; ops preserve the dtype of their inputs so the
same graph can be replayed in float64 by gradient checks.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference, validation)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A node of the computation graph.

    ``data`` is the cached forward value, ``grad`` the cached gradient filled
    by :meth:`backward` (leaves accumulate across calls, intermediates are
    overwritten).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return negate(self)

    def backward(self) -> None:
        """Populate ``.grad`` for every node reachable from this scalar loss."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar-valued loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; the graphs here are a few thousand nodes deep
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1, 1, 1, 1), x, dtype=like.dtype))


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, op=op, parents=parents, backward=backward)


def _broadcast_pair(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape} "
                     "(only scalar-with-tensor broadcasting is supported)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _out_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    return a.shape if a.data.size >= b.data.size else b.shape


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "add")
    out = a.data + b.data
    return _node(out.reshape(_out_shape(a, b)), "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "sub")
    out = a.data - b.data
    return _node(out.reshape(_out_shape(a, b)), "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "hadamard")
    out = a.data * b.data
    return _node(out.reshape(_out_shape(a, b)), "hadamard", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s_ = a.dtype.type(s)
    return _node(a.data * s_, "scalar_mul", (a,), lambda g: (g * s_,))


def negate(a: Tensor) -> Tensor:
    return _node(-a.data, "negate", (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0).astype(a.dtype), "relu", (a,),
                 lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only strictly inside the interval."""
    inside = (a.data > lo) & (a.data < hi)
    return _node(np.clip(a.data, lo, hi), "clamp", (a,), lambda g: (g * inside,))


def mean_abs(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(np.abs(a.data.astype(np.float64)).mean(), dtype=a.dtype)
    return _node(out, "mean_abs", (a,),
                 lambda g: ((np.sign(a.data) * (g / n)).astype(a.dtype),))


def total(a: Tensor) -> Tensor:
    """Sum of all elements (scalar); used to form weighted test losses."""
    out = np.asarray(a.data.astype(np.float64).sum(), dtype=a.dtype)
    return _node(out, "total", (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


# ---------------------------------------------------------------------------
# channel plumbing
# ---------------------------------------------------------------------------

def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    base = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ValueError(f"concat: shape mismatch {base} vs {p.shape}")
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=1), "concat", tuple(parts), backward)


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _node(np.ascontiguousarray(a.data[:, start:stop]), "channel_slice", (a,), backward)


def split_channels(a: Tensor, first: int) -> tuple[Tensor, Tensor]:
    return channel_slice(a, 0, first), channel_slice(a, first, a.shape[1])


# ---------------------------------------------------------------------------
# spatial
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, h, w, c, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j] = xp[:, :, i:i + h, j:j + w].transpose(0, 2, 3, 1)
    return cols.reshape(n * h * w, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (no kernel flip)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    out_c, in_c, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != in_c:
        raise ValueError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {in_c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel dims must be odd, got weight {weight.shape}")
    if stride != 1:
        raise ValueError(f"conv2d: only stride 1 is supported, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    if bias is not None and bias.shape != (out_c,):
        raise ValueError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {x.shape} too small for weight {weight.shape}")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    wmat = weight.data.reshape(out_c, -1).astype(x.dtype, copy=False)
    cols = _im2col(np.pad(x.data, pad), kh, kw, ho, wo)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data.astype(x.dtype, copy=False)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, out_c)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if weight.requires_grad:
            # recompute columns rather than holding them for the whole graph
            cols_ = _im2col(np.pad(x.data, pad), kh, kw, ho, wo)
            gw = (gmat.T @ cols_).reshape(weight.shape).astype(weight.dtype, copy=False)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0).astype(bias.dtype, copy=False)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, "conv2d", parents, backward)


def maxpool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial dims must be even, got {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=x.dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, c, h, w),)

    return _node(np.ascontiguousarray(out), "maxpool2", (x,), backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _node(out, "upsample_nearest2", (x,),
                 lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def _unshuffle(a: np.ndarray) -> np.ndarray:
    n, c, h, w = a.shape
    a = a.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(a.reshape(n, 4 * c, h // 2, w // 2))


def _shuffle(a: np.ndarray) -> np.ndarray:
    n, c4, h, w = a.shape
    a = a.reshape(n, c4 // 4, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(a.reshape(n, c4 // 4, 2 * h, 2 * w))


def pixel_unshuffle2(x: Tensor) -> Tensor:
    """Space-to-depth: (n, c, h, w) -> (n, 4c, h/2, w/2)."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"pixel_unshuffle2: spatial dims must be even, got {x.shape}")
    return _node(_unshuffle(x.data), "pixel_unshuffle2", (x,), lambda g: (_shuffle(g),))


def pixel_shuffle2(x: Tensor) -> Tensor:
    """Depth-to-space, the exact inverse of :func:`pixel_unshuffle2`."""
    if x.shape[1] % 4:
        raise ValueError(f"pixel_shuffle2: channels must be divisible by 4, got {x.shape}")
    return _node(_shuffle(x.data), "pixel_shuffle2", (x,), lambda g: (_unshuffle(g),))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def leaves(nodes: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in nodes if t.is_leaf and t.requires_grad]
