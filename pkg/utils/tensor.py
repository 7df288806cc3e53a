"""
Tensor core for the LoGoNet toolkit
Dense NumPy-backed tensors with a recorded tape for reverse-mode
differentiation, precision control, seeded RNG streams and a central
finite-difference gradient checker

Activations use the rank-5 layout (b, C, S, H, W); tokens, logits and losses
are lower-rank views of the same Tensor type.
"""

import itertools
import logging
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from utils.errors import ArgumentError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

PRECISIONS = {
    "test": np.float64,
    "train": np.float32,
    "float64": np.float64,
    "float32": np.float32,
}

_state = {
    "dtype": np.dtype(np.float32),
    "grad_enabled": True,
    "check_finite": True,
}

# Creation order of every tensor; backward replays the tape in reverse of it
_ORDER = itertools.count()

_cost_listeners = []


def set_precision(name):
    """
    Set the default floating dtype for new tensors

    Args:
        name: 'train' / 'float32' or 'test' / 'float64'
    """
    if name not in PRECISIONS:
        raise ArgumentError(f"unknown precision '{name}', expected one of {sorted(PRECISIONS)}")
    _state["dtype"] = np.dtype(PRECISIONS[name])


def get_dtype():
    """Return the current default floating dtype"""
    return _state["dtype"]


@contextmanager
def precision(name):
    """
    Temporarily switch the default dtype

    Usage:
        with precision("test"):
            # tensors created here are float64
    """
    previous = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextmanager
def no_grad():
    """Disable tape recording inside the block"""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def is_grad_enabled():
    return _state["grad_enabled"]


def make_rng(seed, *keys):
    """
    Create a counter-based generator for a seed and optional stream keys

    Args:
        seed: Non-negative integer seed
        *keys: Extra integers selecting an independent stream (e.g. step index)

    Returns:
        numpy Generator backed by Philox
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def split_rng(rng, n):
    """Split a generator into n independent child generators"""
    return rng.spawn(n)


def emit_cost(kind, params=0, macs=0, elementwise=0, shape=()):
    """Report the cost of one executed op to every active listener"""
    for listener in _cost_listeners:
        listener(kind, int(params), int(macs), int(elementwise), tuple(shape))


def costs_enabled():
    return bool(_cost_listeners)


@contextmanager
def cost_listener(callback):
    """Subscribe a callback to op cost events for the duration of the block"""
    _cost_listeners.append(callback)
    try:
        yield
    finally:
        _cost_listeners.remove(callback)


class Tensor:
    """
    Dense array with an optional gradient

    A tensor created by a differentiable op remembers its parents and a
    backward closure. Calling backward() on a scalar walks the recorded tape
    in reverse creation order, so gradient accumulation happens in a fixed
    order and repeated runs are bitwise identical.

    A meta tensor has a shape but no data; ops on meta tensors only compute
    output shapes (used by the cost walker).
    """

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf",
                 _shape=None, _dtype=None):
        if data is None:
            self.data = None
            self.shape = tuple(int(s) for s in _shape)
            self._dtype = np.dtype(_dtype or get_dtype())
        else:
            self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
            self.shape = tuple(self.data.shape)
            self._dtype = self.data.dtype
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._order = next(_ORDER)

    @classmethod
    def meta(cls, shape, dtype=None):
        """Create a data-less tensor of the given shape"""
        return cls(None, _shape=shape, _dtype=dtype)

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def dtype(self):
        return self._dtype

    @property
    def is_meta(self):
        return self.data is None

    @property
    def is_leaf(self):
        return self._backward is None

    def __repr__(self):
        kind = "meta" if self.is_meta else str(self.dtype)
        return f"<Tensor(shape={self.shape}, {kind}, requires_grad={self.requires_grad}, op='{self._op}')>"

    def numpy(self):
        """Return the underlying array"""
        return self.data

    def item(self):
        if self.size != 1:
            raise ArgumentError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """Return a tensor sharing data but cut from the tape"""
        if self.is_meta:
            return Tensor.meta(self.shape, self.dtype)
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------------
    # backward
    # ------------------------------------------------------------------

    def _tape(self):
        """Collect every recorded node reachable from this tensor, newest first"""
        seen = set()
        nodes = []
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for parent in node._parents:
                if parent.requires_grad:
                    stack.append(parent)
        nodes.sort(key=lambda n: n._order, reverse=True)
        return nodes

    def backward(self, grad=None):
        """
        Accumulate d(self)/d(leaf) into every reachable leaf with requires_grad

        Args:
            grad: Upstream gradient; may be omitted only for a scalar tensor

        Raises:
            ArgumentError: if self is not scalar and no gradient is given
        """
        if self.is_meta:
            raise ArgumentError("backward() on a meta tensor")
        if grad is None:
            if self.size != 1:
                raise ArgumentError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones(self.shape, dtype=self.dtype)
        if not self.requires_grad:
            return

        pending = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in self._tape():
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return elementwise("add", self, other)
        return _scalar_affine(self, 1.0, float(other), "add_scalar")

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return elementwise("sub", self, other)
        return _scalar_affine(self, 1.0, -float(other), "sub_scalar")

    def __rsub__(self, other):
        return _scalar_affine(self, -1.0, float(other), "rsub_scalar")

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise("mul", self, other)
        return _scalar_affine(self, float(other), 0.0, "mul_scalar")

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return _scalar_affine(self, -1.0, 0.0, "neg")

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return divide(self, other)
        return _scalar_affine(self, 1.0 / float(other), 0.0, "div_scalar")

    def __getitem__(self, index):
        return take(self, index)

    # ------------------------------------------------------------------
    # shape ops
    # ------------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def flatten_spatial(self):
        return flatten_spatial(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self, floor=1e-12):
        return log(self, floor)


class Parameter(Tensor):
    """
    Trainable leaf tensor

    The name is the stable dotted path of the parameter inside its model
    (e.g. 'global.enc1.lka0.attn.chconv.weight'); it is filled in when the
    owning module enumerates its parameters.
    """

    def __init__(self, data, name=None):
        super().__init__(np.ascontiguousarray(data), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"<Parameter(name='{self.name}', shape={self.shape})>"


def tensor(values, requires_grad=False, dtype=None):
    """Create a leaf tensor in the default (or given) dtype"""
    data = np.array(values, dtype=dtype or get_dtype(), copy=True)
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape, dtype=get_dtype()), requires_grad=requires_grad)


def randn(shape, rng, requires_grad=False):
    return Tensor(rng.standard_normal(shape).astype(get_dtype()), requires_grad=requires_grad)


def _result(data, parents, backward, op, shape=None, dtype=None):
    """Wrap an op output, recording it on the tape when a parent needs grad"""
    track = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    if data is None:
        return Tensor(None, requires_grad=track, _parents=parents if track else (),
                      _backward=backward if track else None, _op=op, _shape=shape,
                      _dtype=dtype or parents[0].dtype)
    if _state["check_finite"] and data.dtype.kind == "f" and not np.isfinite(data).all():
        if all(p.is_meta or np.isfinite(p.data).all() for p in parents):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    if not track:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


def any_meta(*tensors):
    return any(t.is_meta for t in tensors)


def elementwise(op, a, b):
    """
    Elementwise add / sub / mul of two same-shape tensors

    Raises:
        ShapeError: on shape mismatch
        ArgumentError: on an unknown op
    """
    if op not in ("add", "sub", "mul"):
        raise ArgumentError(f"unknown elementwise op '{op}'")
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    if costs_enabled():
        emit_cost(op, elementwise=a.size, shape=a.shape)
    if any_meta(a, b):
        return _result(None, (a, b), None, op, shape=a.shape)

    if op == "add":
        out = a.data + b.data

        def backward(g):
            return g, g
    elif op == "sub":
        out = a.data - b.data

        def backward(g):
            return g, -g
    else:
        out = a.data * b.data

        def backward(g):
            return g * b.data, g * a.data
    return _result(out, (a, b), backward, op)


def divide(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} differ")
    if any_meta(a, b):
        return _result(None, (a, b), None, "div", shape=a.shape)
    out = a.data / b.data

    def backward(g):
        return g / b.data, -g * a.data / (b.data * b.data)
    return _result(out, (a, b), backward, "div")


def _scalar_affine(x, scale, shift, op):
    """Return scale * x + shift"""
    if x.is_meta:
        return _result(None, (x,), None, op, shape=x.shape)
    if scale != 1.0:
        out = x.data * x.dtype.type(scale) + x.dtype.type(shift)
    else:
        out = x.data + x.dtype.type(shift)

    def backward(g):
        return (g * x.dtype.type(scale) if scale != 1.0 else g,)
    return _result(out, (x,), backward, op)


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)
    return _result(out, (x,), backward, "exp")


def log(x, floor=1e-12):
    """Natural log with the argument clamped from below at floor"""
    clipped = np.maximum(x.data, x.dtype.type(floor))
    out = np.log(clipped)

    def backward(g):
        return (np.where(x.data > floor, g / clipped, 0.0).astype(x.dtype),)
    return _result(out, (x,), backward, "log")


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(x, axis=None, keepdims=False):
    """Sum over the given axes (NumPy pairwise order along each axis)"""
    axes = _normalize_axes(axis, x.ndim)
    if x.is_meta:
        shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape)) if keepdims else \
            tuple(s for i, s in enumerate(x.shape) if i not in axes)
        return _result(None, (x,), None, "sum", shape=shape)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        g = g if keepdims else np.expand_dims(g, axes)
        return (np.ascontiguousarray(np.broadcast_to(g, x.shape)),)
    return _result(np.asarray(out), (x,), backward, "sum")


def reduce_mean(x, axis=None, keepdims=False):
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes], dtype=np.int64)) or 1
    return reduce_sum(x, axes, keepdims) * (1.0 / count)


def reshape(x, shape):
    """Reshape; row-major element order is preserved"""
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1], dtype=np.int64))
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    if x.is_meta:
        return _result(None, (x,), None, "reshape", shape=shape)
    original = x.shape

    def backward(g):
        return (g.reshape(original),)
    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def permute(x, axes):
    """
    Reorder axes

    Raises:
        ArgumentError: if axes is not a permutation of 0..ndim-1
    """
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ArgumentError(f"{axes} is not a permutation of the {x.ndim} axes of {x.shape}")
    shape = tuple(x.shape[a] for a in axes)
    if x.is_meta:
        return _result(None, (x,), None, "permute", shape=shape)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)
    return _result(np.transpose(x.data, axes), (x,), backward, "permute")


def flatten_spatial(x):
    """(b, C, S, H, W) -> (b, C, S*H*W), row-major over (S, H, W)"""
    if x.ndim != 5:
        raise ShapeError(f"flatten_spatial expects a rank-5 tensor, got shape {x.shape}")
    b, c, s, h, w = x.shape
    return reshape(x, (b, c, s * h * w))


def take(x, index):
    """Basic or integer-array indexing; gradients are scattered back with np.add.at"""
    if x.is_meta:
        shape = np.broadcast_to(np.empty((), dtype=np.bool_), x.shape)[index].shape
        return _result(None, (x,), None, "take", shape=shape)
    out = x.data[index]

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        np.add.at(full, index, g)
        return (full,)
    return _result(np.array(out, copy=True), (x,), backward, "take")


def concat(tensors, axis=1):
    """
    Concatenate along one axis; all other extents must agree

    Raises:
        ShapeError: if any non-concatenated extent differs
    """
    tensors = tuple(tensors)
    if not tensors:
        raise ArgumentError("concat needs at least one tensor")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape)) if i != axis):
            raise ShapeError(f"concat on axis {axis}: shapes {ref.shape} and {t.shape} disagree")
    shape = list(ref.shape)
    shape[axis] = sum(t.shape[axis] for t in tensors)
    if any_meta(*tensors):
        return _result(None, tensors, None, "concat", shape=shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _result(out, tensors, backward, "concat")


@dataclass
class GradCheckResult:
    """Outcome of a finite-difference comparison"""
    max_rel_error: float
    worst: tuple
    checked: int

    def passed(self, tolerance):
        return self.max_rel_error < tolerance


def check_gradients(fn, inputs, h=1e-5, samples=None, rng=None, floor=1e-2):
    """
    Compare analytic gradients with central finite differences

    Args:
        fn: Zero-argument callable returning a scalar Tensor built from inputs
        inputs: Tensors (or Parameters) to differentiate; data must be writable
        h: Finite-difference step
        samples: Coordinates perturbed per input (None = all)
        rng: Generator used to choose perturbed coordinates
        floor: Lower bound of the relative-error denominator

    Returns:
        GradCheckResult with the largest |analytic - numeric| / max(|a|, |n|, floor)
    """
    inputs = list(inputs)
    if any(t.dtype != np.float64 for t in inputs):
        logger.warning("gradient check on non-float64 inputs; expect rounding noise")
    rng = rng if rng is not None else make_rng(0)
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    loss = fn()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros(t.shape, dtype=t.dtype) for t in inputs]

    worst_error, worst, checked = 0.0, (), 0
    with no_grad():
        for position, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise ArgumentError(f"input {position} is not contiguous; cannot perturb in place")
            if samples is None or samples >= flat.size:
                indices = np.arange(flat.size)
            else:
                indices = np.sort(rng.choice(flat.size, size=samples, replace=False))
            for idx in indices:
                original = flat[idx]
                flat[idx] = original + h
                plus = float(fn().data)
                flat[idx] = original - h
                minus = float(fn().data)
                flat[idx] = original
                numeric = (plus - minus) / (2.0 * h)
                exact = float(analytic[position].reshape(-1)[idx])
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                checked += 1
                if error > worst_error:
                    worst_error, worst = error, (position, int(idx), exact, numeric)
    return GradCheckResult(worst_error, worst, checked)
