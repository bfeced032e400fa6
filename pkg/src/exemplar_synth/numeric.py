"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a backward function mapping the output gradient to one gradient
per parent. :func:`backward` walks that tape in reverse topological order and
accumulates gradients into the leaf tensors that require them, then clears the
tape unless asked to retain it.

Storage is a contiguous NumPy ``float64`` array; there are no strided views,
every op copies. Convolutions use cross-correlation semantics.
"""

from __future__ import annotations

import contextlib
import hashlib
import os
import struct
import threading
from collections.abc import Iterator, Sequence
from pathlib import Path
from typing import Any, Callable, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, IoError, NumericError, ShapeError, StateError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

CHECKPOINT_MAGIC = b"AMAD01\n"

_mode = threading.local()
_debug = os.environ.get("EXEMPLAR_SYNTH_DEBUG", "") == "1"


def is_grad_enabled() -> bool:
    """Return True if operations in this thread record the tape."""
    return bool(getattr(_mode, "grad_enabled", True))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in this thread for the duration."""
    previous = is_grad_enabled()
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = previous


def set_debug(enabled: bool) -> None:
    """Toggle the post-op finite scan."""
    global _debug
    _debug = enabled


def finite_scan(values: np.ndarray, where: str) -> None:
    """Raise NumericError if ``values`` holds NaN or Inf."""
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        finite_scan(self.data, "Tensor()")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return _wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or tuple(reversed(range(self.ndim))))

    def sum(self, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis, keepdims)

    def mean(self) -> Tensor:
        return tensor_sum(self) * (1.0 / self.size)

    def __add__(self, other: ArrayLike) -> Tensor:
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> Tensor:
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return take(self, index)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"


def _wrap(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out._op = "leaf"
    return out


def as_tensor(value: ArrayLike) -> Tensor:
    """Return ``value`` unchanged if it is a Tensor, else a constant Tensor."""
    if isinstance(value, Tensor):
        return value
    return _wrap(np.array(value, dtype=np.float64))


def _result(
    data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str
) -> Tensor:
    if _debug:
        finite_scan(data, op)
    out = _wrap(np.ascontiguousarray(data, dtype=np.float64))
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _result(ta.data + tb.data, (ta, tb), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)

    return _result(ta.data - tb.data, (ta, tb), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)

    return _result(ta.data * tb.data, (ta, tb), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = _unbroadcast(g / tb.data, ta.shape)
        gb = _unbroadcast(-g * ta.data / (tb.data * tb.data), tb.shape)
        return ga, gb

    return _result(ta.data / tb.data, (ta, tb), backward, "div")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product ``[..., p, q] x [..., q, r] -> [..., p, r]``."""
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.ndim < 2 or tb.ndim < 2 or ta.shape[-1] != tb.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {ta.shape} x {tb.shape}")
    try:
        np.broadcast_shapes(ta.shape[:-2], tb.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch mismatch: {ta.shape} x {tb.shape}") from e

    def backward(g: np.ndarray) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        ga = gb = None
        if ta.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(tb.data, -1, -2), ta.shape)
        if tb.requires_grad:
            gb = _unbroadcast(np.swapaxes(ta.data, -1, -2) @ g, tb.shape)
        return ga, gb

    return _result(ta.data @ tb.data, (ta, tb), backward, "matmul")


def tensor_sum(
    x: ArrayLike, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False
) -> Tensor:
    tx = as_tensor(x)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, tx.shape).copy(),)

    return _result(np.sum(tx.data, axis=axis, keepdims=keepdims), (tx,), backward, "sum")


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    tx = as_tensor(x)
    try:
        out = tx.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {tx.shape} to {tuple(shape)}") from e

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(tx.shape),)

    return _result(out, (tx,), backward, "reshape")


def transpose(x: ArrayLike, axes: Sequence[int]) -> Tensor:
    tx = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(tx.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {tx.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return _result(np.transpose(tx.data, axes), (tx,), backward, "transpose")


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        shapes = [p.shape for p in parts]
        raise ShapeError(f"concat shape mismatch along axis {axis}: {shapes}") from e
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return _result(out, parts, backward, "concat")


def take(x: ArrayLike, index: Any) -> Tensor:
    """Basic or advanced indexing; the gradient scatters back with ``add.at``."""
    tx = as_tensor(x)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(tx.shape, dtype=np.float64)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(tx.data[index]), (tx,), backward, "take")


def softmax_lastdim(x: ArrayLike) -> Tensor:
    """Numerically stable softmax over the last axis."""
    tx = as_tensor(x)
    if tx.ndim == 0 or tx.size == 0:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {tx.shape}")
    shifted = tx.data - np.max(tx.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _result(s, (tx,), backward, "softmax")


def silu(x: ArrayLike) -> Tensor:
    """``x * sigmoid(x)``, the smooth ramp used between conv stages."""
    tx = as_tensor(x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * tx.data))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * sig * (1.0 + tx.data * (1.0 - sig)),)

    return _result(tx.data * sig, (tx,), backward, "silu")


def mse_loss(prediction: ArrayLike, target: ArrayLike) -> Tensor:
    diff = sub(prediction, target)
    return (diff * diff).mean()


def conv2d(
    x: ArrayLike,
    k: ArrayLike,
    bias: Optional[ArrayLike] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of ``x[..., c_in, H, W]`` with ``k[c_out, c_in, kh, kw]``.

    Leading axes of ``x`` are treated as a batch.
    """
    tx, tk = as_tensor(x), as_tensor(k)
    if tk.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D, got {tk.shape}")
    c_out, c_in, kh, kw = tk.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid conv2d stride={stride} padding={padding}")
    if tx.ndim < 3 or tx.shape[-3] != c_in:
        raise ShapeError(f"conv2d input {tx.shape} does not match kernel {tk.shape}")
    tb = as_tensor(bias) if bias is not None else None
    if tb is not None and tb.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {tb.shape}")

    lead = tx.shape[:-3]
    height, width = tx.shape[-2:]
    xb = tx.data.reshape((-1, c_in, height, width))
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (height + 2 * padding - kh) // stride + 1
    w_out = (width + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {tx.shape}")
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bchwij,ocij->bohw", windows, tk.data, optimize=True)
    if tb is not None:
        out = out + tb.data[None, :, None, None]
    out = out.reshape(lead + (c_out, h_out, w_out))

    def backward(g: np.ndarray) -> list[Optional[np.ndarray]]:
        gb = g.reshape((-1, c_out, h_out, w_out))
        grads: list[Optional[np.ndarray]] = [None, None]
        if tx.requires_grad:
            gxp = np.zeros_like(xp)
            rows = stride * (h_out - 1) + 1
            cols = stride * (w_out - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + rows : stride, j : j + cols : stride] += np.einsum(
                        "bohw,oc->bchw", gb, tk.data[:, :, i, j], optimize=True
                    )
            grads[0] = gxp[:, :, padding : padding + height, padding : padding + width].reshape(
                tx.shape
            )
        if tk.requires_grad:
            grads[1] = np.einsum("bohw,bchwij->ocij", gb, windows, optimize=True)
        if tb is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return grads

    parents = (tx, tk) if tb is None else (tx, tk, tb)
    return _result(out, parents, backward, "conv2d")


def upsample_nearest(x: ArrayLike, factor: int = 2) -> Tensor:
    """Repeat each pixel of ``x[..., H, W]`` into a ``factor x factor`` block."""
    tx = as_tensor(x)
    out = np.repeat(np.repeat(tx.data, factor, axis=-2), factor, axis=-1)
    height, width = tx.shape[-2:]

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        blocks = g.reshape(g.shape[:-2] + (height, factor, width, factor))
        return (blocks.sum(axis=(-3, -1)),)

    return _result(out, (tx,), backward, "upsample")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Repeated calls accumulate; clear with ``zero_grad``. The tape is released
    afterwards unless ``retain_graph`` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
        if not retain_graph:
            node._parents = ()
            node._backward = None
            node.requires_grad = False


class ParamSet:
    """Named parameters with per-entry freeze flags and AdamW moment state."""

    def __init__(self) -> None:
        self._tensors: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}
        self._moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._steps: dict[str, int] = {}

    def add(self, path: str, value: ArrayLike, frozen: bool = False) -> Tensor:
        if path in self._tensors:
            raise ConfigError(f"duplicate parameter path: {path}")
        t = Tensor(value, requires_grad=not frozen)
        self._tensors[path] = t
        self._frozen[path] = frozen
        return t

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._tensors[path]
        except KeyError as e:
            raise ConfigError(f"unknown parameter path: {path}") from e

    def __contains__(self, path: object) -> bool:
        return path in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self.paths())

    def paths(self, prefix: str = "") -> list[str]:
        return [p for p in self._tensors if p.startswith(prefix)]

    def is_frozen(self, path: str) -> bool:
        return self._frozen[path]

    def freeze(self, prefix: str = "") -> None:
        for path in self.paths(prefix):
            self._frozen[path] = True
            self._tensors[path].requires_grad = False

    def unfreeze(self, prefix: str = "") -> None:
        for path in self.paths(prefix):
            self._frozen[path] = False
            self._tensors[path].requires_grad = True

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def moments(self, path: str) -> Optional[tuple[np.ndarray, np.ndarray]]:
        return self._moments.get(path)

    def merge(self, other: ParamSet) -> None:
        """Add every entry of ``other`` (sharing its tensors)."""
        for path in other.paths():
            if path in self._tensors:
                raise ConfigError(f"duplicate parameter path: {path}")
            self._tensors[path] = other._tensors[path]
            self._frozen[path] = other._frozen[path]

    def subset(self, prefix: str) -> ParamSet:
        """View of the entries under ``prefix``; tensors are shared."""
        view = ParamSet()
        for path in self.paths(prefix):
            view._tensors[path] = self._tensors[path]
            view._frozen[path] = self._frozen[path]
        return view

    def digest(self, prefix: str = "", frozen_only: bool = False) -> str:
        """SHA-256 over the sorted paths and raw values under ``prefix``."""
        h = hashlib.sha256()
        for path in sorted(self.paths(prefix)):
            if frozen_only and not self._frozen[path]:
                continue
            h.update(path.encode("utf-8"))
            h.update(self._tensors[path].data.astype("<f8").tobytes())
        return h.hexdigest()


def sgd_adamw_step(
    params: ParamSet,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> None:
    """One AdamW update (decoupled weight decay) of every non-frozen entry."""
    beta1, beta2 = betas
    for path in params.paths():
        if params.is_frozen(path):
            continue
        p = params[path]
        if p.grad is None:
            raise StateError(f"parameter {path} has no gradient")
        g = p.grad
        m, v = params._moments.get(path, (np.zeros_like(p.data), np.zeros_like(p.data)))
        step = params._steps.get(path, 0) + 1
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        p.data = p.data * (1.0 - lr * weight_decay)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        params._moments[path] = (m, v)
        params._steps[path] = step


def save_params(params: ParamSet, path: Union[str, Path]) -> None:
    """Write ``params`` in the AMAD01 checkpoint format."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC]
    for name in params.paths():
        data = params[name].data
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.astype("<f8").tobytes())
        chunks.append(b"\x01" if params.is_frozen(name) else b"\x00")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(chunks))
    except OSError as e:
        raise IoError(path, f"cannot write checkpoint: {e}") from e


def load_params(path: Union[str, Path]) -> ParamSet:
    """Read an AMAD01 checkpoint; any truncation raises IoError."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise IoError(path, f"cannot read checkpoint: {e}") from e
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise IoError(path, "not an AMAD01 checkpoint")

    offset = len(CHECKPOINT_MAGIC)

    def read(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(blob):
            raise IoError(path, "truncated checkpoint")
        chunk = blob[offset : offset + count]
        offset += count
        return chunk

    params = ParamSet()
    while offset < len(blob):
        (name_len,) = struct.unpack("<I", read(4))
        try:
            name = read(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise IoError(path, "corrupt parameter path") from e
        (rank,) = struct.unpack("<I", read(4))
        extents = struct.unpack(f"<{rank}Q", read(8 * rank))
        count = int(np.prod(extents)) if rank else 1
        values = np.frombuffer(read(8 * count), dtype="<f8").reshape(extents)
        frozen = read(1) == b"\x01"
        params.add(name, values.astype(np.float64), frozen=frozen)
    return params
