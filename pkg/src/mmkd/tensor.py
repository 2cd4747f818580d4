"""Dense tensors with reverse-mode automatic differentiation.

Every operation that involves a tensor with ``requires_grad`` appends a node to
a :class:`Graph`. The graph lives for one forward pass: :func:`backward` walks
its nodes once, in reverse append order, and then marks it consumed.

Tensors hold numpy arrays. Parameters and activations are float32; an op keeps
the dtype of its inputs so the same network can be replayed in float64 for
finite-difference checks.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, StateError

DEFAULT_DTYPE = np.float32

# op name -> gradient multiplier, used only by fault-injection tests
_GRAD_FAULTS: dict[str, float] = {}


class Tensor:
    """An n-dimensional float array that may take part in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_graph", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._graph: Graph | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._graph is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; only same-shape tensors or python scalars are accepted
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Append-only record of the operations of one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise StateError("cannot extend a graph after backward() consumed it")
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


def _graph_for(inputs: Sequence[Tensor]) -> Graph:
    graph = None
    for t in inputs:
        g = t._graph
        if g is None:
            continue
        if graph is None:
            graph = g
        elif g is not graph:
            raise StateError("operation mixes tensors from different graphs")
    if graph is None:
        graph = Graph()
    elif graph.consumed:
        raise StateError("tensor belongs to a graph that was already consumed by backward()")
    return graph


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(t.requires_grad for t in inputs):
        graph = _graph_for(inputs)
        out.requires_grad = True
        out._graph = graph
        graph.record(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf that ``loss`` depends on.

    Leaf gradients accumulate, so callers reset them between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    graph = loss._graph
    if graph is None:
        raise ContractError("loss was not produced by a recorded operation")
    if graph.consumed:
        raise StateError("backward() was already called on this graph")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        factor = _GRAD_FAULTS.get(node.op)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if factor is not None:
                ig = ig * factor
            if inp._graph is graph:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
            else:
                ig = ig.astype(inp.data.dtype, copy=False)
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
    graph.consumed = True
    graph.nodes.clear()


@contextmanager
def inject_grad_fault(op: str, factor: float) -> Iterator[None]:
    """Scale the gradients emitted by every ``op`` node; for checker self-tests."""
    _GRAD_FAULTS[op] = factor
    try:
        yield
    finally:
        _GRAD_FAULTS.pop(op, None)


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _result("add_scalar", x.data + c, (x,), lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` to every trailing block of ``x``; ``b.shape`` must equal ``x.shape[-b.ndim:]``."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add_bias: bias {b.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return _result("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead) if lead else g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise ContractError("log: input must be strictly positive")
    return _result("log", np.log(xd), (x,), lambda g: (g / xd,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result("reshape", out, (x,), lambda g: (g.reshape(old),))


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        out = np.asarray(x.data.sum(dtype=x.dtype), dtype=x.dtype)
        return _result("sum", out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.ndim
    out = x.data.sum(axis=ax)
    return _result("sum", out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis % x.ndim]
    return scale(tensor_sum(x, axis), 1.0 / n)


def take_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[i, index[i]]`` for a 2-D ``x``."""
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"take_last: need [B,C] and [B] index, got {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, index] = g
        return (out,)

    return _result("take_last", x.data[rows, index], (x,), bw)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def _softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_lastdim(z: Tensor) -> Tensor:
    s = _softmax_np(z.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result("softmax", s, (z,), bw)


def log_softmax_lastdim(z: Tensor) -> Tensor:
    out = _log_softmax_np(z.data)
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", out, (z,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _result("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (n, ho, wo, c, kh, kw), (s0, s2 * stride, s3 * stride, s1, s2, s3), writeable=False
    )


def conv2d(x: Tensor, k: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Valid (unpadded) cross-correlation.

    ``x`` is ``[C_in, H, W]`` or a batch ``[N, C_in, H, W]``; ``k`` is
    ``[C_out, C_in, kh, kw]``. Output spatial size is ``(H - kh) // stride + 1``.
    """
    if stride < 1:
        raise ContractError(f"conv2d: stride must be positive, got {stride}")
    single = x.ndim == 3
    if x.ndim not in (3, 4) or k.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks, input {x.shape}, kernel {k.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    co, ci, kh, kw = k.shape
    if ci != c:
        raise DimensionError(f"conv2d: input {x.shape} has {c} channels, kernel {k.shape} expects {ci}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d: kernel {k.shape} larger than input {x.shape}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {co} output channels")

    xd = np.ascontiguousarray(xd)
    cols = _windows(xd, kh, kw, stride)
    ho, wo = cols.shape[1], cols.shape[2]
    cols = cols.reshape(n * ho * wo, ci * kh * kw)
    kmat = k.data.reshape(co, ci * kh * kw)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out[0] if single else out)

    def bw(g):
        g4 = g[None] if single else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        dk = (g2.T @ cols).reshape(k.shape) if k.requires_grad else None
        db = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, ci, kh, kw)
            dx = np.zeros((n, c, h, w), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if single:
                dx = dx[0]
        return (dx, dk, db) if bias is not None else (dx, dk)

    inputs = (x, k, bias) if bias is not None else (x, k)
    return _result("conv2d", out, inputs, bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def finite_diff_check(
    builder: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    tolerance: float = 1e-3,
    h: float = 1e-3,
) -> GradCheckReport:
    """Compare autodiff gradients with central finite differences.

    ``builder`` maps named parameter tensors to a scalar loss. The autodiff pass
    runs in float32; the finite-difference replica runs in float64. The error
    for one parameter tensor is ``max|g_ad - g_fd| / max|g_fd|``.
    """
    leaves = {k: Tensor(np.asarray(v, dtype=np.float32), requires_grad=True) for k, v in params.items()}
    loss = builder(leaves)
    backward(loss)

    base = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}

    def f64_loss() -> float:
        return builder({k: Tensor(v, dtype=np.float64) for k, v in base.items()}).item()

    per_param: dict[str, float] = {}
    for name, arr in base.items():
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f64_loss()
            flat[i] = orig - h
            down = f64_loss()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2 * h)
        ad = leaves[name].grad
        ad = np.zeros_like(fd) if ad is None else ad.astype(np.float64)
        scale_ = max(float(np.abs(fd).max()), 1e-12)
        per_param[name] = float(np.abs(ad - fd).max() / scale_)
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(worst, per_param, tolerance)


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"MMKDCKPT"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write named float32 arrays after a JSON manifest of names, shapes and offsets."""
    entries = []
    offset = 0
    payloads = []
    for name in params:
        arr = np.ascontiguousarray(np.asarray(params[name], dtype="<f4"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
        payloads.append(arr.tobytes())
    manifest = json.dumps({"params": entries, "meta": dict(meta or {})}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for p in payloads:
            fh.write(p)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<Q", raw, 12)
    manifest = json.loads(raw[20:20 + mlen].decode("utf-8"))
    start = 20 + mlen
    params = {}
    for e in manifest["params"]:
        lo = start + e["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=lo)
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return params, manifest.get("meta", {})
