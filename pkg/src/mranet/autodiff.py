"""Reverse-mode automatic differentiation over dense numpy arrays.

Only the operator set the network needs is provided: convolution, max pooling,
bilinear upsampling, pointwise arithmetic and activations, batch normalization,
dropout, the dense head and the softmax cross-entropy loss.  Every operator
refuses implicit broadcasting; shapes must agree exactly.

Each operator returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  :meth:`Tensor.backward`
walks the graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import hashlib
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "RngStream",
    "BatchNormState",
    "GradCheckResult",
    "no_grad",
    "record_kinks",
    "conv2d",
    "maxpool2d",
    "bilinear_upsample",
    "interpolation_matrix",
    "elementwise",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "add_scalar",
    "tensor_sum",
    "global_avg_pool",
    "batchnorm",
    "dropout",
    "dense",
    "softmax",
    "softmax_cross_entropy",
    "gradient_check",
]

_GRAD_ENABLED = True
# when a list, relu and maxpool2d append a checksum of their piecewise-linear branch pattern
_KINK_LOG: list | None = None

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@contextlib.contextmanager
def record_kinks() -> Iterator[list]:
    """Collect a checksum of every relu mask and max-pool argmax computed in the block."""
    global _KINK_LOG
    prev = _KINK_LOG
    _KINK_LOG = []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-dimensional array with an optional gradient slot and graph links."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        Gradients are added to any existing ``grad`` so that fan-out within a
        graph (and repeated backward passes over distinct graphs) accumulate.
        A graph can only be differentiated once.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            if node._consumed:
                raise RuntimeError(f"graph already consumed by a previous backward pass (node {node.op})")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._parents:
                node._consumed = True
                node._backward = None


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._consumed = False
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


class RngStream:
    """Counter-based random stream (Philox) addressed by ``(seed, stream, counter)``.

    The state after any draw is fully described by the three integers, so a
    stream can be checkpointed and rebuilt exactly.  ``fork`` derives an
    independent child stream from a name, which keeps draws independent of
    the order in which consumers ask for them.
    """

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self.counter = int(counter) & _MASK64

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    def __eq__(self, other) -> bool:
        return isinstance(other, RngStream) and self.state() == other.state()

    def state(self) -> tuple[int, int, int]:
        return (self.seed, self.stream, self.counter)

    @classmethod
    def from_state(cls, state: Sequence[int]) -> "RngStream":
        return cls(*state)

    def fork(self, name) -> "RngStream":
        digest = hashlib.sha256(f"{self.stream}/{name}".encode()).digest()
        return RngStream(self.seed, int.from_bytes(digest[:8], "little"), 0)

    def _draw(self, fn):
        bitgen = np.random.Philox(key=[self.seed, self.stream], counter=[self.counter, 0, 0, 0])
        out = fn(np.random.Generator(bitgen))
        # unused words of the last block are discarded so (seed, stream, counter) stays complete
        self.counter = int(bitgen.state["state"]["counter"][0])
        return out

    def random(self, shape, dtype=np.float64) -> np.ndarray:
        return self._draw(lambda g: g.random(shape, dtype=dtype))

    def normal(self, shape, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return self._draw(lambda g: (g.standard_normal(shape) * std).astype(dtype))

    def permutation(self, n: int) -> np.ndarray:
        return self._draw(lambda g: g.permutation(n))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._draw(lambda g: g.integers(low, high, size=size))


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate an NCHW input with an OIHW kernel and add a per-channel bias."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise ValueError(f"conv2d: input shape {x.shape} has {c} channels but kernel shape {kernel.shape} expects {i}")
    if bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match kernel shape {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} / padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d: zero-sized output for input {x.shape} and kernel {kernel.shape}")

    wmat = kernel.data.reshape(o, i * kh * kw)
    pointwise = kh == 1 and kw == 1 and padding == 0
    if pointwise:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    out = cols @ wmat.T
    out += bias.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (gmat.T @ cols).reshape(kernel.shape)
        if bias.requires_grad:
            gb = gmat.sum(axis=0)
        if x.requires_grad:
            dcols = gmat @ wmat
            if pointwise:
                dxs = dcols.reshape(n, oh, ow, c).transpose(0, 3, 1, 2)
                if stride > 1:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::stride, ::stride] = dxs
                else:
                    gx = np.ascontiguousarray(dxs)
            else:
                dcols = dcols.reshape(n, oh, ow, c, kh, kw)
                gxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
                for a in range(kh):
                    for b in range(kw):
                        gxp[:, :, a : a + stride * oh : stride, b : b + stride * ow : stride] += dcols[
                            :, :, :, :, a, b
                        ].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk, gb

    return _result(out, "conv2d", (x, kernel, bias), backward)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max over ``window``x``window`` cells; the gradient goes to the (first) argmax only."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ValueError(f"maxpool2d: invalid window={window} / stride={stride}")
    if h < window or w < window:
        raise ValueError(f"maxpool2d: window {window} larger than input {x.shape}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, oh, ow, window * window)
    arg = flat.argmax(axis=-1)
    if _KINK_LOG is not None:
        _KINK_LOG.append(zlib.crc32(arg.astype(np.int16).tobytes()))
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dr, dc = np.divmod(arg, window)
        rows = np.arange(oh)[:, None] * stride + dr
        cols = np.arange(ow)[None, :] * stride + dc
        base = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
        index = base + rows * w + cols
        gx = np.bincount(index.ravel(), weights=g.ravel(), minlength=x.data.size)
        return (gx.reshape(x.shape).astype(x.dtype, copy=False),)

    return _result(out, "maxpool2d", (x,), backward)


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation weights, shape ``(n_out, n_in)``."""
    mat = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        mat[:, 0] = 1.0
        return mat
    for i in range(n_out):
        src = i * (n_in - 1) / (n_out - 1)
        lo = min(int(np.floor(src)), n_in - 2)
        frac = src - lo
        mat[i, lo] += 1.0 - frac
        mat[i, lo + 1] += frac
    return mat


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear upsampling of an NCHW tensor to ``(out_h, out_w)``."""
    if x.data.ndim != 4:
        raise ValueError(f"bilinear_upsample expects NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ValueError(f"bilinear_upsample: cannot downscale {x.shape} to ({out_h}, {out_w})")
    if (out_h, out_w) == (h, w):
        return _result(x.data.copy(), "upsample", (x,), lambda g: (g,))
    ah = interpolation_matrix(h, out_h, x.dtype)
    aw = interpolation_matrix(w, out_w, x.dtype)
    out = ah @ x.data @ aw.T

    def backward(g):
        return (ah.T @ g @ aw,)

    return _result(out, "upsample", (x,), backward)


# ---------------------------------------------------------------------------
# Pointwise operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return _result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _KINK_LOG is not None:
        _KINK_LOG.append(zlib.crc32(np.packbits(mask).tobytes()))
    return _result(np.where(mask, a.data, 0).astype(a.dtype, copy=False), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def add_scalar(a: Tensor, value: float) -> Tensor:
    return _result(a.data + a.dtype.type(value), "add_scalar", (a,), lambda g: (g,))


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch to ``add``, ``mul``, ``relu`` or ``sigmoid`` by name."""
    if kind in ("add", "mul"):
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return add(a, b) if kind == "add" else mul(a, b)
    if kind in ("relu", "sigmoid"):
        if b is not None:
            raise ValueError(f"{kind} takes a single operand")
        return relu(a) if kind == "relu" else sigmoid(a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _result(out, "sum", (a,), lambda g: (np.full_like(a.data, g),))


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC mean over the spatial extent."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    return _result(out, "global_avg_pool", (x,), backward)


# ---------------------------------------------------------------------------
# Normalization and regularization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    In ``train`` mode the batch statistics normalize the input and the running
    statistics are updated in place; ``infer`` mode uses the running statistics.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match input {x.shape}")
    eps = state.eps
    g4 = gamma.data.reshape(1, c, 1, 1)
    if mode == "train":
        if n < 2:
            raise ValueError("batchnorm: train mode needs a batch of at least 2")
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = np.mean(centered * centered, axis=(0, 2, 3))
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = centered * invstd.reshape(1, c, 1, 1)
        mom = state.momentum
        state.running_mean = (mom * state.running_mean + (1 - mom) * mean).astype(state.running_mean.dtype)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_var = (mom * state.running_var + (1 - mom) * unbiased).astype(state.running_var.dtype)

        def backward(g):
            gxhat = g * g4
            gx = None
            if x.requires_grad:
                s1 = gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                gx = (invstd.reshape(1, c, 1, 1) / m) * (m * gxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    elif mode == "infer":
        invstd = (1.0 / np.sqrt(state.running_var + eps)).astype(x.dtype)
        xhat = (x.data - state.running_mean.astype(x.dtype).reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)

        def backward(g):
            gx = g * (g4 * invstd.reshape(1, c, 1, 1))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = (xhat * g4 + beta.data.reshape(1, c, 1, 1)).astype(x.dtype, copy=False)
    return _result(out, "batchnorm", (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, mode: str, rng: RngStream | None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` so inference is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an RngStream")
    keep = rng.random(x.shape) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.dtype) * scale
    return _result(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Classification head and loss
# ---------------------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(out, "dense", (x, weight, bias), backward)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of an N x K tensor."""
    if logits.data.ndim != 2:
        raise ValueError(f"softmax expects N x K logits, got {logits.shape}")
    p = _softmax(logits.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, "softmax", (logits,), backward)


def softmax_cross_entropy(logits: Tensor, onehot) -> Tensor:
    """Batch-mean categorical cross-entropy of softmax(logits) against one-hot targets."""
    y = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot)
    if logits.data.ndim != 2 or y.shape != logits.shape:
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape} vs targets {y.shape}")
    n, k = logits.shape
    if k < 2:
        raise ValueError("softmax_cross_entropy needs at least 2 classes")
    ones = y == 1
    if not (np.all(ones | (y == 0)) and np.all(ones.sum(axis=1) == 1)):
        bad = int(np.flatnonzero(~(np.all(ones | (y == 0), axis=1) & (ones.sum(axis=1) == 1)))[0])
        raise ValueError(f"softmax_cross_entropy: row {bad} is not a one-hot vector")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = np.asarray(-(logp[ones]).sum() / n, dtype=logits.dtype)
    y = y.astype(logits.dtype)

    def backward(g):
        return ((np.exp(logp) - y) * (g / n),)

    return _result(loss, "softmax_cross_entropy", (logits,), backward)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

_STOCHASTIC_OPS = frozenset({"dropout"})


@dataclass
class GradCheckResult:
    max_error: float
    worst: tuple[str, int] | None = None
    per_param: dict[str, float] = field(default_factory=dict)
    failure: str | None = None
    probes: int = 0
    refined: int = 0

    @property
    def ok(self) -> bool:
        return self.failure is None

    def passes(self, tolerance: float) -> bool:
        return self.failure is None and self.max_error < tolerance


def gradient_check(
    build: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    max_probes: int | None = None,
    rng: RngStream | None = None,
    refinements: int = 3,
) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``build`` must return a scalar loss computed from ``params`` and be
    deterministic.  The error for one coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``; the maximum over all probed
    coordinates is returned.  With ``max_probes`` set, each parameter is probed
    at that many coordinates drawn from ``rng`` instead of exhaustively.

    A central difference is only meaningful where the loss is smooth on
    ``[x - eps, x + eps]``.  If a probe changes any relu mask or max-pool
    argmax relative to the unperturbed point, the step for that coordinate is
    divided by 10 (at most ``refinements`` times); such coordinates are counted
    in ``result.refined``.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"gradient_check runs in double precision; {name} is {p.dtype}")
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = build()
    stochastic = sorted({n.op for n in _topological_order(loss)} & _STOCHASTIC_OPS)
    if stochastic:
        raise ValueError(f"graph contains stochastic ops {stochastic}; it cannot be gradient-checked")
    loss.backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for name, p in params.items()}

    def evaluate() -> tuple[float, tuple]:
        with no_grad(), record_kinks() as kinks:
            value = float(build().data)
        return value, tuple(kinks)

    _, base_pattern = evaluate()
    rng = rng or RngStream(0)
    result = GradCheckResult(max_error=0.0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if max_probes is None or max_probes >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.fork(name).permutation(flat.size)[:max_probes])
        worst = 0.0
        for i in idx:
            orig = flat[i]
            step = eps
            try:
                for attempt in range(refinements + 1):
                    flat[i] = orig + step
                    up, up_pattern = evaluate()
                    flat[i] = orig - step
                    down, down_pattern = evaluate()
                    flat[i] = orig
                    if up_pattern == base_pattern and down_pattern == base_pattern:
                        break
                    if attempt < refinements:
                        step /= 10.0
                if step != eps:
                    result.refined += 1
            except FloatingPointError as exc:
                result.failure = f"non-finite value probing {name}[{int(i)}]: {exc}"
                result.worst = (name, int(i))
                result.max_error = float("inf")
                return result
            finally:
                flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
            if err > result.max_error:
                result.max_error = err
                result.worst = (name, int(i))
        result.per_param[name] = worst
        result.probes += len(idx)
    return result
