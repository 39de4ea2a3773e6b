"""Dense tensor math on a reverse-mode tape.

Every differentiable computation in this package is built from the ops in
this module. An op validates its operands, computes the forward value with
numpy, and, when a tape is active and some operand tracks gradients, records
a closure implementing its backward rule. float32 is the training precision;
gradient checking runs at float64.

Also here: the AdamW optimizer with linear warmup, the central-difference
gradient oracle, a counter-based PRNG with a Box-Muller normal transform,
and per-tag flop accounting used to audit the frozen bias path.
"""

from __future__ import annotations

import hashlib
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericsError

LN_EPS = 1e-5

_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715

_STATE = threading.local()


# ---------------------------------------------------------------------------
# flop accounting
# ---------------------------------------------------------------------------


class FlopCounter:
    """Counts forward floating-point work, grouped by scope tag.

    Install as a context manager; ops executed inside report their flop
    estimate to the tag set by ``flop_scope``. Backward closures are not
    counted: the audit target is per-forward work.
    """

    def __init__(self) -> None:
        self.by_tag: dict[str, int] = {}

    def add(self, tag: str, n: int) -> None:
        self.by_tag[tag] = self.by_tag.get(tag, 0) + int(n)

    def total(self) -> int:
        return sum(self.by_tag.values())

    def get(self, tag: str) -> int:
        return self.by_tag.get(tag, 0)

    def __enter__(self) -> "FlopCounter":
        if getattr(_STATE, "counter", None) is not None:
            raise ContractError("flop counters do not nest")
        _STATE.counter = self
        _STATE.tag = "untagged"
        return self

    def __exit__(self, *exc) -> None:
        _STATE.counter = None


@contextmanager
def flop_scope(tag: str):
    """Attribute flops of the enclosed ops to ``tag``."""
    prev = getattr(_STATE, "tag", "untagged")
    _STATE.tag = tag
    try:
        yield
    finally:
        _STATE.tag = prev


def _flops(n: int) -> None:
    counter = getattr(_STATE, "counter", None)
    if counter is not None:
        counter.add(getattr(_STATE, "tag", "untagged"), n)


# ---------------------------------------------------------------------------
# tensors and the tape
# ---------------------------------------------------------------------------


class Tensor:
    """A dense float array, optionally tracked for gradients.

    Op outputs are immutable by convention. Parameter data may be mutated
    in place only between tapes (optimizer steps, finite-difference probes).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor holds non-finite values")
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = np.ascontiguousarray(arr) if arr.ndim else arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _tape_stack() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered op record. Parents always precede their outputs, so a single
    reverse sweep visits every node after all of its consumers."""

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        top = _tape_stack().pop()
        if top is not self:
            raise ContractError("tape context stack corrupted")

    @property
    def node_count(self) -> int:
        return len(self._nodes)

    def backward(self, loss: "Tensor") -> None:
        backward(loss, self)


@contextmanager
def no_tape():
    """Run ops without recording, regardless of any enclosing tape."""
    _tape_stack().append(None)
    try:
        yield
    finally:
        _tape_stack().pop()


def record_op(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Attach a backward rule for ``out`` to the active tape.

    Public so that domain modules can define their own primitives (cross
    entropy lives with the objective, not here). ``backward_fn`` maps the
    output gradient to one gradient per parent, None for skipped parents.
    """
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._nodes.append((out, tuple(parents), backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep over ``tape``: populate .grad on every requires_grad
    tensor reachable from ``loss``. Fan-out accumulates additively."""
    if loss.shape != ():
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    produced = {id(out) for out, _, _ in tape._nodes}
    if id(loss) not in produced:
        raise ContractError("backward: loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, parents, backward_fn in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        _accumulate_grad(out, g)
        parent_grads = backward_fn(g)
        for parent, pg in zip(parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                holders[key] = parent
    for key, g in grads.items():
        _accumulate_grad(holders[key], g)


def _accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype)
    if not np.all(np.isfinite(g)):
        raise NumericsError("non-finite gradient encountered in backward")
    t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# op helpers
# ---------------------------------------------------------------------------


def _need_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{op}: expected a 2-d tensor, got shape {t.shape}")


def _need_same_dtype(op: str, *ts: Tensor) -> None:
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise ContractError(f"{op}: mixed dtypes {sorted(map(str, dtypes))}")


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d(a, "matmul")
    _need_2d(b, "matmul")
    _need_same_dtype("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    _flops(2 * m * k * n)
    out = Tensor(a.data @ b.data)
    a_data, b_data = a.data, b.data

    def bw(g):
        return g @ b_data.T, a_data.T @ g

    return record_op(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    _need_2d(a, "transpose")
    out = Tensor(a.data.T)

    def bw(g):
        return (g.T,)

    return record_op(out, (a,), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same_dtype("add", a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ, {a.shape} vs {b.shape}")
    _flops(a.data.size)
    out = Tensor(a.data + b.data)

    def bw(g):
        return g, g

    return record_op(out, (a, b), bw)


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-c vector to every row of an (r, c) matrix."""
    _need_2d(m, "add_rowvec")
    _need_same_dtype("add_rowvec", m, v)
    if v.data.ndim != 1 or v.shape[0] != m.shape[1]:
        raise DimensionError(f"add_rowvec: {m.shape} + {v.shape}")
    _flops(m.data.size)
    out = Tensor(m.data + v.data[None, :])

    def bw(g):
        return g, g.sum(axis=0)

    return record_op(out, (m, v), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need_same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes differ, {a.shape} vs {b.shape}")
    _flops(a.data.size)
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def bw(g):
        return g * b_data, g * a_data

    return record_op(out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    if not math.isfinite(s):
        raise NumericsError("scale: non-finite scalar")
    _flops(a.data.size)
    out = Tensor(a.data * s)

    def bw(g):
        return (g * s,)

    return record_op(out, (a,), bw)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def div_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Divide elementwise by a scalar tensor (which may carry gradients)."""
    if s.shape != ():
        raise DimensionError(f"div_scalar: divisor must be scalar, got {s.shape}")
    _need_same_dtype("div_scalar", a, s)
    s_val = float(s.data)
    if s_val == 0.0:
        raise NumericsError("div_scalar: division by zero")
    _flops(2 * a.data.size)
    out = Tensor(a.data / s_val)
    a_data = a.data

    def bw(g):
        return g / s_val, np.asarray(-(g * a_data).sum() / (s_val * s_val), dtype=a_data.dtype)

    return record_op(out, (a, s), bw)


def sum_all(a: Tensor) -> Tensor:
    _flops(a.data.size)
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))
    shape, dtype = a.shape, a.dtype

    def bw(g):
        return (np.full(shape, g, dtype=dtype),)

    return record_op(out, (a,), bw)


def mean_rows(m: Tensor) -> Tensor:
    """Mean over rows: (r, c) -> (c,)."""
    _need_2d(m, "mean_rows")
    r = m.shape[0]
    _flops(m.data.size + m.shape[1])
    out = Tensor(m.data.mean(axis=0))

    def bw(g):
        return (np.repeat((g / r)[None, :], r, axis=0),)

    return record_op(out, (m,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; rows sum to 1.

    Rejects non-finite input outright rather than producing NaN rows.
    """
    _need_2d(x, "softmax_rows")
    if x.shape[1] < 1:
        raise DimensionError(f"softmax_rows: empty rows, shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericsError("softmax_rows: non-finite input")
    _flops(5 * x.data.size)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return record_op(out, (x,), bw)


def layernorm(x: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    """Per-row layer normalization with epsilon inside the square root.

    y = (x - mean) / sqrt(var + 1e-5) * gain + shift, variance biased (1/c).
    """
    _need_2d(x, "layernorm")
    _need_same_dtype("layernorm", x, gain, shift)
    c = x.shape[1]
    if c < 2:
        raise DimensionError(f"layernorm: need at least 2 columns, got shape {x.shape}")
    if gain.shape != (c,) or shift.shape != (c,):
        raise DimensionError(
            f"layernorm: params {gain.shape}/{shift.shape} do not match row width {c}"
        )
    _flops(8 * x.data.size)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    istd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * istd
    out = Tensor(xhat * gain.data[None, :] + shift.data[None, :])
    gain_data = gain.data

    def bw(g):
        gxhat = g * gain_data[None, :]
        # biased-variance layernorm backward
        gx = istd * (
            gxhat
            - gxhat.mean(axis=1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return record_op(out, (x, gain, shift), bw)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximate GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    _flops(12 * x.data.size)
    xd = x.data
    u = _GELU_C0 * (xd + _GELU_C1 * xd**3)
    t = np.tanh(u)
    out = Tensor(0.5 * xd * (1.0 + t))

    def bw(g):
        du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return record_op(out, (x,), bw)


def log_shift(x: Tensor, eps: float) -> Tensor:
    """log(x + eps); the shift keeps exact zeros finite."""
    shifted = x.data + eps
    if np.any(shifted <= 0.0):
        raise NumericsError("log_shift: argument not positive after shift")
    _flops(2 * x.data.size)
    out = Tensor(np.log(shifted))

    def bw(g):
        return (g / shifted,)

    return record_op(out, (x,), bw)


def vstack(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-d tensors by rows."""
    if not parts:
        raise ContractError("vstack: no tensors given")
    for p in parts:
        _need_2d(p, "vstack")
    _need_same_dtype("vstack", *parts)
    cols = {p.shape[1] for p in parts}
    if len(cols) > 1:
        raise DimensionError(f"vstack: column counts differ, {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    row_counts = [p.shape[0] for p in parts]

    def bw(g):
        pieces = []
        r = 0
        for n in row_counts:
            pieces.append(g[r : r + n])
            r += n
        return tuple(pieces)

    return record_op(out, tuple(parts), bw)


def hstack(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-d tensors by columns (head concatenation)."""
    if not parts:
        raise ContractError("hstack: no tensors given")
    for p in parts:
        _need_2d(p, "hstack")
    _need_same_dtype("hstack", *parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) > 1:
        raise DimensionError(f"hstack: row counts differ, {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    col_counts = [p.shape[1] for p in parts]

    def bw(g):
        pieces = []
        c = 0
        for n in col_counts:
            pieces.append(g[:, c : c + n])
            c += n
        return tuple(pieces)

    return record_op(out, tuple(parts), bw)


def slice_block(m: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    """Contiguous sub-block m[r0:r1, c0:c1]. Backward scatters into zeros."""
    _need_2d(m, "slice_block")
    rows, cols = m.shape
    if not (0 <= r0 < r1 <= rows and 0 <= c0 < c1 <= cols):
        raise ContractError(f"slice_block: [{r0}:{r1}, {c0}:{c1}] out of bounds for {m.shape}")
    out = Tensor(m.data[r0:r1, c0:c1])
    shape, dtype = m.shape, m.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[r0:r1, c0:c1] = g
        return (full,)

    return record_op(out, (m,), bw)


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != t.data.size:
        raise ContractError(f"reshape: cannot view {t.shape} as {shape}")
    out = Tensor(t.data.reshape(shape))
    orig = t.shape

    def bw(g):
        return (g.reshape(orig),)

    return record_op(out, (t,), bw)


def as_row(v: Tensor) -> Tensor:
    """(c,) -> (1, c)."""
    if v.data.ndim != 1:
        raise DimensionError(f"as_row: expected a vector, got shape {v.shape}")
    return reshape(v, (1, v.shape[0]))


def as_vector(m: Tensor) -> Tensor:
    """(1, c) -> (c,)."""
    if m.data.ndim != 2 or m.shape[0] != 1:
        raise DimensionError(f"as_vector: expected a single row, got shape {m.shape}")
    return reshape(m, (m.shape[1],))


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Central-difference check of the tape gradients of ``f``.

    ``f`` takes no arguments, closes over ``params``, and must be a pure
    deterministic map (checked by evaluating twice). All parameters must be
    float64. Parameters with requires_grad False are skipped. Returns the
    worst relative error with denominator max(|analytic|, |numeric|, 1e-6).

    The 1e-6 floor is the method's own resolution, not slack: each loss
    evaluation carries ~1e-16 relative rounding error, so the quotient
    (f+ - f-)/2h is only good to about eps*|f|/h in absolute terms. A
    gradient entry below that scale cannot be certified by finite
    differences at any tolerance; the floor keeps such entries from
    reporting pure measurement noise as a relative error.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ContractError("grad_check: parameters must be float64")
    v1 = _eval_scalar(f)
    v2 = _eval_scalar(f)
    if v1 != v2:
        raise ContractError("grad_check: f is not deterministic across evaluations")

    zero_grads(params)
    with Tape() as tape:
        loss = f()
        if loss.shape != ():
            raise ContractError(f"grad_check: f must return a scalar, got {loss.shape}")
        backward(loss, tape)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros(p.shape, dtype=p.dtype)
        for p in params
    ]

    worst = 0.0
    for p, a in zip(params, analytic):
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = _eval_scalar(f)
            flat[i] = orig - h
            f_minus = _eval_scalar(f)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst


def _eval_scalar(f: Callable[[], Tensor]) -> float:
    with no_tape():
        out = f()
    return float(out.data.reshape(()))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay and linear learning-rate warmup.

    lr(t) = base_lr * min(1, t / warmup_steps); t starts at 0 and is
    incremented before use, so the first step runs at base_lr / warmup_steps.
    Moment estimates are bias-corrected. Weight decay is applied directly to
    the parameter, scaled by the effective learning rate, never through the
    moments.
    """

    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]],
        base_lr: float,
        warmup_steps: int = 100,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        if warmup_steps < 1:
            raise ContractError("AdamW: warmup_steps must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ContractError("AdamW: betas must lie in [0, 1)")
        if base_lr <= 0.0:
            raise ContractError("AdamW: base_lr must be positive")
        self.params = [(str(name), p) for name, p in params]
        self.base_lr = float(base_lr)
        self.warmup_steps = int(warmup_steps)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {name: np.zeros(p.shape, dtype=p.dtype) for name, p in self.params}
        self.v = {name: np.zeros(p.shape, dtype=p.dtype) for name, p in self.params}

    def lr_at(self, t: int) -> float:
        return self.base_lr * min(1.0, t / self.warmup_steps)

    def step(self) -> None:
        self.t += 1
        lr = self.lr_at(self.t)
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros(p.shape, dtype=p.dtype)
            elif g.shape != p.shape:
                raise ContractError(f"AdamW: grad shape {g.shape} != param shape {p.shape} for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_entries(self) -> dict[str, np.ndarray]:
        """Moment and step state as checkpoint entries (resume support)."""
        out: dict[str, np.ndarray] = {"opt.t": np.asarray(float(self.t), dtype=np.float32)}
        for name, _ in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_entries(self, entries: dict[str, np.ndarray]) -> None:
        # rank-0 at save time, rank-1 after a file roundtrip
        self.t = int(round(float(np.asarray(entries["opt.t"]).ravel()[0])))
        for name, p in self.params:
            m = np.asarray(entries[f"opt.m.{name}"], dtype=p.dtype).reshape(p.shape)
            v = np.asarray(entries[f"opt.v.{name}"], dtype=p.dtype).reshape(p.shape)
            self.m[name] = m.copy()
            self.v[name] = v.copy()


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


def stable_child_seed(seed: int, name: str) -> int:
    """Derive a child seed from (seed, name) by hashing. Python's built-in
    hash is salted per process, so this goes through sha256 instead."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")

class Rng:
    """Seedable counter-based PRNG (Philox) with a Box-Muller normal
    transform. Every stochastic op in the package takes one of these
    explicitly; streams are bit-reproducible for a given seed."""

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & (2**64 - 1)
        self._gen = np.random.Generator(np.random.Philox(seed=self.seed))

    def child(self, name: str) -> "Rng":
        return Rng(stable_child_seed(self.seed, name))

    def uniform(self, shape) -> np.ndarray:
        """U[0, 1) samples, float64."""
        return self._gen.random(shape, dtype=np.float64)

    def normal(self, shape) -> np.ndarray:
        """Standard normal samples via Box-Muller on Philox uniforms."""
        n = int(np.prod(shape, dtype=np.int64)) if not np.isscalar(shape) else int(shape)
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs, dtype=np.float64)  # (0, 1]
        u2 = self._gen.random(pairs, dtype=np.float64)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * math.pi * u2), r * np.sin(2.0 * math.pi * u2)])[:n]
        return z.reshape(shape) if not np.isscalar(shape) else z

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# digests
# ---------------------------------------------------------------------------


def tensor_digest(named: dict[str, Tensor]) -> str:
    """Order-independent sha256 digest of named tensors, for freeze audits."""
    h = hashlib.sha256()
    for name in sorted(named):
        t = named[name]
        h.update(name.encode("utf-8"))
        h.update(str(t.shape).encode("ascii"))
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
