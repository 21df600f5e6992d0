"""Dense N-D tensors with reverse-mode automatic differentiation.

A small define-by-run engine: operations compute eagerly on numpy buffers
and, while a Tape is active, record how to push gradients back through
themselves. Each forward pass builds a fresh tape; ``backward`` replays it
in reverse order, accumulating into ``Tensor.grad`` for every tensor that
requires gradients.

float32 is the working precision for training; gradient checking must run
in float64 (central finite differences are unreliable in float32).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32


class Tensor:
    """A dense N-D array plus an optional gradient buffer of the same shape."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            # keep float arrays at their stated precision (float64 gradient
            # checks depend on it); everything else lands on the default
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{req}{nm})"

    # operator sugar; the module-level functions are the primary API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _TapeEntry:
    out: Tensor
    inputs: tuple[Tensor, ...]
    # maps the output gradient to one gradient (or None) per input
    backward: "callable"


@dataclass
class Tape:
    """Ordered record of one forward pass, rebuilt per pass (define-by-run).

    Entries are appended in execution order, so every op's inputs precede
    it and a single reverse sweep accumulates each tensor's gradient
    exactly once per use.
    """

    entries: list[_TapeEntry] = field(default_factory=list)
    _tracked: set[int] = field(default_factory=set)

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _STATE.stack.pop()
        assert popped is self

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.entries.append(_TapeEntry(out, inputs, backward))
        self._tracked.add(id(out))


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _State()


def _active_tape() -> Tape | None:
    return _STATE.stack[-1] if _STATE.stack else None


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(out, inputs, backward)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate (+=) into existing ``grad`` buffers, so summing two
    backward passes equals the backward of the summed loss.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.entries or not any(e.out is loss for e in tape.entries):
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.out), None)
        if g is None:
            continue
        for t, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not tape.tracks(t):
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi
        if entry.out.requires_grad:
            entry.out.grad = g if entry.out.grad is None else entry.out.grad + g
    for entry in tape.entries:
        for t in entry.inputs:
            if t.requires_grad and id(t) in grads:
                g = grads.pop(id(t))
                t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) dims must match exactly, no broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise DimensionError(f"matmul needs equal-rank >=2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), dtype=a.dtype)

    def back(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return ga, gb

    return _record(out, (a, b), back)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """Valid cross-correlation with a cubic kernel equal to the stride.

    Non-overlapping windows: each output voxel sees one k^3 block, so the
    op reduces to a block rearrangement plus one matrix product. Spatial
    extents shrink exactly by the stride.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv3d input must be [C,D,H,W], got {x.shape}")
    if weight.data.ndim != 5:
        raise DimensionError(f"conv3d weight must be [Cout,Cin,k,k,k], got {weight.shape}")
    c_out, c_in, k, k2, k3 = weight.shape
    if not (k == k2 == k3):
        raise DimensionError(f"conv3d kernel must be cubic, got {weight.shape[2:]}")
    if stride != k:
        raise DimensionError(f"only stride == kernel supported, got stride {stride}, kernel {k}")
    if x.shape[0] != c_in:
        raise DimensionError(f"conv3d channel mismatch: input {x.shape[0]}, weight {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv3d bias must be [{c_out}], got {bias.shape}")
    _, d, h, w = x.shape
    if d % k or h % k or w % k:
        raise DimensionError(f"spatial extents {(d, h, w)} not divisible by kernel {k}")
    do, ho, wo = d // k, h // k, w // k

    blocks = x.data.reshape(c_in, do, k, ho, k, wo, k)
    patches = blocks.transpose(1, 3, 5, 0, 2, 4, 6).reshape(do * ho * wo, c_in * k**3)
    wmat = weight.data.reshape(c_out, c_in * k**3)
    flat = patches @ wmat.T + bias.data
    out = Tensor(flat.reshape(do, ho, wo, c_out).transpose(3, 0, 1, 2), dtype=x.dtype)

    def back(g):
        gmat = g.transpose(1, 2, 3, 0).reshape(do * ho * wo, c_out)
        gw = (gmat.T @ patches).reshape(weight.shape)
        gb = gmat.sum(axis=0)
        gp = gmat @ wmat
        gx = (
            gp.reshape(do, ho, wo, c_in, k, k, k)
            .transpose(3, 0, 4, 1, 5, 2, 6)
            .reshape(c_in, d, h, w)
        )
        return gx, gw, gb

    return _record(out, (x, weight, bias), back)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, dtype=x.dtype)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm gain/shift must be [{d}]")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + shift.data, dtype=x.dtype)

    def back(g):
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gshift = g.reshape(-1, d).sum(axis=0)
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gshift

    return _record(out, (x, gain, shift), back)


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0), dtype=x.dtype)

    def back(g):
        return (g * mask,)

    return _record(out, (x,), back)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Tanh-form gelu: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    v = x.data
    u = _GELU_C * (v + _GELU_A * v**3)
    t = np.tanh(u)
    out = Tensor(0.5 * v * (1.0 + t), dtype=x.dtype)

    def back(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * du),)

    return _record(out, (x,), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the only broadcast allowed is a last-dim bias vector."""
    if a.shape == b.shape:
        out = Tensor(a.data + b.data, dtype=a.dtype)

        def back(g):
            return g, g

    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = Tensor(a.data + b.data, dtype=a.dtype)

        def back(g):
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    else:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _record(out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}")
    out = Tensor(a.data - b.data, dtype=a.dtype)

    def back(g):
        return g, -g

    return _record(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data, dtype=a.dtype)

    def back(g):
        return g * b.data, g * a.data

    return _record(out, (a, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c, dtype=x.dtype)

    def back(g):
        return (g * c,)

    return _record(out, (x,), back)


def abs_(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    s = np.sign(x.data)
    out = Tensor(np.abs(x.data), dtype=x.dtype)

    def back(g):
        return (g * s,)

    return _record(out, (x,), back)


def sum_(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), dtype=x.dtype)

    def back(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), back)


def mean_(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean(), dtype=x.dtype)

    def back(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _record(out, (x,), back)


def mean_axis0(x: Tensor) -> Tensor:
    """Mean over the leading axis (token pooling)."""
    if x.data.ndim < 1:
        raise DimensionError("mean_axis0 needs at least 1 axis")
    n = x.shape[0]
    out = Tensor(x.data.mean(axis=0), dtype=x.dtype)

    def back(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _record(out, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape), dtype=x.dtype)

    def back(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), back)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes), dtype=x.dtype)

    def back(g):
        return (g.transpose(inverse),)

    return _record(out, (x,), back)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack two token matrices [Ta,D] and [Tb,D] along axis 0."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows shape mismatch: {a.shape} ++ {b.shape}")
    ta = a.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0), dtype=a.dtype)

    def back(g):
        return g[:ta], g[ta:]

    return _record(out, (a, b), back)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    checked: int
    max_rel_err: float
    excluded: list[int] = field(default_factory=list)  # flat indices at kinks


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    h: float
    tol: float

    @property
    def max_rel_err(self) -> float:
        errs = [e.max_rel_err for e in self.entries if e.checked > len(e.excluded)]
        return max(errs, default=0.0)

    @property
    def excluded_total(self) -> int:
        return sum(len(e.excluded) for e in self.entries)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        lines = [
            f"{e.name}: checked {e.checked}, max rel err {e.max_rel_err:.3e}"
            + (f", excluded kinks {e.excluded}" if e.excluded else "")
            for e in self.entries
        ]
        lines.append(f"overall max rel err {self.max_rel_err:.3e} (tol {self.tol:g}): "
                     + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def finite_diff_check(
    f,
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_elements_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``f(params)`` against central differences.

    ``f`` must be deterministic and return a scalar Tensor. Parameters must be
    float64. Elements where one-sided derivatives disagree (a kink, e.g. relu
    probed exactly at 0) are flagged as excluded rather than failed.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"gradient check requires float64 params; {name!r} is {p.dtype}")
        p.zero_grad()

    tape = Tape()
    with tape:
        loss = f(params)
    backward(loss, tape)

    def eval_f() -> float:
        return float(f(params).data.reshape(()))

    rng = np.random.default_rng(seed)
    entries = []
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        analytic = analytic.reshape(-1)
        n = p.data.size
        if max_elements_per_param is not None and n > max_elements_per_param:
            idxs = np.sort(rng.choice(n, size=max_elements_per_param, replace=False))
        else:
            idxs = np.arange(n)
        max_err = 0.0
        excluded: list[int] = []
        for i in idxs:
            loc = np.unravel_index(int(i), p.data.shape)
            orig = p.data[loc]
            p.data[loc] = orig + h
            f_plus = eval_f()
            p.data[loc] = orig - h
            f_minus = eval_f()
            p.data[loc] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-5)
            if err > tol:
                # probe one-sided slopes: strong disagreement marks a kink
                f0 = eval_f()
                d_plus = (f_plus - f0) / h
                d_minus = (f0 - f_minus) / h
                if abs(d_plus - d_minus) > 0.1 * max(1.0, abs(d_plus), abs(d_minus)):
                    excluded.append(int(i))
                    continue
            max_err = max(max_err, err)
        entries.append(GradCheckEntry(name, int(len(idxs)), max_err, excluded))
    return GradCheckReport(entries, h=h, tol=tol)
