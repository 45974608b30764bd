"""Tape-based reverse-mode differentiation for the trainable parts of the network.

Only the handful of primitives the model needs are provided.  A ``Tape``
records each primitive together with a closure mapping the output gradient
to input gradients; ``Tape.backward`` replays the records in reverse order
and accumulates into the ``Parameter`` objects that were watched.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import io as mio
from .tensor import bilinear_matrix

MIAC_MAGIC = b"MIAC"


class Parameter:
    """A learnable tensor with its accumulated gradient."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Var:
    """A value produced on a tape."""

    __slots__ = ("value", "grad", "requires_grad", "param")

    def __init__(self, value, requires_grad: bool = False, param: Parameter | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


Operand = Var | Parameter | np.ndarray | float


class Tape:
    """Ordered record of primitive operations.

    With ``record=False`` no closures are stored and ``backward`` is not
    available; this is the inference mode.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._records: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self._watched: dict[int, Var] = {}
        self._consumed = False

    def var(self, x: Operand) -> Var:
        if isinstance(x, Var):
            return x
        if isinstance(x, Parameter):
            node = self._watched.get(id(x))
            if node is None:
                node = Var(x.value, requires_grad=self.record, param=x)
                self._watched[id(x)] = node
            return node
        return Var(x)

    def push(self, value: np.ndarray, parents: Sequence[Var], backward: Callable) -> Var:
        needs = self.record and any(p.requires_grad for p in parents)
        out = Var(value, requires_grad=needs)
        if needs:
            self._records.append((out, tuple(parents), backward))
        return out

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Var) -> None:
        """Accumulate d(loss)/d(param) into every watched parameter's ``grad``."""
        if not self.record:
            raise RuntimeError("tape was created with record=False")
        if self._consumed:
            raise RuntimeError("backward already ran on this tape; run a new forward")
        if loss.value.size != 1:
            raise ValueError("backward needs a scalar loss")
        self._consumed = True
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for out, parents, fn in reversed(self._records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for parent, g in zip(parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in self._watched.values():
            if node.grad is not None:
                node.param.grad += node.grad


# ---------------------------------------------------------------- primitives


def linear(tape: Tape, x: Operand, W: Operand, b: Operand) -> Var:
    """``y = x W^T + b`` for ``x`` of shape ``[n, in]`` or ``[in]``."""
    x, W, b = tape.var(x), tape.var(W), tape.var(b)
    if x.shape[-1] != W.shape[1] or W.shape[0] != b.shape[0]:
        raise ValueError(f"linear shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    xv, Wv = x.value, W.value
    y = xv @ Wv.T + b.value

    def backward(g):
        g2 = np.atleast_2d(g)
        x2 = np.atleast_2d(xv)
        return (g @ Wv, g2.T @ x2, g2.sum(axis=0))

    return tape.push(y, (x, W, b), backward)


def _im2col(xp: np.ndarray, stride: int, oh: int, ow: int) -> np.ndarray:
    cin = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    return win.transpose(0, 3, 4, 1, 2).reshape(cin * 9, oh * ow)


def conv3x3(tape: Tape, x: Operand, W: Operand, b: Operand, stride: int = 1) -> Var:
    """Zero-padded 3x3 convolution; output is ``ceil(h/stride) x ceil(w/stride)``."""
    if stride not in (1, 2):
        raise ValueError(f"invalid stride {stride}")
    x, W, b = tape.var(x), tape.var(W), tape.var(b)
    cin, h, w = x.shape
    cout = W.shape[0]
    if W.shape != (cout, cin, 3, 3) or b.shape != (cout,):
        raise ValueError(f"conv shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    oh, ow = -(-h // stride), -(-w // stride)
    xp = np.pad(x.value, ((0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, stride, oh, ow)
    wmat = W.value.reshape(cout, cin * 9)
    y = (wmat @ cols + b.value[:, None]).reshape(cout, oh, ow)

    def backward(g):
        g2 = g.reshape(cout, oh * ow)
        dW = (g2 @ cols.T).reshape(W.shape)
        db = g2.sum(axis=1)
        dx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, 3, 3, oh, ow)
            dxp = np.zeros_like(xp)
            for ki in range(3):
                for kj in range(3):
                    dxp[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += dcols[:, ki, kj]
            dx = dxp[:, 1:-1, 1:-1]
        return (dx, dW, db)

    return tape.push(y, (x, W, b), backward)


def relu(tape: Tape, x: Operand) -> Var:
    x = tape.var(x)
    on = x.value > 0
    # np.maximum keeps NaN visible to callers that watch for divergence
    return tape.push(np.maximum(x.value, 0.0), (x,), lambda g: (g * on,))


def add(tape: Tape, a: Operand, b: Operand) -> Var:
    a, b = tape.var(a), tape.var(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return tape.push(a.value + b.value, (a, b), lambda g: (g, g))


def scale(tape: Tape, x: Operand, k: float) -> Var:
    x = tape.var(x)
    return tape.push(x.value * k, (x,), lambda g: (g * k,))


def total(tape: Tape, terms: Iterable[Operand]) -> Var:
    """Sum of scalar terms."""
    nodes = [tape.var(t) for t in terms]
    value = np.asarray(sum(float(n.value) for n in nodes))
    return tape.push(value, nodes, lambda g: tuple(g for _ in nodes))


def concat(tape: Tape, parts: Sequence[Operand], axis: int = 0) -> Var:
    nodes = [tape.var(p) for p in parts]
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)
    y = np.concatenate([n.value for n in nodes], axis=axis)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(nodes))
        )

    return tape.push(y, nodes, backward)


def reshape(tape: Tape, x: Operand, shape: tuple[int, ...]) -> Var:
    x = tape.var(x)
    old = x.shape
    return tape.push(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def to_rows(tape: Tape, x: Operand) -> Var:
    """``[c, h, w]`` -> ``[h*w, c]`` with row-major spatial order."""
    x = tape.var(x)
    c, h, w = x.shape
    y = x.value.reshape(c, h * w).T
    return tape.push(y, (x,), lambda g: (g.T.reshape(c, h, w),))


def take_rows(tape: Tape, x: Operand, idx: Sequence[int]) -> Var:
    x = tape.var(x)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        dx = np.zeros_like(x.value)
        np.add.at(dx, idx, g)
        return (dx,)

    return tape.push(x.value[idx], (x,), backward)


def mean_rows(tape: Tape, x: Operand) -> Var:
    x = tape.var(x)
    n = x.shape[0]
    return tape.push(
        x.value.mean(axis=0), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),)
    )


def stop_gradient(tape: Tape, x: Operand) -> Var:
    return Var(tape.var(x).value)


def resize(tape: Tape, x: Operand, out_h: int, out_w: int) -> Var:
    """Differentiable bilinear resize of ``[c, h, w]``."""
    x = tape.var(x)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    rh = bilinear_matrix(h, out_h)
    rw = bilinear_matrix(w, out_w)
    return tape.push(rh @ x.value @ rw.T, (x,), lambda g: (rh.T @ g @ rw,))


def expand(tape: Tape, v: Operand, h: int, w: int) -> Var:
    """Tile a ``[c]`` vector to ``[c, h, w]``."""
    v = tape.var(v)
    c = v.shape[0]
    y = np.broadcast_to(v.value[:, None, None], (c, h, w)).copy()
    return tape.push(y, (v,), lambda g: (g.sum(axis=(1, 2)),))


def l2(tape: Tape, a: Operand, b: Operand) -> Var:
    a, b = tape.var(a), tape.var(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    diff = a.value - b.value
    d = float(np.sqrt(np.sum(diff * diff)))

    def backward(g):
        unit = diff / d if d > 0 else np.zeros_like(diff)
        return (g * unit, -g * unit)

    return tape.push(np.asarray(d), (a, b), backward)


def cosine_distance(tape: Tape, a: Operand, b: Operand, eps: float = 1e-8) -> Var:
    """``1 - cos(a, b)``."""
    a, b = tape.var(a), tape.var(b)
    av, bv = a.value, b.value
    na, nb = float(np.linalg.norm(av)), float(np.linalg.norm(bv))
    denom = na * nb + eps
    dot = float(av @ bv)
    y = 1.0 - dot / denom

    def backward(g):
        # d(dot/denom) with denom = |a||b| + eps
        ga = bv / denom - dot * nb * (av / max(na, 1e-300)) / denom**2
        gb = av / denom - dot * na * (bv / max(nb, 1e-300)) / denom**2
        return (-g * ga, -g * gb)

    return tape.push(np.asarray(y), (a, b), backward)


def cross_entropy_2class(tape: Tape, logits: Operand, target: np.ndarray) -> Var:
    """Mean over pixels of ``-log softmax(logits)[target]``."""
    logits = tape.var(logits)
    target = np.asarray(target)
    if logits.shape[0] != 2 or logits.shape[1:] != target.shape:
        raise ValueError(f"size mismatch: logits {logits.shape} vs target {target.shape}")
    z = logits.value
    m = z.max(axis=0)
    e = np.exp(z - m)
    s = e.sum(axis=0)
    lse = m + np.log(s)
    onehot = np.stack([target == 0, target == 1]).astype(np.float64)
    picked = (z * onehot).sum(axis=0)
    n = target.size
    loss = float((lse - picked).sum() / n)
    prob = e / s

    return tape.push(np.asarray(loss), (logits,), lambda g: (g * (prob - onehot) / n,))


# ------------------------------------------------------------- initialisation


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform in ``[-a, a]``, ``a = sqrt(6 / fan_in)``, rounded to float32 values.

    Rounding keeps a freshly initialised model identical to its checkpoint.
    """
    a = math.sqrt(6.0 / fan_in)
    return rng.uniform(-a, a, size=shape).astype(np.float32).astype(np.float64)


def linear_params(rng: np.random.Generator, name: str, n_in: int, n_out: int) -> list[Parameter]:
    return [
        Parameter(f"{name}.weight", init_uniform(rng, (n_out, n_in), n_in)),
        Parameter(f"{name}.bias", np.zeros(n_out)),
    ]


def conv_params(rng: np.random.Generator, name: str, cin: int, cout: int) -> list[Parameter]:
    return [
        Parameter(f"{name}.weight", init_uniform(rng, (cout, cin, 3, 3), cin * 9)),
        Parameter(f"{name}.bias", np.zeros(cout)),
    ]


# ------------------------------------------------------------------ optimiser


@dataclass
class SgdConfig:
    learning_rate: float = 5e-3
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def sgd_step(params: Iterable[Parameter], cfg: SgdConfig, lr: float | None = None) -> None:
    """Momentum SGD update, then zero the gradients.

    ``lr`` overrides ``cfg.learning_rate`` (``lr=0`` leaves values unchanged).
    """
    rate = cfg.learning_rate if lr is None else lr
    for p in params:
        g = p.grad
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.value
        p.velocity = cfg.momentum * p.velocity + g
        if rate:
            p.value = p.value - rate * p.velocity
        p.zero_grad()


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    rtol: float
    failures: list[str] = field(default_factory=list)
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAILED: " + ", ".join(self.failures)
        return f"grad_check max_rel_error={self.max_rel_error:.3e} over {self.checked} elements ({status})"


def grad_check(
    fn: Callable[[Tape], Var],
    params: Sequence[Parameter],
    h: float = 1e-5,
    rtol: float = 1e-4,
    floor: float = 1e-6,
    max_elements: int = 10_000,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``fn`` builds the scalar loss on the tape it is given.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.  Parameters larger than
    ``max_elements`` are checked on a seeded random subsample.
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(fn(tape))
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, checked=0, rtol=rtol)
    for p in params:
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = fn(Tape(record=False)).item()
            flat[i] = orig - h
            down = fn(Tape(record=False)).item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            ana = analytic[p.name].reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
        report.checked += len(idx)
        report.per_param[p.name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
        if worst > rtol:
            report.failures.append(p.name)
    return report


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(path: str | Path, params: Sequence[Parameter]) -> None:
    with open(path, "wb") as fh:
        fh.write(MIAC_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            mio.write_miat(fh, p.value)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != MIAC_MAGIC:
            raise mio.FormatError(f"{path}: bad checkpoint magic")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", fh.read(2))
            name = fh.read(n).decode("utf-8")
            out[name] = mio.read_miat(fh)
        return out
