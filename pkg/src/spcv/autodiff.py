"""Small reverse-mode autodiff over numpy arrays.

Only what the grid generator and the geometric regularizers need: elementwise
arithmetic with broadcasting, sine/sqrt, slicing, gathers along an axis,
reductions, 2D convolution and an escape hatch for scalar losses whose gradient
is computed elsewhere (point-set distances).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class TapeConsumedError(RuntimeError):
    """Raised when backward is run twice over the same recorded graph."""


class NonFiniteError(FloatingPointError):
    """Raised when an op or an optimizer step sees NaN/Inf."""


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents, op, backward):
        out = Tensor(_check_finite(np.asarray(data, dtype=np.float64), op), _parents=parents, _op=op)
        if out.requires_grad:
            out._backward = backward
        return out

    # -- elementwise ----------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), "add", backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), "neg", lambda g: self._accumulate(-g))

    def __sub__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(-g, other.shape))

        return Tensor._make(self.data - other.data, (self, other), "sub", backward)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), "mul", backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * out_data / other.data, other.shape))

        return Tensor._make(out_data, (self, other), "div", backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")

        def backward(g):
            self._accumulate(g * p * self.data ** (p - 1))

        return Tensor._make(self.data**p, (self,), f"pow{p}", backward)

    def square(self):
        return Tensor._make(self.data * self.data, (self,), "square",
                            lambda g: self._accumulate(2.0 * g * self.data))

    def sin(self):
        return Tensor._make(np.sin(self.data), (self,), "sin",
                            lambda g: self._accumulate(g * np.cos(self.data)))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor._make(out_data, (self,), "sqrt",
                            lambda g: self._accumulate(g * 0.5 / out_data))

    # -- shape ------------------------------------------------------------------------

    def reshape(self, *shape):
        orig = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), "reshape",
                            lambda g: self._accumulate(g.reshape(orig)))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(*axes), (self,), "transpose",
                            lambda g: self._accumulate(g.transpose(*inv)))

    def __getitem__(self, idx):
        def backward(g):
            full = np.zeros_like(self.data)
            full[idx] = g
            self._accumulate(full)

        return Tensor._make(self.data[idx], (self,), "getitem", backward)

    def take(self, indices: np.ndarray, axis: int):
        """Gather along ``axis``; repeated indices accumulate gradient."""
        indices = np.asarray(indices, dtype=np.intp)
        n = self.shape[axis]
        # short axes (padding, grid differences): a one-hot matmul beats ufunc.at
        select = None
        if len(indices) * n <= 1 << 16:
            select = np.zeros((len(indices), n))
            select[np.arange(len(indices)), indices] = 1.0

        def backward(g):
            if select is not None:
                self._accumulate(np.moveaxis(np.moveaxis(g, axis, -1) @ select, -1, axis))
                return
            full = np.zeros(np.moveaxis(self.data, axis, 0).shape)
            np.add.at(full, indices, np.moveaxis(g, axis, 0))
            self._accumulate(np.moveaxis(full, 0, axis))

        return Tensor._make(np.take(self.data, indices, axis=axis), (self,), "take", backward)

    # -- reductions -------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- backprop ---------------------------------------------------------------------

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def release_graph(self) -> None:
        """Drop parent links and closures below this node so intermediates can be freed."""
        stack = [self]
        while stack:
            node = stack.pop()
            stack.extend(node._parents)
            node._parents = ()
            node._backward = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), "stack", backward)


def cross(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    """Cross product of 3-vectors laid out along ``axis``."""
    def comp(t, i):
        return t[(slice(None),) * axis + (i,)]

    ax, ay, az = comp(a, 0), comp(a, 1), comp(a, 2)
    bx, by, bz = comp(b, 0), comp(b, 1), comp(b, 2)
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=axis)


def external_scalar(x: Tensor, value: float, grad_x: np.ndarray) -> Tensor:
    """A scalar loss of ``x`` whose value and gradient were computed outside the engine."""
    grad_x = np.asarray(grad_x, dtype=np.float64)
    if grad_x.shape != x.shape:
        raise ValueError(f"gradient shape {grad_x.shape} does not match input {x.shape}")
    _check_finite(grad_x, "external gradient")
    return Tensor._make(np.float64(value), (x,), "external",
                        lambda g: x._accumulate(g * grad_x))


def reflect_indices(n: int, pad: int) -> np.ndarray:
    """Index map of numpy's 'reflect' padding (edge not repeated)."""
    if pad >= n:
        raise ValueError(f"reflection pad {pad} needs extent > {pad}, got {n}")
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)
    over = idx > n - 1
    idx[over] = 2 * (n - 1) - idx[over]
    return idx


def pad_reflect(x: Tensor, pad: int) -> Tensor:
    """Reflection padding of the two trailing (spatial) axes."""
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    return x.take(reflect_indices(h, pad), axis=x.ndim - 2).take(reflect_indices(w, pad), axis=x.ndim - 1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid cross-correlation of a C×H×W input with an O×C×k×k kernel."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ValueError(f"conv2d expects C×H×W input and O×C×k×k kernel, got {x.shape}, {weight.shape}")
    c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"kernel expects {ci} input channels, input has {c}")
    ho, wo = h - kh + 1, w - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}×{kw} larger than input {h}×{w}")

    # Shifted-view formulation: with the input flattened to C×(H·W), tap (i, j) of the
    # kernel reads the contiguous window starting at offset i·W + j. Rows of length W
    # are produced, of which the last kw-1 columns are junk and dropped.
    xf = x.data.reshape(c, h * w)
    span = (ho - 1) * w + wo
    taps = [(i, j, i * w + j) for i in range(kh) for j in range(kw)]
    wt = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))
    full = np.zeros((o, ho * w))
    acc = full[:, :span]
    for i, j, off in taps:
        acc += wt[i, j] @ xf[:, off:off + span]
    out = full.reshape(o, ho, w)[:, :, :wo]
    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gfull = np.zeros((o, ho, w))
        gfull[:, :, :wo] = g
        gspan = gfull.reshape(o, ho * w)[:, :span]
        if weight.requires_grad:
            gw = np.empty((kh, kw, o, c))
            for i, j, off in taps:
                gw[i, j] = gspan @ xf[:, off:off + span].T
            weight._accumulate(gw.transpose(2, 3, 0, 1))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            gx = np.zeros((c, h * w))
            for i, j, off in taps:
                gx[:, off:off + span] += wt[i, j].T @ gspan
            x._accumulate(gx.reshape(c, h, w))

    return Tensor._make(out, parents, "conv2d", backward)


# ---------------------------------------------------------------------------------------
# Generator network


ACTIVATIONS = ("sine", "linear")


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    activation: str = "sine"
    frequency: float = 1.0


@dataclass
class GeneratorParams:
    layers: list[ConvLayer]

    def __post_init__(self):
        prev = 3
        for i, layer in enumerate(self.layers):
            o, c, kh, kw = layer.weight.shape
            if c != prev:
                raise ValueError(f"layer {i} expects {c} input channels, previous layer gives {prev}")
            if kh != kw or kh % 2 == 0:
                raise ValueError(f"layer {i} kernel must be odd and square, got {kh}×{kw}")
            if layer.bias.shape != (o,):
                raise ValueError(f"layer {i} bias shape {layer.bias.shape} != ({o},)")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            prev = o
        if prev != 3:
            raise ValueError(f"last layer must output 3 channels, got {prev}")

    def tensors(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def state_arrays(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.tensors()]


def init_generator(num_layers: int = 6, hidden: int = 128, kernel: int = 3,
                   activation: str = "sine", frequency: float = 1.0,
                   zero_last: bool = True, seed: int = 0,
                   first_frequency: float | None = None) -> GeneratorParams:
    """Uniform fan-in init; the last layer is linear and zero by default.

    ``first_frequency`` scales the first sine layer only (defaults to ``frequency``).
    """
    if num_layers < 1:
        raise ValueError("need at least one layer")
    rng = np.random.default_rng(seed)
    widths = [3] + [hidden] * (num_layers - 1) + [3]
    layers = []
    for i in range(num_layers):
        cin, cout = widths[i], widths[i + 1]
        last = i == num_layers - 1
        bound = 1.0 / math.sqrt(cin * kernel * kernel)
        if last and zero_last:
            w = np.zeros((cout, cin, kernel, kernel))
            b = np.zeros(cout)
        else:
            w = rng.uniform(-bound, bound, size=(cout, cin, kernel, kernel))
            b = rng.uniform(-bound, bound, size=cout)
        freq = first_frequency if (i == 0 and first_frequency is not None) else frequency
        layers.append(ConvLayer(parameter(w), parameter(b),
                                "linear" if last else activation, freq))
    return GeneratorParams(layers)


@dataclass
class Tape:
    """Recorded forward pass; backward may run once."""
    output: Tensor
    inputs: list[Tensor]
    consumed: bool = False


def forward_generator(params: GeneratorParams, grid: Tensor | np.ndarray,
                      input_grad: bool = False) -> tuple[Tensor, Tape]:
    x = Tensor(np.asarray(grid.data if isinstance(grid, Tensor) else grid, dtype=np.float64),
               requires_grad=input_grad)
    if x.ndim != 3 or x.shape[0] != params.layers[0].weight.shape[1]:
        raise ValueError(f"generator input must be {params.layers[0].weight.shape[1]}×U×V, got {x.shape}")
    h = x
    for layer in params.layers:
        pad = layer.weight.shape[-1] // 2
        h = conv2d(pad_reflect(h, pad), layer.weight, layer.bias)
        if layer.activation == "sine":
            h = (h * layer.frequency).sin() if layer.frequency != 1.0 else h.sin()
    return h, Tape(h, [x])


def backward(tape: Tape, loss_gradient: np.ndarray | Tensor | None = None) -> None:
    """Backpropagate through a recorded tape.

    ``loss_gradient`` is either an array shaped like the tape output, or a scalar
    loss Tensor built on top of the output (then its graph is walked instead).
    """
    if tape.consumed:
        raise TapeConsumedError("tape already consumed by a previous backward pass")
    if isinstance(loss_gradient, Tensor):
        loss_gradient.backward()
        loss_gradient.release_graph()
    else:
        g = np.zeros(tape.output.shape) if loss_gradient is None else np.asarray(loss_gradient, dtype=np.float64)
        tape.output.backward(g)
        tape.output.release_graph()
    tape.consumed = True


# ---------------------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    grads = [np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
             for p, g in zip(params, grads)]
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter of shape {p.shape} "
                                 f"at Adam step {state.step + 1}")
    state.step += 1
    lr = state.lr if lr is None else lr
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    per_input: list[float]


def gradient_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
                   tol: float = 1e-4, floor: float = 1e-8) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn`` to central differences.

    Relative error per input is ``max|g_ad - g_fd| / max(max|g_fd|, floor)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [parameter(a) for a in arrays]
    out = fn(*leaves)
    out.backward()
    errors = []
    for k, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*[Tensor(x) for x in arrays]).data
            flat[i] = orig - h
            fm = fn(*[Tensor(x) for x in arrays]).data
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * h)
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(a)
        scale = max(np.max(np.abs(numeric)), floor)
        errors.append(float(np.max(np.abs(analytic - numeric)) / scale))
    worst = max(errors) if errors else 0.0
    return GradCheckReport(worst, tol, worst <= tol, errors)
