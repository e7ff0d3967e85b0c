"""A small layer-chain network engine with hand-written backward passes.

Only straight chains of layers are supported, which is all the sensing
heads need. Activations are batched: the leading axis of every tensor is
the batch axis. Measurement and pseudoinverse-decode layers own no
parameters; they read the measurement prefix handed to :func:`forward_pass`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import linalg
from .errors import DimensionError, NumericError, RangeError, StaleTapeError


class Parameters:
    """Named parameter tensors plus per-tensor freeze flags."""

    def __init__(self, tensors=None, frozen=()):
        self.tensors: dict[str, np.ndarray] = dict(tensors or {})
        self.frozen: set[str] = set(frozen)
        self.version = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def trainable(self) -> list[str]:
        return [k for k in self.tensors if k not in self.frozen]

    def freeze(self, names=None):
        self.frozen.update(self.tensors if names is None else names)

    def unfreeze(self, names=None):
        if names is None:
            self.frozen.clear()
        else:
            self.frozen.difference_update(names)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.tensors.items()}

    def load(self, tensors: dict[str, np.ndarray]):
        for k, v in tensors.items():
            if self.tensors[k].shape != v.shape:
                raise DimensionError(f"{k}: shape {v.shape} != {self.tensors[k].shape}")
            self.tensors[k][...] = v
        self.version += 1

    def count(self, include_frozen=True) -> int:
        return sum(v.size for k, v in self.tensors.items() if include_frozen or k not in self.frozen)


# ---------------------------------------------------------------- layers


class Layer:
    kind = "layer"
    trainable = True

    def __init__(self, name: str):
        self.name = name

    def param_shapes(self) -> dict[str, tuple]:
        return {}

    def init_params(self, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
        return {}

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x, p, ctx):
        raise NotImplementedError

    def backward(self, dout, cache, p, ctx):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Dense(Layer):
    kind = "fully-connected"

    def __init__(self, name, in_dim, out_dim, trainable=True):
        super().__init__(name)
        self.in_dim, self.out_dim, self.trainable = in_dim, out_dim, trainable

    def param_shapes(self):
        return {f"{self.name}.weight": (self.out_dim, self.in_dim), f"{self.name}.bias": (self.out_dim,)}

    def init_params(self, rng, dtype):
        return {
            f"{self.name}.weight": _he_normal(rng, (self.out_dim, self.in_dim), self.in_dim, dtype),
            f"{self.name}.bias": np.zeros(self.out_dim, dtype=dtype),
        }

    def out_shape(self, in_shape):
        if in_shape != (self.in_dim,):
            raise DimensionError(f"{self.name}: expected input ({self.in_dim},), got {in_shape}")
        return (self.out_dim,)

    def forward(self, x, p, ctx):
        W, b = p[f"{self.name}.weight"], p[f"{self.name}.bias"]
        return x @ W.T + b, x

    def backward(self, dout, x, p, ctx):
        W = p[f"{self.name}.weight"]
        grads = {f"{self.name}.weight": dout.T @ x, f"{self.name}.bias": dout.sum(axis=0)}
        return dout @ W, grads


class Conv2d(Layer):
    """Stride-1 convolution with zero "same" padding, NCHW layout."""

    kind = "conv2d"

    def __init__(self, name, in_ch, out_ch, k, trainable=True):
        super().__init__(name)
        self.in_ch, self.out_ch, self.k, self.trainable = in_ch, out_ch, k, trainable
        self.pad = ((k - 1) // 2, k // 2)

    def param_shapes(self):
        return {
            f"{self.name}.weight": (self.out_ch, self.in_ch, self.k, self.k),
            f"{self.name}.bias": (self.out_ch,),
        }

    def init_params(self, rng, dtype):
        fan_in = self.in_ch * self.k * self.k
        return {
            f"{self.name}.weight": _he_normal(rng, (self.out_ch, self.in_ch, self.k, self.k), fan_in, dtype),
            f"{self.name}.bias": np.zeros(self.out_ch, dtype=dtype),
        }

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise DimensionError(f"{self.name}: expected ({self.in_ch}, H, W), got {in_shape}")
        return (self.out_ch,) + tuple(in_shape[1:])

    def forward(self, x, p, ctx):
        W, b = p[f"{self.name}.weight"], p[f"{self.name}.bias"]
        B, C, H, Wd = x.shape
        lo, hi = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
        cols = sliding_window_view(xp, (self.k, self.k), axis=(2, 3))
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * Wd, C * self.k * self.k)
        out = cols @ W.reshape(self.out_ch, -1).T + b
        return out.reshape(B, H, Wd, self.out_ch).transpose(0, 3, 1, 2), (cols, x.shape)

    def backward(self, dout, cache, p, ctx):
        cols, (B, C, H, Wd) = cache
        W = p[f"{self.name}.weight"]
        k = self.k
        dmat = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        grads = {
            f"{self.name}.weight": (dmat.T @ cols).reshape(W.shape),
            f"{self.name}.bias": dmat.sum(axis=0),
        }
        dcols = (dmat @ W.reshape(self.out_ch, -1)).reshape(B, H, Wd, C, k, k)
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # B, C, k, k, H, W
        lo, hi = self.pad
        dxp = np.zeros((B, C, H + lo + hi, Wd + lo + hi), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + H, j:j + Wd] += dcols[:, :, i, j]
        return dxp[:, :, lo:lo + H, lo:lo + Wd], grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, p, ctx):
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask

    def backward(self, dout, mask, p, ctx):
        return dout * mask, {}


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; ties go to the first element."""

    kind = "max-pool"

    def out_shape(self, in_shape):
        C, H, W = in_shape
        if H % 2 or W % 2:
            raise DimensionError(f"{self.name}: spatial size {H}x{W} not even")
        return (C, H // 2, W // 2)

    def forward(self, x, p, ctx):
        B, C, H, W = x.shape
        win = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, dout, cache, p, ctx):
        idx, (B, C, H, W) = cache
        dwin = np.zeros(dout.shape + (4,), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dx = dwin.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return dx, {}


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, name, target_shape):
        super().__init__(name)
        self.target_shape = tuple(target_shape)

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.target_shape)):
            raise DimensionError(f"{self.name}: cannot reshape {in_shape} to {self.target_shape}")
        return self.target_shape

    def forward(self, x, p, ctx):
        return x.reshape((x.shape[0],) + self.target_shape), x.shape

    def backward(self, dout, shape, p, ctx):
        return dout.reshape(shape), {}


class Measurement(Layer):
    """``y = Phi_r x`` on flattened input, using the prefix in the context."""

    kind = "measurement"

    def __init__(self, name, n):
        super().__init__(name)
        self.n = n

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.n:
            raise DimensionError(f"{self.name}: input size {in_shape} != n={self.n}")
        return ("r",)

    def forward(self, x, p, ctx):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != ctx.phi.shape[1]:
            raise DimensionError(f"{self.name}: input size {flat.shape[1]} != n={ctx.phi.shape[1]}")
        return flat @ ctx.phi.T, (flat, x.shape)

    def backward(self, dout, cache, p, ctx):
        flat, shape = cache
        ctx.add_phi_grad(dout.T @ flat)
        return (dout @ ctx.phi).reshape(shape), {}


class PinvDecode(Layer):
    """Pseudo-image ``Psi_r y`` with ``Psi_r`` tied to the prefix pseudoinverse."""

    kind = "pinv-decode"

    def __init__(self, name, n):
        super().__init__(name)
        self.n = n

    def out_shape(self, in_shape):
        return (self.n,)

    def forward(self, x, p, ctx):
        return x @ ctx.psi.T, x

    def backward(self, dout, y, p, ctx):
        if ctx.want_phi_grad:
            grad_psi = dout.T @ y
            ctx.add_phi_grad(linalg.pinv_grad(ctx.phi, ctx.pinv, grad_psi))
        return dout @ ctx.psi, {}


# ---------------------------------------------------------------- network


class Network:
    """A layer chain with its parameters (everything except the measurement matrix)."""

    def __init__(self, layers, input_shape, params: Parameters | None = None, head: str = "custom", meta=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.head = head
        self.meta = dict(meta or {})
        self.output_shape = self._check_shapes()
        self.params = params if params is not None else Parameters()

    def _check_shapes(self):
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def init(self, rng: np.random.Generator, dtype=np.float32) -> "Network":
        tensors, frozen = {}, set()
        for layer in self.layers:
            ps = layer.init_params(rng, dtype)
            tensors.update(ps)
            if not layer.trainable:
                frozen.update(ps)
        self.params = Parameters(tensors, frozen)
        return self

    @property
    def uses_measurement(self) -> bool:
        return any(isinstance(l, Measurement) for l in self.layers)

    @property
    def dtype(self):
        for v in self.params.tensors.values():
            return v.dtype
        return np.dtype(getattr(self, "_dtype", np.float32))

    def astype(self, dtype) -> "Network":
        clone = copy.copy(self)
        clone.params = Parameters({k: v.astype(dtype) for k, v in self.params.tensors.items()},
                                  self.params.frozen)
        clone._dtype = np.dtype(dtype)
        return clone

    def copy(self) -> "Network":
        return self.astype(self.dtype)


class _SensingContext:
    def __init__(self, phi, want_phi_grad):
        self.phi = phi
        self.want_phi_grad = want_phi_grad
        self._pinv = None
        self._psi = None
        self.grad_phi = None

    @property
    def pinv(self) -> linalg.PinvState:
        if self._pinv is None:
            self._pinv = linalg.pinv_rows(self.phi)
        return self._pinv

    @property
    def psi(self):
        if self._psi is None:
            self._psi = self.pinv.psi.astype(self.phi.dtype, copy=False)
        return self._psi

    def add_phi_grad(self, g):
        g = g.astype(self.phi.dtype, copy=False)
        self.grad_phi = g if self.grad_phi is None else self.grad_phi + g


@dataclass
class Tape:
    version: int
    caches: list
    ctx: _SensingContext | None
    used: bool = field(default=False)
    params_id: int = 0


def forward_pass(model: Network, phi, x):
    """Run ``x`` through the chain; return the output and a tape for backward."""
    x = np.asarray(x)
    if x.shape[1:] != model.input_shape:
        raise DimensionError(f"input shape {x.shape[1:]} != model input {model.input_shape}")
    ctx = None
    if model.uses_measurement:
        if phi is None:
            raise DimensionError("model has a measurement layer but no measurement prefix was given")
        phi = np.asarray(phi)
        if phi.ndim != 2 or phi.shape[0] < 1:
            raise RangeError(f"measurement prefix must be a non-empty (r, n) matrix, got {phi.shape}")
        ctx = _SensingContext(phi.astype(model.dtype, copy=False), want_phi_grad=True)
    p = model.params.tensors
    caches = []
    out = x.astype(model.dtype, copy=False)
    for layer in model.layers:
        # overflow is reported below, naming the layer
        with np.errstate(over="ignore", invalid="ignore"):
            out, cache = layer.forward(out, p, ctx)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite activation in layer {layer.name!r}")
        caches.append(cache)
    return out, Tape(model.params.version, caches, ctx, params_id=id(model.params))


def backward_pass(model: Network, tape: Tape, output_grad, phi_grad: bool = True) -> dict[str, np.ndarray]:
    """Gradients for every unfrozen parameter, plus ``"phi"`` when requested."""
    if tape.version != model.params.version or tape.params_id != id(model.params):
        raise StaleTapeError("parameters changed since the forward pass")
    if tape.used:
        raise StaleTapeError("tape already consumed by a backward pass")
    tape.used = True
    ctx = tape.ctx
    if ctx is not None:
        ctx.want_phi_grad = phi_grad
    p = model.params.tensors
    grads: dict[str, np.ndarray] = {}
    d = np.asarray(output_grad, dtype=model.dtype)
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        d, g = layer.backward(d, tape.caches[idx], p, ctx)
        for name, value in g.items():
            if name not in model.params.frozen:
                grads[name] = value
    if phi_grad and ctx is not None and ctx.grad_phi is not None:
        grads["phi"] = ctx.grad_phi
    return grads


# ---------------------------------------------------------------- losses


def euclidean_loss(pred, target):
    """Mean squared error over batch and elements, with its gradient."""
    pred = np.asarray(pred)
    target = np.asarray(target).reshape(pred.shape) if np.size(target) == pred.size else np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target.astype(pred.dtype, copy=False)
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits, labels):
    """Softmax cross-entropy averaged over the batch.

    ``logits`` is (B, C) or (C,); ``labels`` holds integer class indices.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    C = logits.shape[1]
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    if np.any((labels < 0) | (labels >= C)):
        raise RangeError(f"label outside [0, {C})")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.shape[0])
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    grad = (grad / labels.shape[0]).astype(logits.dtype)
    return loss, grad[0] if single else grad


LOSSES: dict[str, Callable] = {"euclidean": euclidean_loss, "cross-entropy": cross_entropy_loss}


# ---------------------------------------------------------------- optimizer


class AdamState:
    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def reset(self):
        self.m.clear()
        self.v.clear()
        self.t = 0


def adam_step(params: Parameters, grads: dict, state: AdamState):
    """One bias-corrected Adam update, in place. Frozen tensors are skipped."""
    names = params.trainable()
    missing = [k for k in names if k not in grads]
    if missing:
        raise KeyError(f"no gradient for unfrozen tensors {missing}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for k in names:
        p, g = params.tensors[k], grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"{k}: gradient {g.shape} vs parameter {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)).astype(p.dtype, copy=False)
    params.version += 1


# ---------------------------------------------------------------- gradient check


def grad_check(model: Network, phi, x, target, loss="euclidean", h=1e-5, include_phi=True) -> float:
    """Max relative error between backprop and central finite differences.

    Runs in float64 on a copy; every unfrozen parameter (and every entry of
    ``phi`` when ``include_phi``) is perturbed.
    """
    loss_fn = LOSSES[loss] if isinstance(loss, str) else loss
    m64 = model.astype(np.float64)
    phi64 = None if phi is None else np.array(phi, dtype=np.float64)
    x64 = np.asarray(x, dtype=np.float64)

    def f():
        out, _ = forward_pass(m64, phi64, x64)
        return loss_fn(out, target)[0]

    out, tape = forward_pass(m64, phi64, x64)
    _, dout = loss_fn(out, target)
    grads = backward_pass(m64, tape, dout, phi_grad=include_phi and phi64 is not None)

    targets = [(m64.params.tensors[k], grads[k]) for k in m64.params.trainable()]
    if include_phi and phi64 is not None:
        targets.append((phi64, grads["phi"]))
    worst = 0.0
    for arr, g in targets:
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(gflat[i] - fd) / max(abs(fd), 1e-8))
    return worst
