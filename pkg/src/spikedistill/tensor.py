"""Minimal dense-tensor autodiff over a dynamically recorded tape.

Tensors wrap numpy arrays (row-major). Operations executed while a Tape is
active are recorded in execution order; ``backward`` replays the records in
reverse, accumulating gradients. Custom backward rules (e.g. the spike
surrogate) plug in as ordinary records.

No implicit broadcasting except scalar-times-tensor; every op validates its
shape rule and raises ShapeError otherwise.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's shape rule."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


class TapeError(RuntimeError):
    """Raised on invalid tape usage (backward off-tape, double backward)."""


class Tensor:
    """Dense n-d array with an optional gradient buffer.

    ``requires_grad`` marks leaves (parameters) and propagates through ops.
    ``grad`` is allocated lazily during backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_idx", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype.kind not in "fiu":
            raise TypeError(f"tensor data must be numeric, got {arr.dtype}")
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._idx = -1
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Value copy with no tape reference and no grad requirement."""
        return Tensor(self.data.copy())

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype}{tag})"


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations for one forward pass.

    Single-writer: a tape and the tensors recorded on it belong to one
    logical thread. A tape is consumed by backward and cannot be reused.
    """

    _active = None

    def __init__(self):
        self.records = []
        self.consumed = False
        self.generation = 0

    def __enter__(self):
        if Tape._active is not None:
            raise TapeError("nested tapes are not supported")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    @staticmethod
    def active():
        return Tape._active

    def record(self, out, inputs, backward_fn):
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        out._tape = self
        out._idx = len(self.records)
        self.records.append(_Record(out, inputs, backward_fn))

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf."""
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward")
        if loss._tape is not self:
            raise TapeError("loss tensor was not produced on this tape")
        if loss.data.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records[: loss._idx + 1]):
            if rec.out.grad is None:
                continue
            rec.backward_fn(rec.out.grad)
        self.consumed = True
        self.generation += 1


def _wants_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _result(data, inputs, backward_fn, requires_grad):
    out = Tensor(data, requires_grad=requires_grad)
    tape = Tape.active()
    if tape is not None and requires_grad:
        tape.record(out, inputs, backward_fn)
    return out


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name}: non-finite values in input")


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _result(a.data + b.data, (a, b), bwd, _wants_grad(a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _result(a.data - b.data, (a, b), bwd, _wants_grad(a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _result(a.data * b.data, (a, b), bwd, _wants_grad(a, b))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _result(a.data * s, (a,), bwd, a.requires_grad)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(d) for d in shape)
    old = a.shape

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old))

    return _result(a.data.reshape(shape), (a,), bwd, a.requires_grad)


def take_front(a: Tensor, k: int) -> Tensor:
    """First k slices along axis 0."""
    if not 1 <= k <= a.shape[0]:
        raise ShapeError("take_front", a.shape, (k,))

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:k] = g
            a.accumulate_grad(full)

    return _result(a.data[:k].copy(), (a,), bwd, a.requires_grad)


def tile_front(a: Tensor, k: int) -> Tensor:
    """Stack k copies of `a` along a flattened leading axis: [k*N, ...]."""
    if k < 1:
        raise ShapeError("tile_front", a.shape, (k,))
    out = np.broadcast_to(a.data, (k,) + a.shape).reshape((k * a.shape[0],) + a.shape[1:])

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape((k,) + a.shape).sum(axis=0))

    return _result(out.copy(), (a,), bwd, a.requires_grad)


def mean_front(a: Tensor, over: int) -> Tensor:
    """Arithmetic mean of the first `over` slices along axis 0."""
    if not 1 <= over <= a.shape[0]:
        raise ShapeError("mean_front", a.shape, (over,))
    inv = 1.0 / over

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:over] = g * inv
            a.accumulate_grad(full)

    return _result(a.data[:over].mean(axis=0), (a,), bwd, a.requires_grad)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g)))

    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bwd, a.requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bwd, _wants_grad(a, b))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x [N,K] @ w [K,M] + bias [M] broadcast over rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeError("linear.bias", b.shape, (w.shape[1],))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T)
        if w.requires_grad:
            w.accumulate_grad(x.data.T @ g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))

    return _result(x.data @ w.data + b.data, (x, w, b), bwd, _wants_grad(x, w, b))


# ---------------------------------------------------------------------------
# conv / pool / norm


def _im2col3x3(xp_nhwc, H, W):
    # padded channels-last input [N, H+2, W+2, C] -> cols [N*H*W, 9*C];
    # slice-wise assembly keeps every copy contiguous in the channel axis
    N, _, _, C = xp_nhwc.shape
    cols6 = np.empty((N, H, W, 3, 3, C), dtype=xp_nhwc.dtype)
    for di in range(3):
        for dj in range(3):
            cols6[:, :, :, di, dj, :] = xp_nhwc[:, di : di + H, dj : dj + W, :]
    return cols6.reshape(N * H * W, 9 * C)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1; spatial dims preserved.

    Interface layout is [N,C,H,W] / weights [Cout,Cin,3,3]; internally the
    GEMM runs channels-last.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", x.shape, w.shape)
    N, C, H, W = x.shape
    Cout, Cin, kh, kw = w.shape
    if Cin != C or (kh, kw) != (3, 3):
        raise ShapeError("conv2d", x.shape, w.shape)
    if b.shape != (Cout,):
        raise ShapeError("conv2d.bias", b.shape, (Cout,))

    xp = np.zeros((N, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x.data.transpose(0, 2, 3, 1)
    cols = _im2col3x3(xp, H, W)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(9 * C, Cout)  # (di, dj, cin) -> cout
    flat = cols @ wmat + b.data
    out = flat.reshape(N, H, W, Cout).transpose(0, 3, 1, 2).copy()

    def bwd(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(N * H * W, Cout)
        if b.requires_grad:
            b.accumulate_grad(gflat.sum(axis=0))
        if w.requires_grad:
            gw = (cols.T @ gflat).reshape(3, 3, C, Cout)
            w.accumulate_grad(gw.transpose(3, 2, 0, 1))
        if x.requires_grad:
            gcols = (gflat @ wmat.T).reshape(N, H, W, 3, 3, C)
            gxp = np.zeros((N, H + 2, W + 2, C), dtype=x.dtype)
            for di in range(3):
                for dj in range(3):
                    gxp[:, di : di + H, dj : dj + W, :] += gcols[:, :, :, di, dj, :]
            x.accumulate_grad(gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2))

    return _result(out, (x, w, b), bwd, _wants_grad(x, w, b))


def avgpool2d(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2. Spatial dims must be even."""
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("avgpool2d", x.shape)
    N, C, H, W = x.shape
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        if x.requires_grad:
            gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
            x.accumulate_grad(gx)

    return _result(out, (x,), bwd, x.requires_grad)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    N, C, H, W = x.shape
    inv = 1.0 / (H * W)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g[:, :, None, None] * inv, x.shape).copy())

    return _result(x.data.mean(axis=(2, 3)), (x,), bwd, x.requires_grad)


class BatchNormState:
    """Per-channel running statistics, shared by train and inference mode."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization on [N,C,H,W] or [N,C] input.

    Train mode normalizes by batch statistics (batch size >= 2 required) and
    updates the running estimates with momentum; inference mode uses the
    running estimates only.
    """
    if x.data.ndim not in (2, 4):
        raise ShapeError("batchnorm", x.shape)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("batchnorm.params", gamma.shape, beta.shape, (C,))
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    expand = (lambda v: v) if x.data.ndim == 2 else (lambda v: v[:, None, None])
    n = int(np.prod([x.shape[i] for i in axes]))

    if training:
        if x.shape[0] < 2:
            raise ValueError(f"batchnorm: train mode requires batch size >= 2, got {x.shape[0]}")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean.astype(state.running_mean.dtype)
        unbiased = var * n / max(n - 1, 1)
        state.running_var = (1 - m) * state.running_var + m * unbiased.astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - expand(mean)[None]) * expand(inv_std)[None]
    out = expand(gamma.data)[None] * xhat + expand(beta.data)[None]

    def bwd(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if x.requires_grad:
            gxhat = g * expand(gamma.data)[None]
            if training:
                sum_g = gxhat.sum(axis=axes)
                sum_gx = (gxhat * xhat).sum(axis=axes)
                gx = (gxhat - expand(sum_g / n)[None] - xhat * expand(sum_gx / n)[None]) * expand(inv_std)[None]
            else:
                gx = gxhat * expand(inv_std)[None]
            x.accumulate_grad(gx)

    return _result(out, (x, gamma, beta), bwd, _wants_grad(x, gamma, beta))


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over rows of [N,L] logits against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy", logits.shape)
    labels = np.asarray(labels)
    N, L = logits.shape
    if labels.shape != (N,):
        raise ShapeError("softmax_cross_entropy.labels", labels.shape, (N,))
    if labels.min() < 0 or labels.max() >= L:
        raise ValueError(
            f"softmax_cross_entropy: label out of range [0, {L}): {int(labels.min())}..{int(labels.max())}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(N), labels] - np.log(ez.sum(axis=1)))
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def bwd(g):
        if logits.requires_grad:
            gl = probs.copy()
            gl[np.arange(N), labels] -= 1.0
            logits.accumulate_grad(gl * (float(g) / N))

    return _result(loss, (logits,), bwd, logits.requires_grad)


def sq_distance(a: Tensor, b: Tensor) -> Tensor:
    """Squared L2 distance summed over trailing dims, averaged over axis 0."""
    if a.shape != b.shape:
        raise ShapeError("sq_distance", a.shape, b.shape)
    N = a.shape[0]
    d = a.data - b.data
    loss = np.asarray((d * d).sum() / N, dtype=a.dtype)

    def bwd(g):
        coef = 2.0 * float(g) / N
        if a.requires_grad:
            a.accumulate_grad(coef * d)
        if b.requires_grad:
            b.accumulate_grad(-coef * d)

    return _result(loss, (a, b), bwd, _wants_grad(a, b))


# ---------------------------------------------------------------------------
# parameters


class ParamSet:
    """Named, ordered collection of trainable tensors.

    Entries carry two tags: ``decay`` (subject to weight decay) and ``weak``
    (belongs to the weak classifier head, removable at inference).
    """

    def __init__(self):
        self._entries = {}

    def add(self, name, tensor: Tensor, decay=True, weak=False):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        tensor.name = name
        self._entries[name] = {"tensor": tensor, "decay": decay, "weak": weak}
        return tensor

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name) -> Tensor:
        return self._entries[name]["tensor"]

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        for name, e in self._entries.items():
            yield name, e["tensor"]

    def tensors(self):
        return [e["tensor"] for e in self._entries.values()]

    def meta(self, name):
        e = self._entries[name]
        return {"decay": e["decay"], "weak": e["weak"]}

    def without_weak(self):
        sub = ParamSet()
        for name, e in self._entries.items():
            if not e["weak"]:
                sub._entries[name] = e
        return sub

    def zero_grad(self):
        for e in self._entries.values():
            e["tensor"].grad = None

    def count(self):
        return sum(int(e["tensor"].data.size) for e in self._entries.values())


def backward(loss: Tensor, params: ParamSet = None):
    """Run reverse-mode accumulation from a scalar loss on its tape."""
    if loss._tape is None:
        raise TapeError("loss tensor is not attached to any tape")
    loss._tape.backward(loss)
    if params is not None:
        for name, t in params.items():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def gradcheck(fn, params: ParamSet, epsilon=1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the loss from current parameter values; it is called
    once per perturbed entry, so keep the parameter count small.
    """
    with Tape() as tape:
        loss = fn()
        if loss.data.size != 1:
            raise TapeError("gradcheck requires a scalar output")
        tape.backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + epsilon
            up = fn().item()
            flat[i] = keep - epsilon
            dn = fn().item()
            flat[i] = keep
            numeric = (up - dn) / (2 * epsilon)
            ana = analytic[name].reshape(-1)[i]
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
