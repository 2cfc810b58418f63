"""Reverse-mode differentiation over a small, closed set of array primitives.

Arrays are plain ``numpy.ndarray`` objects in float64. A :class:`Tape` records
every primitive applied to a traced :class:`Var`; :func:`grad` walks the tape
backwards and returns vector-Jacobian products.

Each backward rule is written with the same primitives as the forward pass.
Calling :func:`grad` with ``create_graph=True`` therefore records the backward
computation onto the tape as well, so a gradient can itself be differentiated
(needed for Hessian-vector products and for the weight gradient of an input
gradient).

Supported primitives
--------------------
``add, sub, mul, scale, total, fill, elu, conv2d, pad, crop, downsample,
upsample, reshape`` plus the companions that close the set under
differentiation: ``elu_d1, elu_d2`` (ELU derivatives), ``flip_t`` (kernel
flip + channel transpose), ``conv_wgrad`` (kernel gradient of ``conv2d``),
``channel_fill`` / ``channel_sum`` (per-channel broadcast and its adjoint).

Adding a primitive means adding a forward, a backward expressed in existing
primitives, and a finite-difference test.

Convolutions use circular boundary handling and "same" output size.
"""

import functools

import numpy as np

from .errors import NumericError, ShapeError, UnsupportedPrimitiveError

__all__ = [
    "Tape", "Var", "record_forward", "vjp", "grad", "finite_difference_gradient",
    "add", "sub", "mul", "scale", "total", "fill", "dot", "elu", "elu_d1", "elu_d2",
    "conv2d", "flip_t", "conv_wgrad", "channel_fill", "channel_sum", "add_bias",
    "pad", "crop", "downsample", "upsample", "reshape", "PRIMITIVES",
]


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value", "op", "parents", "attrs")

    def __init__(self, tape, index, value, op=None, parents=(), attrs=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.op = op
        self.parents = parents
        self.attrs = attrs or {}

    @property
    def shape(self):
        return self.value.shape

    def __array__(self, *args, **kwargs):
        raise UnsupportedPrimitiveError(
            "traced values cannot be converted to arrays; use elder.autodiff primitives")

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method == "__call__" and not kwargs:
            if ufunc is np.add:
                return add(*inputs)
            if ufunc is np.subtract:
                return sub(*inputs)
            if ufunc is np.multiply:
                return mul(*inputs)
        raise UnsupportedPrimitiveError(f"numpy ufunc {ufunc.__name__!r} is not a supported primitive")

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        op = self.op.name if self.op is not None else "leaf"
        return f"Var(#{self.index}, {op}, shape={self.value.shape})"


class Tape:
    """Append-only record of primitive applications.

    Nodes only reference earlier nodes, so the node list is a topological order.
    """

    def __init__(self):
        self.nodes = []
        self.inputs = []
        self.outputs = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value):
        value = _as_array(value)
        var = Var(self, len(self.nodes), value)
        self.nodes.append(var)
        return var

    def _record(self, op, args, value, attrs):
        var = Var(self, len(self.nodes), value, op, tuple(args), attrs)
        self.nodes.append(var)
        return var

    def replay(self, inputs=None):
        """Recompute every node's value from the leaves; return output values.

        ``inputs`` optionally replaces the values of ``self.inputs``.
        """
        values = {}
        if inputs is not None:
            for var, x in zip(self.inputs, inputs):
                values[var.index] = _as_array(x)
        for node in self.nodes:
            if node.index in values:
                continue
            if node.op is None:
                values[node.index] = node.value
                continue
            args = [values[p.index] if isinstance(p, Var) else p for p in node.parents]
            values[node.index] = node.op.forward(*args, **node.attrs)
        return [values[o.index] for o in self.outputs]


class Primitive:
    def __init__(self, name, forward, backward, attrs=()):
        self.name = name
        self.forward = forward
        self.backward = backward
        self.attr_names = attrs
        self.arity = forward.__code__.co_argcount - len(attrs)

    def __call__(self, *args, **attrs):
        if len(args) > self.arity:
            attrs.update(zip(self.attr_names, args[self.arity:]))
            args = args[:self.arity]
        tape = None
        for a in args:
            if isinstance(a, Var):
                if tape is None:
                    tape = a.tape
                elif a.tape is not tape:
                    raise ValueError("cannot mix values recorded on different tapes")
        vals = [a.value if isinstance(a, Var) else _as_array(a) for a in args]
        out = self.forward(*vals, **attrs)
        if tape is None:
            return out
        args = [a if isinstance(a, Var) else _as_array(a) for a in args]
        return tape._record(self, args, out, attrs)


PRIMITIVES = {}


def _primitive(name, backward, attrs=()):
    def wrap(forward):
        prim = Primitive(name, forward, backward, attrs)
        PRIMITIVES[name] = prim
        return prim
    return wrap


def _as_array(x):
    if isinstance(x, Var):
        raise TypeError("expected an array, got a traced value")
    return np.asarray(x, dtype=np.float64)


def _shape(x):
    return x.shape if isinstance(x, Var) else np.shape(x)


def _same_shape(a, b, name):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# elementwise -----------------------------------------------------------------

def _add_bwd(g, a, b):
    return g, g


@_primitive("add", _add_bwd)
def add(a, b):
    _same_shape(a, b, "add")
    return a + b


def _sub_bwd(g, a, b):
    return g, scale(g, -1.0)


@_primitive("sub", _sub_bwd)
def sub(a, b):
    _same_shape(a, b, "sub")
    return a - b


def _mul_bwd(g, a, b):
    return mul(g, b), mul(g, a)


@_primitive("mul", _mul_bwd)
def mul(a, b):
    _same_shape(a, b, "mul")
    return a * b


def _scale_bwd(g, a, c):
    return (scale(g, c),)


@_primitive("scale", _scale_bwd, attrs=("c",))
def scale(a, c):
    return a * float(c)


def _total_bwd(g, a):
    return (fill(g, shape=_shape(a)),)


@_primitive("total", _total_bwd)
def total(a):
    return np.asarray(a.sum())


def _fill_bwd(g, s, shape):
    return (total(g),)


@_primitive("fill", _fill_bwd, attrs=("shape",))
def fill(s, shape):
    if np.ndim(s) != 0:
        raise ShapeError("fill expects a scalar")
    return np.full(shape, float(s))


def dot(a, b):
    return total(mul(a, b))


# ELU with alpha = 1 and its derivatives ------------------------------------------

def _elu_bwd(g, a):
    return (mul(g, elu_d1(a)),)


@_primitive("elu", _elu_bwd)
def elu(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def _elu_d1_bwd(g, a):
    return (mul(g, elu_d2(a)),)


@_primitive("elu_d1", _elu_d1_bwd)
def elu_d1(a):
    return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))


def _elu_d2_bwd(g, a):
    # d/da of where(a > 0, 0, exp(a)) is the same function
    return (mul(g, elu_d2(a)),)


@_primitive("elu_d2", _elu_d2_bwd)
def elu_d2(a):
    return np.where(a > 0, 0.0, np.exp(np.minimum(a, 0.0)))


# circular convolution ------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def _window_index(h, w, k):
    # flat source index of x[i+u-r, j+v-r] (mod h, w) for output pixel (i, j), tap (u, v)
    r = k // 2
    i, j = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    u, v = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    rows = (i[:, :, None, None] + u - r) % h
    cols = (j[:, :, None, None] + v - r) % w
    idx = (rows * w + cols).reshape(h * w, k * k)
    idx.setflags(write=False)
    return idx


def _patches(x, k):
    """im2col with circular wrap: (B*H*W, C*k*k)."""
    b, c, h, w = x.shape
    g = x.reshape(b, c, h * w)[:, :, _window_index(h, w, k)]
    return g.transpose(0, 2, 1, 3).reshape(b * h * w, c * k * k)


def _check_conv(x, w):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects (B,C,H,W) input and (O,C,k,k) kernel, got {x.shape}, {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {w.shape[2:]}")
    if w.shape[2] > min(x.shape[2], x.shape[3]):
        raise ShapeError("conv2d kernel larger than image")


def _conv2d_bwd(g, x, w):
    return conv2d(g, flip_t(w)), conv_wgrad(x, g, kernel_size=_shape(w)[2])


@_primitive("conv2d", _conv2d_bwd)
def conv2d(x, w):
    """y[b,o,i,j] = sum_{c,u,v} w[o,c,u,v] * x[b,c,i+u-r,j+v-r] (indices mod H, W)."""
    _check_conv(x, w)
    b, _, h, wd = x.shape
    o, _, k, _ = w.shape
    out = _patches(x, k) @ w.reshape(o, -1).T
    return np.ascontiguousarray(out.reshape(b, h, wd, o).transpose(0, 3, 1, 2))


def _flip_t_bwd(g, w):
    return (flip_t(g),)


@_primitive("flip_t", _flip_t_bwd)
def flip_t(w):
    """Swap in/out channels and rotate spatially by 180 degrees (adjoint kernel)."""
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def _conv_wgrad_bwd(gw, x, g, kernel_size):
    return conv2d(g, flip_t(gw)), conv2d(x, gw)


@_primitive("conv_wgrad", _conv_wgrad_bwd, attrs=("kernel_size",))
def conv_wgrad(x, g, kernel_size):
    """Kernel gradient of ``conv2d(x, w)`` for output cotangent ``g``."""
    if x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
        raise ShapeError(f"conv_wgrad shape mismatch {x.shape} vs {g.shape}")
    o = g.shape[1]
    c = x.shape[1]
    g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
    return (g2 @ _patches(x, kernel_size)).reshape(o, c, kernel_size, kernel_size)


# per-channel broadcast -------------------------------------------------------------

def _channel_fill_bwd(g, b, shape):
    return (channel_sum(g),)


@_primitive("channel_fill", _channel_fill_bwd, attrs=("shape",))
def channel_fill(b, shape):
    if b.ndim != 1 or len(shape) != 4 or shape[1] != b.shape[0]:
        raise ShapeError(f"channel_fill: cannot broadcast {b.shape} to {shape}")
    return np.broadcast_to(b[None, :, None, None], shape).copy()


def _channel_sum_bwd(g, x):
    return (channel_fill(g, shape=_shape(x)),)


@_primitive("channel_sum", _channel_sum_bwd)
def channel_sum(x):
    if x.ndim != 4:
        raise ShapeError("channel_sum expects a (B,C,H,W) array")
    return x.sum(axis=(0, 2, 3))


def add_bias(x, b):
    return add(x, channel_fill(b, shape=_shape(x)))


# resampling, padding, reshaping ------------------------------------------------------

def _downsample_bwd(g, x, factor):
    return (upsample(g, factor=factor),)


@_primitive("downsample", _downsample_bwd, attrs=("factor",))
def downsample(x, factor):
    """Keep every ``factor``-th pixel along the last two axes, starting at 0."""
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"spatial extent {(h, w)} not divisible by {factor}")
    return np.ascontiguousarray(x[..., ::factor, ::factor])


def _upsample_bwd(g, x, factor):
    return (downsample(g, factor=factor),)


@_primitive("upsample", _upsample_bwd, attrs=("factor",))
def upsample(x, factor):
    """Zero-fill upsampling; the adjoint of :func:`downsample`."""
    h, w = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (h * factor, w * factor))
    out[..., ::factor, ::factor] = x
    return out


def _pad_bwd(g, x, width):
    return (crop(g, width=width),)


@_primitive("pad", _pad_bwd, attrs=("width",))
def pad(x, width):
    """Zero-pad the last two axes by ``width`` on every side."""
    spec = [(0, 0)] * (x.ndim - 2) + [(width, width), (width, width)]
    return np.pad(x, spec)


def _crop_bwd(g, x, width):
    return (pad(g, width=width),)


@_primitive("crop", _crop_bwd, attrs=("width",))
def crop(x, width):
    h, w = x.shape[-2:]
    if 2 * width >= min(h, w):
        raise ShapeError(f"cannot crop {width} from extent {(h, w)}")
    return np.ascontiguousarray(x[..., width:h - width, width:w - width])


def _reshape_bwd(g, x, shape):
    return (reshape(g, shape=_shape(x)),)


@_primitive("reshape", _reshape_bwd, attrs=("shape",))
def reshape(x, shape):
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return x.reshape(shape).copy()


# differentiation -----------------------------------------------------------------

def grad(outputs, wrt, cotangents=None, create_graph=False):
    """Vector-Jacobian product of ``outputs`` with respect to the Vars ``wrt``.

    ``cotangents`` defaults to ones (so a scalar output yields its gradient).
    Cotangents may themselves be Vars on the same tape. With
    ``create_graph=True`` the returned gradients are Vars recorded on the tape;
    otherwise they are arrays. Inputs that do not influence the outputs get
    zeros.
    """
    single = isinstance(outputs, Var)
    outputs = [outputs] if single else list(outputs)
    wrt_single = isinstance(wrt, Var)
    wrt = [wrt] if wrt_single else list(wrt)
    if cotangents is None:
        cotangents = [np.ones(o.shape) for o in outputs]
    elif single or isinstance(cotangents, (np.ndarray, Var)) or np.isscalar(cotangents):
        cotangents = [cotangents]
    tape = outputs[0].tape
    for v in list(outputs) + wrt:
        if v.tape is not tape:
            raise ValueError("outputs and wrt must live on the same tape")

    wanted = {v.index for v in wrt}
    stop = max(o.index for o in outputs)
    needed = bytearray(stop + 1)
    for node in tape.nodes[:stop + 1]:
        if node.index in wanted or any(isinstance(p, Var) and needed[p.index] for p in node.parents):
            needed[node.index] = 1

    grads = {}
    for out, ct in zip(outputs, cotangents):
        if _shape(ct) != out.shape:
            raise ShapeError(f"cotangent shape {_shape(ct)} does not match output {out.shape}")
        if not isinstance(ct, Var):
            ct = _as_array(ct)
            if not create_graph:
                ct = ct.copy()
        elif not create_graph:
            ct = ct.value
        _accumulate(grads, out.index, ct, create_graph)

    for node in reversed(tape.nodes[:stop + 1]):
        if node.op is None or not needed[node.index]:
            continue
        g = grads.get(node.index)
        if g is None:
            continue
        if node.index not in wanted:
            del grads[node.index]
        if create_graph:
            args = node.parents
        else:
            args = [p.value if isinstance(p, Var) else p for p in node.parents]
        cts = node.op.backward(g, *args, **node.attrs)
        for p, ct in zip(node.parents, cts):
            if isinstance(p, Var) and needed[p.index]:
                _accumulate(grads, p.index, ct, create_graph)

    result = []
    for v in wrt:
        g = grads.get(v.index)
        if g is None:
            g = np.zeros(v.shape)
        result.append(g)
    return result[0] if wrt_single else result


def _accumulate(grads, index, ct, create_graph):
    if not create_graph and isinstance(ct, Var):
        ct = ct.value
    prev = grads.get(index)
    if prev is None:
        grads[index] = ct
    elif create_graph:
        grads[index] = add(prev, ct)
    else:
        grads[index] = prev + ct


def record_forward(program, inputs):
    """Run ``program`` on traced copies of ``inputs``.

    Returns ``(outputs, tape)`` where ``outputs`` is a list of arrays equal to
    the untraced evaluation and ``tape`` is ready for :func:`vjp`.
    """
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    for x in leaves:
        if not np.all(np.isfinite(x.value)):
            raise NumericError("record_forward: non-finite input")
    outs = program(*leaves)
    if isinstance(outs, (Var, np.ndarray)):
        outs = [outs]
    outs = [o if isinstance(o, Var) else tape.leaf(o) for o in outs]
    tape.inputs = leaves
    tape.outputs = outs
    return [o.value for o in outs], tape


def vjp(tape, cotangent):
    """Gradients of <cotangent, outputs> with respect to each recorded input."""
    if isinstance(cotangent, np.ndarray):
        cotangent = [cotangent]
    if len(cotangent) != len(tape.outputs):
        raise ShapeError(f"expected {len(tape.outputs)} cotangents, got {len(cotangent)}")
    for ct, out in zip(cotangent, tape.outputs):
        if np.shape(ct) != out.shape:
            raise ShapeError(f"cotangent shape {np.shape(ct)} does not match output {out.shape}")
    return grad(tape.outputs, tape.inputs, cotangent)


def finite_difference_gradient(f, x, step=1e-4):
    """Central-difference gradient of scalar ``f`` at ``x``, entry by entry."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near entry {i}")
        gflat[i] = (fp - fm) / (2 * step)
    return g
