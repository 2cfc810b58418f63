"""Explicit regularizers h_theta built on an image-to-image network G.

=====  ==========================  ======================================
kind   value h(x)                  gradient
=====  ==========================  ======================================
LSR    1/2 ||x - G(x)||^2          (I - J_G(x))^T (x - G(x))
RED    1/2 x^T (x - G(x))          x - G(x)/2 - J_G(x)^T x / 2
DSV    1^T G(x)                    J_G(x)^T 1
=====  ==========================  ======================================

``J_G`` is the Jacobian of G with respect to its input. The RED gradient is the
exact one; :func:`red_shortcut_gradient` gives the ``x - G(x)`` shortcut only
for comparison.

Second-order quantities (:func:`grad_weights_vjp`, :func:`hvp`) differentiate
the gradient expression itself: the ``J_G^T`` products are recorded on the tape
(``create_graph=True``) and the tape is differentiated a second time.

The network only needs ``params`` (ordered name -> array) and
``forward(params, x)`` written with :mod:`elder.autodiff` primitives, so the
toy networks in this module work everywhere a trained network does.
"""

import enum
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError


class RegularizerKind(enum.Enum):
    LSR = "lsr"
    RED = "red"
    DSV = "dsv"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown regularizer kind {value!r}; expected one of lsr, red, dsv") from None


@dataclass(frozen=True, eq=False)
class Regularizer:
    kind: RegularizerKind
    weights: object
    tau: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", RegularizerKind.parse(self.kind))
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    def with_weights(self, weights):
        return Regularizer(self.kind, weights, self.tau)

    def with_tau(self, tau):
        return Regularizer(self.kind, self.weights, tau)


class IdentityNetwork:
    """G(x) = x, no parameters."""

    params = OrderedDict()

    def forward(self, params, x):
        return x


class LinearFilter:
    """G(x) = k * x (single-channel circular convolution), a linear toy network."""

    def __init__(self, kernel):
        k = np.asarray(kernel, dtype=np.float64)
        if k.ndim == 2:
            k = k[None, None]
        self.params = OrderedDict(kernel=k)

    def replace(self, params):
        return LinearFilter(params["kernel"])

    def forward(self, params, x):
        from .network import as_batch
        shape = ad._shape(x)
        out = ad.conv2d(as_batch(x), params["kernel"])
        return ad.reshape(out, tuple(shape))

    def spectrum(self, shape):
        """Eigenvalues of the circulant operator on images of ``shape``."""
        k = self.params["kernel"][0, 0]
        big = np.zeros(shape)
        big[:k.shape[0], :k.shape[1]] = k
        # correlation form of conv2d: y[i] = sum k[u] x[i+u-r]
        big = np.roll(big, (-(k.shape[0] // 2), -(k.shape[1] // 2)), axis=(0, 1))
        return np.conj(np.fft.fft2(big))


def _value_expr(kind, x, g):
    if kind is RegularizerKind.LSR:
        r = ad.sub(x, g)
        return ad.scale(ad.dot(r, r), 0.5)
    if kind is RegularizerKind.RED:
        return ad.scale(ad.dot(x, ad.sub(x, g)), 0.5)
    return ad.total(g)


def _gradient_expr(kind, x, g, create_graph):
    """Gradient of h at the traced input ``x`` given traced output ``g = G(x)``.

    Returns a Var when ``create_graph`` is set, an array otherwise.
    """
    def jt(u):
        return ad.grad(g, x, u, create_graph=create_graph)

    xv, gv = (x, g) if create_graph else (x.value, g.value)
    if kind is RegularizerKind.LSR:
        r = ad.sub(xv, gv)
        return ad.sub(r, jt(r))
    if kind is RegularizerKind.RED:
        return ad.sub(ad.sub(xv, ad.scale(gv, 0.5)), ad.scale(jt(xv), 0.5))
    return jt(np.ones(x.shape))


def _check(reg, x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("regularizer input has non-finite entries")
    return x


def network_output(reg, x):
    return np.asarray(reg.weights.forward(reg.weights.params, _check(reg, x)))


def value(reg, x):
    """h_theta(x) (without tau). Batches (B,H,W) are summed."""
    x = _check(reg, x)
    g = network_output(reg, x)
    return float(_value_expr(reg.kind, x, g))


def grad(reg, x):
    """Exact input gradient of :func:`value`."""
    x = _check(reg, x)
    tape = ad.Tape()
    xv = tape.leaf(x)
    g = reg.weights.forward(reg.weights.params, xv)
    return _gradient_expr(reg.kind, xv, g, create_graph=False)


def value_and_grad(reg, x):
    x = _check(reg, x)
    tape = ad.Tape()
    xv = tape.leaf(x)
    g = reg.weights.forward(reg.weights.params, xv)
    return float(_value_expr(reg.kind, x, g.value)), _gradient_expr(reg.kind, xv, g, create_graph=False)


def _second_order(reg, x, v, want_input, want_weights):
    x = _check(reg, x)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != x.shape:
        raise ShapeError(f"direction shape {v.shape} does not match input {x.shape}")
    tape = ad.Tape()
    xv = tape.leaf(x)
    pv = OrderedDict((n, tape.leaf(p)) for n, p in reg.weights.params.items())
    g = reg.weights.forward(pv, xv)
    s = ad.dot(_gradient_expr(reg.kind, xv, g, create_graph=True), v)
    wrt = ([xv] if want_input else []) + (list(pv.values()) if want_weights else [])
    if not isinstance(s, ad.Var):  # gradient independent of x and theta
        grads = [np.zeros(w.shape) for w in wrt]
    else:
        grads = ad.grad(s, wrt) if wrt else []
    out_x = grads.pop(0) if want_input else None
    out_w = OrderedDict(zip(pv, grads)) if want_weights else None
    return out_x, out_w


def grad_weights_vjp(reg, x, v):
    """Gradient in theta of <v, grad h_theta(x)> as an ordered name -> array map."""
    return _second_order(reg, x, v, False, True)[1]


def hvp(reg, x, v):
    """Hessian-vector product: gradient in x of <v, grad h_theta(x)>."""
    return _second_order(reg, x, v, True, False)[0]


def hvp_and_weights_vjp(reg, x, v):
    return _second_order(reg, x, v, True, True)


def red_shortcut_gradient(reg, x):
    """x - G(x): the RED gradient valid only for homogeneous, symmetric-Jacobian G.

    Diagnostic only; never used by the solver.
    """
    x = _check(reg, x)
    return x - network_output(reg, x)


def grad_then_weights_vjp(reg, x, cotangent):
    """One trace giving both ``grad h(x)`` and the theta-gradient of ``<v, grad h(x)>``.

    ``cotangent`` maps the input gradient to ``v``; this lets a loss that depends
    on ``grad h`` (e.g. a gradient-step denoiser) be differentiated in one pass.
    Returns ``(grad_h, v, weight_grads)``.
    """
    x = _check(reg, x)
    tape = ad.Tape()
    xv = tape.leaf(x)
    pv = OrderedDict((n, tape.leaf(p)) for n, p in reg.weights.params.items())
    g = reg.weights.forward(pv, xv)
    gexpr = _gradient_expr(reg.kind, xv, g, create_graph=True)
    if not isinstance(gexpr, ad.Var):
        v = np.asarray(cotangent(gexpr), dtype=np.float64)
        return gexpr, v, OrderedDict((n, np.zeros(p.shape)) for n, p in pv.items())
    v = np.asarray(cotangent(gexpr.value), dtype=np.float64)
    grads = ad.grad(ad.dot(gexpr, v), list(pv.values()))
    return gexpr.value, v, OrderedDict(zip(pv, grads))
