"""Finite-difference checks for every derivative the package relies on.

Each check compares an analytic quantity with central differences on a tiny
random instance and returns a :class:`CheckResult`. Errors are norm-wise
relative: ``||analytic - fd|| / ||fd||``. Entry-wise differences are used for
input gradients; weight-space quantities are probed along random directions,
which keeps the number of function evaluations independent of the parameter
count.

:func:`corrupted_backward` swaps a primitive's backward rule for a scaled
copy; the suite must then fail (negative control).
"""

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import forward_model as fm
from . import network as nw
from . import regularizer as rg
from . import solver as sv
from . import trainer as tr

TINY_ARCH = nw.ArchConfig(num_scales=2, residual_blocks_per_scale=1, base_channels=2, kernel_size=3)


@dataclass(frozen=True)
class CheckResult:
    name: str
    tolerance: float
    error: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)


def relative_error(analytic, reference):
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    scale = float(np.linalg.norm(b))
    diff = float(np.linalg.norm(a - b))
    return diff / scale if scale > 0 else diff


@contextlib.contextmanager
def corrupted_backward(name, factor=1.1):
    """Temporarily multiply the backward rule of primitive ``name`` by ``factor``."""
    prim = ad.PRIMITIVES[name]
    original = prim.backward

    def broken(g, *args, **attrs):
        out = original(g, *args, **attrs)
        return tuple(None if o is None else ad.scale(o, factor) for o in out)

    prim.backward = broken
    try:
        yield
    finally:
        prim.backward = original


def tiny_weights(seed, arch=TINY_ARCH, gain=0.5):
    """Random tiny network with moderately sized weights and nonzero biases."""
    w = nw.build_network(arch, seed, branch_gain=1.0)
    rng = np.random.default_rng([seed, 17])
    params = {n: gain * p + (0.05 * rng.standard_normal(p.shape) if n.endswith(".b") else 0)
              for n, p in w.params.items()}
    return w.replace(params)


def _directional(f, theta, direction, step):
    return (f(theta + step * direction) - f(theta - step * direction)) / (2 * step)


def check_primitives(seed=0, step=1e-6, tol=1e-6):
    """vjp of each differentiable primitive against central differences."""
    rng = np.random.default_rng(seed)
    x4 = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    cases = {
        "elu": (lambda a: ad.elu(a), [x4]),
        "mul": (lambda a, b: ad.mul(a, b), [x4, rng.standard_normal(x4.shape)]),
        "conv2d": (lambda a, b: ad.conv2d(a, b), [x4, w]),
        "downsample": (lambda a: ad.downsample(a, 2), [x4]),
        "upsample": (lambda a: ad.upsample(a, 2), [x4]),
        "pad": (lambda a: ad.pad(a, 1), [x4]),
        "add_bias": (lambda a, b: ad.add_bias(a, b), [x4, rng.standard_normal(2)]),
        "add": (lambda a, b: ad.add(a, b), [x4, rng.standard_normal(x4.shape)]),
        "sub": (lambda a, b: ad.sub(a, b), [x4, rng.standard_normal(x4.shape)]),
        "scale": (lambda a: ad.scale(a, -1.7), [x4]),
        "total": (lambda a: ad.total(a), [x4]),
        "fill": (lambda a: ad.fill(ad.total(a), (2, 3)), [x4]),
        "crop": (lambda a: ad.crop(a, 1), [x4]),
        "reshape": (lambda a: ad.reshape(a, (2, 16)), [x4]),
        "elu_d1": (lambda a: ad.elu_d1(a), [x4]),
        "elu_d2": (lambda a: ad.elu_d2(a), [x4]),
        "flip_t": (lambda a: ad.flip_t(a), [w]),
        "conv_wgrad": (lambda a, b: ad.conv_wgrad(a, b, 3), [x4, rng.standard_normal((1, 3, 4, 4))]),
        "channel_sum": (lambda a: ad.channel_sum(a), [x4]),
        "channel_fill": (lambda a: ad.channel_fill(a, x4.shape), [rng.standard_normal(2)]),
    }
    out = []
    for name, (program, inputs) in cases.items():
        outs, tape = ad.record_forward(program, inputs)
        v = rng.standard_normal(outs[0].shape)
        analytic = ad.vjp(tape, v)
        errs = []
        for i, x in enumerate(inputs):
            def f(z, i=i):
                args = list(inputs)
                args[i] = z
                return float(np.sum(v * np.asarray(program(*args))))
            errs.append(relative_error(analytic[i], ad.finite_difference_gradient(f, x, step)))
        out.append(CheckResult(f"primitive {name}", tol, max(errs)))
    return out


def check_network(seed=0, shape=(8, 8), step=1e-6, tol=1e-4):
    rng = np.random.default_rng(seed)
    w = tiny_weights(seed)
    x = rng.random(shape)
    v = rng.standard_normal(shape)
    gx = nw.vjp_input(w, x, v)
    fd = ad.finite_difference_gradient(lambda z: float(np.sum(v * w.apply(z))), x, step)
    gw = nw.vjp_weights(w, x, v)
    theta = w.flat()
    d = rng.standard_normal(theta.size)
    fdw = _directional(lambda t: float(np.sum(v * w.from_flat(t).apply(x))), theta, d, step)
    analytic = float(np.concatenate([g.ravel() for g in gw.values()]) @ d)
    return [CheckResult("network vjp_input", tol, relative_error(gx, fd)),
            CheckResult("network vjp_weights", tol, relative_error(analytic, fdw))]


def check_regularizer_grad(kind, seed=0, shape=(8, 8), step=1e-5, tol=1e-4):
    """Analytic input gradient vs entry-wise central differences of the value."""
    rng = np.random.default_rng([seed, 1])
    reg = rg.Regularizer(kind, tiny_weights(seed))
    x = rng.random(shape)
    fd = ad.finite_difference_gradient(lambda z: rg.value(reg, z), x, step)
    return CheckResult(f"{rg.RegularizerKind.parse(kind).value} grad", tol,
                       relative_error(rg.grad(reg, x), fd))


def check_regularizer_second_order(kind, seed=0, shape=(8, 8), step=1e-5, tol=1e-3):
    """Weight-vjp and Hessian-vector product of the input gradient."""
    rng = np.random.default_rng([seed, 2])
    w = tiny_weights(seed)
    reg = rg.Regularizer(kind, w)
    x = rng.random(shape)
    v = rng.standard_normal(shape)
    hv, gw = rg.hvp_and_weights_vjp(reg, x, v)
    theta = w.flat()
    d = rng.standard_normal(theta.size)
    fd_w = _directional(lambda t: float(np.sum(v * rg.grad(reg.with_weights(w.from_flat(t)), x))),
                        theta, d, step)
    analytic_w = float(np.concatenate([g.ravel() for g in gw.values()]) @ d)
    u = rng.standard_normal(shape)
    fd_x = _directional(lambda z: float(np.sum(v * rg.grad(reg, z))), x, u, step)
    label = rg.RegularizerKind.parse(kind).value
    return [CheckResult(f"{label} grad_weights_vjp", tol, relative_error(analytic_w, fd_w)),
            CheckResult(f"{label} hvp", tol, relative_error(float(np.sum(hv * u)), fd_x))]


def contractive_instance(seed, kind="lsr", shape=(8, 8), tau=0.2, gamma=1.0, sigma=0.05):
    """Tiny denoising problem whose PGM map is a contraction.

    The data term is 1/2 ||y - x||^2, so the prox scales by 1/(1 + gamma) and a
    moderately sized network keeps the whole map contractive. Returns
    ``(problem, reg, x_gt, gamma)``.
    """
    rng = np.random.default_rng([seed, 3])
    x_gt = rng.random(shape)
    model = fm.BlurDownsample(fm.delta_kernel(1), 1, shape)
    problem = fm.simulate(model, x_gt, sigma, seed=seed)
    reg = rg.Regularizer(kind, tiny_weights(seed, gain=0.5), tau)
    return problem, reg, x_gt, gamma


TIGHT_SOLVE = sv.SolverConfig(line_search=False, epsilon=1e-13, max_iters=5000)


def check_jfb(seed=0, kind="lsr", step=1e-5, tol=1e-3):
    """JFB gradient vs central differences of theta -> <x_bar - x_gt, T_theta(x_bar)>."""
    problem, reg, x_gt, gamma = contractive_instance(seed, kind)
    x_bar = sv.run_forward(problem, reg, TIGHT_SOLVE.replace(gamma0=gamma)).x_bar
    c = x_bar - x_gt
    g = tr.jfb_gradient(problem, reg, x_bar, x_gt, gamma)
    theta = reg.weights.flat()
    d = np.random.default_rng([seed, 4]).standard_normal(theta.size)

    def inner(t):
        r = reg.with_weights(reg.weights.from_flat(t))
        return float(np.sum(c * sv.pgm_step(problem, r, x_bar, gamma)))

    return CheckResult(f"{reg.kind.value} jfb", tol, relative_error(g @ d, _directional(inner, theta, d, step)))


def check_exact_implicit(seed=0, kind="lsr", step=1e-5, tol=1e-2):
    """Exact implicit gradient vs end-to-end differences of L(theta).

    The fixed point is re-solved (warm-started at x_bar) for each perturbed
    theta. Also returns the cosine between the exact and JFB gradients.
    """
    problem, reg, x_gt, gamma = contractive_instance(seed, kind)
    config = TIGHT_SOLVE.replace(gamma0=gamma)
    x_bar = sv.run_forward(problem, reg, config).x_bar
    exact = tr.exact_implicit_gradient(problem, reg, x_bar, x_gt, gamma)
    jfb = tr.jfb_gradient(problem, reg, x_bar, x_gt, gamma)
    theta = reg.weights.flat()
    d = np.random.default_rng([seed, 5]).standard_normal(theta.size)

    def loss(t):
        r = reg.with_weights(reg.weights.from_flat(t))
        return tr.mse_loss(sv.run_forward(problem, r, config, x0=x_bar).x_bar, x_gt)

    err = relative_error(exact @ d, _directional(loss, theta, d, step))
    cosine = float(exact @ jfb / (np.linalg.norm(exact) * np.linalg.norm(jfb)))
    return CheckResult(f"{reg.kind.value} exact implicit", tol, err), cosine


def run_suite(seed=0, kinds=("lsr", "red", "dsv")):
    """All checks; returns a list of :class:`CheckResult`."""
    results = check_primitives(seed) + check_network(seed)
    for kind in kinds:
        results.append(check_regularizer_grad(kind, seed))
        results.extend(check_regularizer_second_order(kind, seed))
    for kind in kinds:
        results.append(check_jfb(seed, kind))
        exact, cosine = check_exact_implicit(seed, kind)
        results.append(exact)
        results.append(CheckResult(f"{kind} jfb/exact cosine > 0", 0.0, 0.0 if cosine > 0 else 1.0 - cosine))
    return results


def format_report(results):
    lines = [f"{'check':32s} {'tolerance':>10s} {'error':>12s}  status"]
    for r in results:
        lines.append(f"{r.name:32s} {r.tolerance:10.1e} {r.error:12.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
