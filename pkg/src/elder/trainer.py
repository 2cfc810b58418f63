"""Deep-equilibrium training of explicit regularizers.

The reconstruction ``x_bar`` is a fixed point of the PGM map
``T(x) = prox_{gamma g}(x - gamma tau grad h_theta(x))`` and the training loss
is ``1/2 ||x_bar - x_gt||^2``.

Since the prox of a quadratic (or indicator) data term is affine in its input
with a symmetric linear part ``L`` (:func:`elder.forward_model.prox_linear`),

    grad_theta <c, T(x_bar)> = -gamma tau * d/dtheta <L c, grad h_theta(x_bar)>,

which is :func:`elder.regularizer.grad_weights_vjp` at ``L c``. The
Jacobian-free gradient uses ``c = x_bar - x_gt`` directly; the exact implicit
gradient first solves ``u = c + J_T(x_bar)^T u`` by fixed-point iteration, with
``J_T^T u = (I - gamma tau Hess h) L u``.
"""

import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import forward_model as fm
from . import network as nw
from . import regularizer as rg
from . import solver as sv
from .data import sample_rng
from .errors import ConfigError, ContractionError, NumericError

log = logging.getLogger(__name__)

PRETRAIN_SIGMA_RANGE = (0.0, 55.0 / 255.0)
DEQ_SIGMA_RANGE = (0.0, 10.0 / 255.0)


# metrics ---------------------------------------------------------------------------

def mse_loss(x_bar, x_gt):
    """1/2 ||x_bar - x_gt||^2."""
    x_bar, x_gt = np.asarray(x_bar, dtype=np.float64), np.asarray(x_gt, dtype=np.float64)
    if x_bar.shape != x_gt.shape:
        raise ValueError(f"shape mismatch {x_bar.shape} vs {x_gt.shape}")
    d = x_bar - x_gt
    return 0.5 * float(np.sum(d * d))


def mse(x_bar, x_gt):
    """Per-pixel mean squared error."""
    d = np.asarray(x_bar, dtype=np.float64) - np.asarray(x_gt, dtype=np.float64)
    return float(np.mean(d * d))


def psnr(x_bar, x_gt, peak=1.0):
    """10 log10(peak^2 / per-pixel MSE); ``inf`` for identical images."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    err = mse(x_bar, x_gt)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / err)


# gradients ---------------------------------------------------------------------------

def _flat(grads):
    return np.concatenate([g.ravel() for g in grads.values()]) if grads else np.zeros(0)


def transposed_map_weights(problem, reg, x_bar, cotangent, gamma):
    """[J_{T}(theta)]^T c: theta-gradient of <c, T_theta(x_bar)> as a flat vector."""
    u = fm.prox_linear(problem.model, cotangent, gamma)
    grads = rg.grad_weights_vjp(reg, x_bar, u)
    return -gamma * reg.tau * _flat(grads)


def jfb_gradient(problem, reg, x_bar, x_gt, gamma):
    """Jacobian-free DEQ gradient [J_T(theta)]^T (x_bar - x_gt), flat."""
    return transposed_map_weights(problem, reg, x_bar, np.asarray(x_bar) - np.asarray(x_gt), gamma)


def fixed_point_map(problem, reg, x, gamma):
    return sv.pgm_step(problem, reg, x, gamma)


def transposed_map_input(problem, reg, x_bar, u, gamma):
    """[J_T(x_bar)]^T u = (I - gamma tau Hess h) L u."""
    lu = fm.prox_linear(problem.model, u, gamma)
    return lu - gamma * reg.tau * rg.hvp(reg, x_bar, lu)


def exact_implicit_gradient(problem, reg, x_bar, x_gt, gamma, tol=1e-10, max_iter=2000):
    """[J_T(theta)]^T (I - J_T(x_bar))^{-T} (x_bar - x_gt), flat.

    The linear solve is the Neumann iteration ``u <- c + J_T^T u``; divergence
    or exhausting ``max_iter`` raises :class:`ContractionError`.
    """
    c = np.asarray(x_bar, dtype=np.float64) - np.asarray(x_gt, dtype=np.float64)
    cnorm = float(np.linalg.norm(c))
    if cnorm == 0.0:
        return np.zeros(sum(p.size for p in reg.weights.params.values()))
    u = c.copy()
    for _ in range(max_iter):
        u_new = c + transposed_map_input(problem, reg, x_bar, u, gamma)
        step = float(np.linalg.norm(u_new - u))
        u = u_new
        if not np.isfinite(step) or np.linalg.norm(u) > 1e8 * cnorm:
            raise ContractionError("Neumann iteration diverged; fixed-point map is not contractive")
        if step <= tol * cnorm:
            return transposed_map_weights(problem, reg, x_bar, u, gamma)
    raise ContractionError(f"Neumann iteration did not converge in {max_iter} steps", residual=step / cnorm)


# optimizer ------------------------------------------------------------------------------

class Adam:
    """Adaptive-moment gradient descent on a flat parameter vector."""

    def __init__(self, size, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# configuration ---------------------------------------------------------------------------

def _interval(value, name):
    lo, hi = (float(v) for v in value)
    if lo > hi or lo < 0:
        raise ConfigError(f"{name} must be an interval 0 <= lower <= upper, got {value}")
    return (lo, hi)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 8
    noise_sigma_range: tuple = DEQ_SIGMA_RANGE
    solver: sv.SolverConfig = sv.SolverConfig(line_search=False, gamma0=1.0, max_iters=100)
    seed: int = 0
    pretrain: bool = False

    def __post_init__(self):
        object.__setattr__(self, "noise_sigma_range", _interval(self.noise_sigma_range, "noise_sigma_range"))
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class TaskSpec:
    """How to turn a clean image into a training problem.

    ``task`` is one of ``inpaint``, ``sisr``, ``csmri``, ``denoise``. Ranges are
    sampled uniformly per sample; the measurement noise comes from
    ``TrainConfig.noise_sigma_range`` unless ``noise_sigma`` is set here.
    """

    task: str = "inpaint"
    p_missing: tuple = (0.5, 0.5)
    sampling_ratio: tuple = (0.1, 0.2)
    kernel: tuple = None
    factor: int = 2
    noise_sigma: tuple = None

    def __post_init__(self):
        if self.task not in ("inpaint", "sisr", "csmri", "denoise"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.kernel is not None:
            object.__setattr__(self, "kernel", tuple(map(tuple, np.asarray(self.kernel, dtype=float))))

    def make_model(self, shape, rng):
        if self.task == "inpaint":
            p = rng.uniform(*self.p_missing)
            mask = rng.random(shape) >= p
            return fm.InpaintMask(mask, p)
        if self.task == "csmri":
            return fm.FourierMask(fm.radial_mask(shape, rng.uniform(*self.sampling_ratio)))
        if self.task == "sisr":
            k = fm.gaussian_kernel(7, 1.6) if self.kernel is None else np.array(self.kernel)
            return fm.BlurDownsample(k, self.factor, shape)
        return fm.BlurDownsample(fm.delta_kernel(1), 1, shape)

    def make_problem(self, x_gt, rng, sigma_range=(0.0, 0.0)):
        model = self.make_model(np.shape(x_gt), rng)
        lo, hi = self.noise_sigma if self.noise_sigma is not None else sigma_range
        sigma = 0.0 if self.task == "inpaint" else rng.uniform(lo, hi)
        return fm.simulate(model, x_gt, sigma, seed=int(rng.integers(2 ** 31)))


@dataclass
class TrainRecord:
    epoch_losses: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    val_psnr: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def epochs_completed(self):
        return len(self.epoch_losses)

    def rows(self):
        """(epoch, loss, val_mse, val_psnr, skipped) -- wall-clock is left out so rows are reproducible."""
        out = []
        for i in range(self.epochs_completed):
            out.append((i + 1, self.epoch_losses[i], _get(self.val_mse, i), _get(self.val_psnr, i),
                        _get(self.skipped, i)))
        return out


def _get(seq, i):
    return seq[i] if i < len(seq) else None


def _abort(record, message):
    record.epoch_losses.append(float("nan"))
    exc = NumericError(message)
    exc.record = record
    raise exc


# pre-training ----------------------------------------------------------------------------

def denoise(reg, noisy):
    """Gradient-step denoiser x - grad h(x) (works on (H,W) or (B,H,W))."""
    return np.asarray(noisy) - rg.grad(reg, noisy)


def denoising_mse(reg, clean, sigma, seed=0):
    """Per-pixel MSE of (identity, gradient-step denoiser) on noisy copies of ``clean``."""
    rng = sample_rng(seed, 7919)
    noisy = clean + sigma * rng.standard_normal(clean.shape)
    return mse(noisy, clean), mse(denoise(reg, noisy), clean)


def pretrain_denoiser(dataset, arch, config, kind="lsr", weights=None, validation=None,
                      sigma_range=PRETRAIN_SIGMA_RANGE, on_epoch=None):
    """Train ``x -> x - grad h_theta(x)`` as a blind Gaussian denoiser.

    ``dataset`` is a (N, H, W) array of clean tiles. Returns ``(weights, record)``;
    ``record.val_mse`` holds the held-out denoising MSE at sigma = 25/255 when
    ``validation`` tiles are given.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 3 or len(dataset) == 0:
        raise ValueError("dataset must be a non-empty (N, H, W) array")
    sigma_range = _interval(sigma_range, "sigma_range")
    weights = weights if weights is not None else nw.build_network(arch, config.seed)
    reg = rg.Regularizer(kind, weights, 1.0)
    theta = weights.flat()
    opt = Adam(theta.size, config.learning_rate)
    record = TrainRecord()
    n = len(dataset)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = sample_rng(config.seed, 1, epoch).permutation(n)
        losses = []
        for b0 in range(0, n, config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            rng = sample_rng(config.seed, 2, epoch, b0)
            clean = dataset[idx]
            sigmas = rng.uniform(*sigma_range, size=len(idx))
            noisy = clean + sigmas[:, None, None] * rng.standard_normal(clean.shape)
            target = noisy - clean

            def residual(grad_h):
                return grad_h - target  # = -(D(x) - clean)

            with np.errstate(all="ignore"):
                _, e, grads = rg.grad_then_weights_vjp(reg, noisy, residual)
                loss = 0.5 * float(np.sum(e * e)) / len(idx)
                g = _flat(grads) / len(idx)
                theta = opt.step(theta, g)
            if not (np.isfinite(loss) and np.all(np.isfinite(theta))):
                _abort(record, f"non-finite pre-training loss in epoch {epoch + 1}")
            losses.append(loss)
            reg = reg.with_weights(weights.from_flat(theta))
        record.epoch_losses.append(float(np.mean(losses)))
        record.skipped.append(0)
        if validation is not None:
            _, den = denoising_mse(reg, np.asarray(validation), 25.0 / 255.0, seed=config.seed)
            record.val_mse.append(den)
            record.val_psnr.append(10 * math.log10(1.0 / den) if den > 0 else math.inf)
        record.epoch_seconds.append(time.perf_counter() - start)
        log.info("pretrain epoch %d loss %.6g", epoch + 1, record.epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, reg.weights, record)
    return reg.weights, record


# DEQ training ---------------------------------------------------------------------------

def validation_problems(images, spec, seed, sigma_range=(0.0, 0.0)):
    """Fixed problems for held-out images (independent of the training stream)."""
    return [spec.make_problem(x, sample_rng(seed, 99, i), sigma_range) for i, x in enumerate(images)]


def evaluate(problems, images, reg, solver_config):
    """Mean per-pixel MSE and mean PSNR of the reconstructions (``reg=None``: tau = 0)."""
    errs, ps = [], []
    for problem, x_gt in zip(problems, images):
        x_bar = sv.run_forward(problem, reg, solver_config).x_bar
        errs.append(mse(x_bar, x_gt))
        ps.append(psnr(x_bar, x_gt))
    return float(np.mean(errs)), float(np.mean(ps))


def train_deq(dataset, spec, config, weights, kind="lsr", tau=1.0, validation=None, on_epoch=None):
    """Jacobian-free deep-equilibrium training.

    For each sample: simulate a problem, run the forward pass to a fixed point,
    and (when the run converged) accumulate the JFB gradient; the batch mean
    drives one Adam step. Non-converged samples are skipped and counted.
    ``validation`` is an optional (N, H, W) array of held-out images.
    Returns ``(weights, record)``.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    reg = rg.Regularizer(kind, weights, tau)
    theta = weights.flat()
    opt = Adam(theta.size, config.learning_rate)
    record = TrainRecord()
    val_problems = None
    if validation is not None and len(validation):
        val_problems = validation_problems(validation, spec, config.seed, config.noise_sigma_range)
    n = len(dataset)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = sample_rng(config.seed, 3, epoch).permutation(n)
        losses, skipped = [], 0
        for b0 in range(0, n, config.batch_size):
            batch_grads = []
            for i in order[b0:b0 + config.batch_size]:
                rng = sample_rng(config.seed, 4, epoch, int(i))
                x_gt = dataset[i]
                problem = spec.make_problem(x_gt, rng, config.noise_sigma_range)
                with np.errstate(all="ignore"):
                    res = sv.run_forward(problem, reg, config.solver)
                if not res.converged or not np.all(np.isfinite(res.x_bar)):
                    skipped += 1
                    log.info("sample %d skipped (residual %.3g)", i, res.final_residual)
                    continue
                losses.append(mse_loss(res.x_bar, x_gt))
                batch_grads.append(jfb_gradient(problem, reg, res.x_bar, x_gt, res.gamma))
            if batch_grads and config.learning_rate > 0:
                with np.errstate(all="ignore"):
                    theta = opt.step(theta, np.mean(batch_grads, axis=0))
                if not np.all(np.isfinite(theta)):
                    _abort(record, f"non-finite weights in epoch {epoch + 1}")
                reg = reg.with_weights(weights.from_flat(theta))
        record.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        record.skipped.append(skipped)
        if val_problems is not None:
            m, p = evaluate(val_problems, validation, reg, config.solver)
            record.val_mse.append(m)
            record.val_psnr.append(p)
        record.epoch_seconds.append(time.perf_counter() - start)
        log.info("deq epoch %d loss %.6g skipped %d", epoch + 1, record.epoch_losses[-1], skipped)
        if on_epoch is not None:
            on_epoch(epoch + 1, reg.weights, record)
    return reg.weights, record


def flat_to_dict(weights, vector):
    return OrderedDict(weights.from_flat(vector).params)
