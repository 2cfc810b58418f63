"""Measurement operators, their adjoints and the proximal maps of the data term.

Four models are supported:

* :class:`BlurDownsample` -- ``A = S H``: circular blur ``H`` followed by
  keeping every ``d``-th pixel (``S``).
* :class:`FourierMask` -- ``A = B F``: orthonormal 2-D DFT followed by a binary
  frequency mask ``B``. Measurements are complex.
* :class:`InpaintMask` -- ``A = P``: binary pixel mask; the data term is the
  indicator of ``{x : P x = y}``.
* :class:`GenericLinear` -- dense matrix acting on the flattened image.

Inner products on complex measurement spaces are ``Re <u, v>``, so adjoints
map back to real images. Measurements always have the full grid shape for the
mask models (unobserved entries are zero).

FFT convention: ``numpy.fft`` with unnormalized forward and 1/n inverse
transform for the blur (``H = ifft2(M * fft2(.))`` with ``M = fft2(kernel)``),
and ``norm="ortho"`` for :class:`FourierMask`, so that ``F^H = F^{-1}`` is the
inverse transform and the closed-form prox is exact.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import NumericError, ShapeError


def _as_image(x, shape):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(shape):
        raise ShapeError(f"expected image of shape {tuple(shape)}, got {x.shape}")
    return x


def real_inner(u, v):
    return float(np.real(np.vdot(u, v)))


# kernels and masks -------------------------------------------------------------

def delta_kernel(size=1):
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


def uniform_kernel(size=3):
    return np.full((size, size), 1.0 / size ** 2)


def gaussian_kernel(size=7, sigma=1.6):
    """Normalized isotropic Gaussian (a shrunk stand-in for a 25x25, sigma=1.6 blur)."""
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (t / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def random_inpaint_mask(shape, p_missing, seed=0):
    """Boolean keep-mask: each pixel is missing with probability ``p_missing``."""
    if not 0.0 <= p_missing <= 1.0:
        raise ValueError("p_missing must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    return rng.random(shape) >= p_missing


def symmetrize_mask(mask):
    """Smallest superset of ``mask`` invariant under k -> -k (mod grid)."""
    mask = np.asarray(mask, dtype=bool)
    flipped = np.roll(mask[::-1, ::-1], (1, 1), axis=(0, 1))
    return mask | flipped


def is_conjugate_symmetric(mask):
    mask = np.asarray(mask, dtype=bool)
    return np.array_equal(mask, np.roll(mask[::-1, ::-1], (1, 1), axis=(0, 1)))


def radial_mask(shape, ratio):
    """Pseudo-radial sampling pattern on an unshifted DFT grid.

    Straight lines through DC at evenly spaced angles; the number of lines
    grows until the sampled fraction reaches ``ratio``. A desk-scale
    approximation of radial MRI sampling; the achieved fraction is
    ``mask.mean()``.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    h, w = shape
    cy, cx = h // 2, w // 2
    radius = np.hypot(h, w)
    t = np.linspace(-radius, radius, int(4 * radius) + 1)
    mask = np.zeros(shape, dtype=bool)
    for lines in range(1, 4 * max(h, w)):
        mask = np.zeros(shape, dtype=bool)
        for theta in np.arange(lines) * np.pi / lines:
            rows = np.round(cy + t * np.sin(theta)).astype(int)
            cols = np.round(cx + t * np.cos(theta)).astype(int)
            ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
            mask[rows[ok], cols[ok]] = True
        mask = symmetrize_mask(np.fft.ifftshift(mask))
        if mask.mean() >= ratio:
            break
    return mask


# models -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BlurDownsample:
    """``y = S H x``; ``kernel`` is centered and circularly embedded."""

    kernel: np.ndarray
    factor: int
    image_shape: tuple
    name: str = field(default="sisr", init=False)

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        h, w = self.image_shape
        if k.ndim != 2 or k.shape[0] > h or k.shape[1] > w:
            raise ShapeError(f"kernel of shape {k.shape} does not fit image {self.image_shape}")
        if not np.all(np.isfinite(k)):
            raise ValueError("kernel has non-finite entries")
        if self.factor < 1 or h % self.factor or w % self.factor:
            raise ShapeError(f"image extents {self.image_shape} not divisible by d={self.factor}")
        big = np.zeros((h, w))
        big[:k.shape[0], :k.shape[1]] = k
        big = np.roll(big, (-(k.shape[0] // 2), -(k.shape[1] // 2)), axis=(0, 1))
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "image_shape", (h, w))
        object.__setattr__(self, "otf", np.fft.fft2(big))

    @property
    def measurement_shape(self):
        d = self.factor
        return (self.image_shape[0] // d, self.image_shape[1] // d)

    def blur(self, x):
        return np.real(np.fft.ifft2(self.otf * np.fft.fft2(x)))

    def blur_adjoint(self, x):
        return np.real(np.fft.ifft2(np.conj(self.otf) * np.fft.fft2(x)))

    def forward(self, x):
        x = _as_image(x, self.image_shape)
        d = self.factor
        return self.blur(x)[::d, ::d].copy()

    def adjoint(self, y):
        y = _as_image(y, self.measurement_shape)
        d = self.factor
        up = np.zeros(self.image_shape)
        up[::d, ::d] = y
        return self.blur_adjoint(up)

    def _tile_sum(self, spectrum):
        d = self.factor
        h, w = self.image_shape
        return spectrum.reshape(d, h // d, d, w // d).sum(axis=(0, 2))

    def prox(self, z, gamma, y):
        """(I + g H^T S^T S H)^{-1} r with r = z + g H^T S^T y, via Woodbury.

        S H H^T S^T is circulant on the low-resolution grid with eigenvalues
        sum_tiles |M|^2 / d^2, where the sum runs over the d x d tiling of the
        high-resolution frequency grid; that leaves an element-wise division.
        """
        d2 = self.factor ** 2
        r = np.asarray(z, dtype=np.float64) + gamma * self.adjoint(y)
        m = self.otf
        num = self._tile_sum(m * np.fft.fft2(r))
        den = d2 + gamma * self._tile_sum(np.abs(m) ** 2)
        q = np.tile(num / den, (self.factor, self.factor))
        return r - gamma * np.real(np.fft.ifft2(np.conj(m) * q))

    def prox_linear(self, v, gamma):
        return self.prox(v, gamma, np.zeros(self.measurement_shape))

    def initial_estimate(self, y):
        """Shift-corrected bicubic interpolation (periodic) of ``y``."""
        d = self.factor
        h, w = self.image_shape
        rows, cols = np.meshgrid(np.arange(h) / d, np.arange(w) / d, indexing="ij")
        y = np.asarray(y, dtype=np.float64)
        return ndimage.map_coordinates(y, [rows, cols], order=3, mode="grid-wrap")


@dataclass(frozen=True, eq=False)
class FourierMask:
    """``y = B F x`` with orthonormal ``F`` and a conjugate-symmetric mask ``B``."""

    mask: np.ndarray
    name: str = field(default="csmri", init=False)

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2 or not np.all((m == 0) | (m == 1)):
            raise ValueError("frequency mask must be a 2-D array of zeros and ones")
        m = m.astype(bool)
        if not is_conjugate_symmetric(m):
            raise ValueError("frequency mask must be conjugate-symmetric (use symmetrize_mask)")
        object.__setattr__(self, "mask", m)

    @property
    def image_shape(self):
        return self.mask.shape

    @property
    def measurement_shape(self):
        return self.mask.shape

    @property
    def sampling_ratio(self):
        return float(self.mask.mean())

    def forward(self, x):
        x = _as_image(x, self.image_shape)
        return np.where(self.mask, np.fft.fft2(x, norm="ortho"), 0)

    def adjoint(self, y):
        y = np.asarray(y)
        if y.shape != self.measurement_shape:
            raise ShapeError(f"expected measurements of shape {self.measurement_shape}, got {y.shape}")
        return np.real(np.fft.ifft2(np.where(self.mask, y, 0), norm="ortho"))

    def prox(self, z, gamma, y):
        """F^H((g B^H y + F z) / (1 + g B^H B)), real part kept."""
        fz = np.fft.fft2(np.asarray(z, dtype=np.float64), norm="ortho")
        num = gamma * np.where(self.mask, y, 0) + fz
        x = np.fft.ifft2(num / (1.0 + gamma * self.mask), norm="ortho")
        return np.real(x)

    def prox_linear(self, v, gamma):
        return self.prox(v, gamma, np.zeros(self.measurement_shape, dtype=complex))

    def initial_estimate(self, y):
        """Zero-filled reconstruction A^H y."""
        return self.adjoint(y)


@dataclass(frozen=True, eq=False)
class InpaintMask:
    """``y = P x`` with the indicator data term; ``mask`` marks observed pixels."""

    mask: np.ndarray
    p_missing: float = float("nan")
    name: str = field(default="inpaint", init=False)

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2 or not np.all((m == 0) | (m == 1)):
            raise ValueError("pixel mask must be a 2-D array of zeros and ones")
        object.__setattr__(self, "mask", m.astype(bool))

    @property
    def image_shape(self):
        return self.mask.shape

    @property
    def measurement_shape(self):
        return self.mask.shape

    def forward(self, x):
        x = _as_image(x, self.image_shape)
        return np.where(self.mask, x, 0.0)

    def adjoint(self, y):
        y = _as_image(y, self.measurement_shape)
        return np.where(self.mask, y, 0.0)

    def prox(self, z, gamma, y):
        """Projection onto {P x = y}: y on observed pixels, z elsewhere."""
        return np.where(self.mask, np.asarray(y, dtype=np.float64), np.asarray(z, dtype=np.float64))

    def prox_linear(self, v, gamma):
        return np.where(self.mask, 0.0, np.asarray(v, dtype=np.float64))

    def initial_estimate(self, y):
        return np.where(self.mask, y, 0.0)


@dataclass(frozen=True, eq=False)
class GenericLinear:
    """Dense ``A`` acting on the row-major flattened image."""

    matrix: np.ndarray
    image_shape: tuple
    name: str = field(default="generic", init=False)

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=np.float64)
        n = int(np.prod(self.image_shape))
        if a.ndim != 2 or a.shape[1] != n:
            raise ShapeError(f"matrix of shape {a.shape} cannot act on images of shape {self.image_shape}")
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "image_shape", tuple(self.image_shape))

    @property
    def measurement_shape(self):
        return (self.matrix.shape[0],)

    def forward(self, x):
        return self.matrix @ _as_image(x, self.image_shape).ravel()

    def adjoint(self, y):
        y = _as_image(y, self.measurement_shape)
        return (self.matrix.T @ y).reshape(self.image_shape)

    def prox(self, z, gamma, y):
        a = self.matrix
        lhs = np.eye(a.shape[1]) + gamma * (a.T @ a)
        rhs = np.asarray(z, dtype=np.float64).ravel() + gamma * (a.T @ np.asarray(y, dtype=np.float64))
        return np.linalg.solve(lhs, rhs).reshape(self.image_shape)

    def prox_linear(self, v, gamma):
        return self.prox(v, gamma, np.zeros(self.measurement_shape))

    def initial_estimate(self, y):
        return self.adjoint(y)


MODELS = (BlurDownsample, FourierMask, InpaintMask, GenericLinear)


@dataclass(frozen=True, eq=False)
class Problem:
    model: object
    y: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        if np.shape(self.y) != tuple(self.model.measurement_shape):
            raise ShapeError(f"measurements of shape {np.shape(self.y)} do not match model "
                             f"output {self.model.measurement_shape}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    @property
    def is_indicator(self):
        return isinstance(self.model, InpaintMask)


# operations ------------------------------------------------------------------------

def apply_forward(model, x):
    return model.forward(x)


def apply_adjoint(model, y):
    return model.adjoint(y)


def simulate(model, x_gt, sigma, seed=0):
    """Measurements ``A x_gt + e`` with ``e`` white Gaussian of std ``sigma``.

    Noise only touches observed entries of the mask models; for complex
    measurements the real and imaginary parts each get std ``sigma / sqrt(2)``.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    y = model.forward(x_gt)
    if sigma > 0:
        rng = np.random.default_rng(seed)
        if np.iscomplexobj(y):
            e = (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)) * (sigma / np.sqrt(2))
        else:
            e = sigma * rng.standard_normal(y.shape)
        if isinstance(model, (FourierMask, InpaintMask)):
            e = np.where(model.mask, e, 0)
        y = y + e
    return Problem(model, y, float(sigma))


def data_fidelity(problem, x):
    """g(x): 1/2 ||y - A x||^2, or the feasibility indicator (0 / inf) for inpainting."""
    model = problem.model
    if isinstance(model, InpaintMask):
        return 0.0 if np.array_equal(np.where(model.mask, x, 0.0), problem.y) else float("inf")
    r = problem.y - model.forward(x)
    return 0.5 * float(np.real(np.vdot(r, r)))


def prox_data(model, z, gamma, y):
    """argmin_x 1/2 ||x - z||^2 + gamma g(x).

    Models without a closed form fall back to :func:`prox_cg_oracle` at
    ``tol=1e-10``.
    """
    if not isinstance(model, InpaintMask) and gamma <= 0:
        raise ValueError("gamma must be positive")
    prox = getattr(model, "prox", None)
    if prox is None:
        return prox_cg_oracle(model, z, gamma, y, tol=1e-10)
    return prox(z, gamma, y)


def prox_linear(model, v, gamma):
    """Apply the z-Jacobian of ``prox_data`` (a symmetric linear map) to ``v``."""
    return model.prox_linear(v, gamma)


def conjugate_gradient(apply_op, b, tol=1e-10, max_iter=None, x0=None):
    """Solve ``apply_op(x) = b`` for a symmetric positive definite operator.

    Stops when ``||r|| <= tol * ||b||``. Raises :class:`NumericError` carrying
    the final relative residual when ``max_iter`` is exhausted.
    """
    b = np.asarray(b, dtype=np.float64)
    max_iter = max_iter or 10 * b.size
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply_op(x)
    p = r.copy()
    rr = float(np.vdot(r, r))
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b)
    for _ in range(max_iter):
        if np.sqrt(rr) <= tol * bnorm:
            return x
        ap = apply_op(p)
        alpha = rr / float(np.vdot(p, ap))
        x += alpha * p
        r -= alpha * ap
        rr_new = float(np.vdot(r, r))
        p = r + (rr_new / rr) * p
        rr = rr_new
    rel = np.sqrt(rr) / bnorm
    if rel <= tol:
        return x
    raise NumericError(f"conjugate gradient did not converge: relative residual {rel:.3e}", residual=rel)


def prox_cg_oracle(model, z, gamma, y, tol=1e-12, max_iter=None):
    """Solve (I + gamma A^H A) x = z + gamma A^H y by conjugate gradient."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    z = np.asarray(z, dtype=np.float64)

    def op(x):
        return x + gamma * model.adjoint(model.forward(x))

    return conjugate_gradient(op, z + gamma * model.adjoint(y), tol=tol, max_iter=max_iter)


def prox_optimality_residual(model, x, z, gamma, y):
    """||x - z + gamma A^H (A x - y)||, zero at the exact l2 prox."""
    return float(np.linalg.norm(x - z + gamma * model.adjoint(model.forward(x) - y)))
