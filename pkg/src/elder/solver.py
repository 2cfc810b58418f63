"""Proximal gradient descent on f(x) = g(x) + tau h_theta(x).

One iteration is ``x_k = prox_{gamma g}(x_{k-1} - gamma tau grad h(x_{k-1}))``.
With line search on, a trial step is accepted when

    f(x_{k-1}) - f(x_k) >= (rho / gamma) ||x_k - x_{k-1}||^2,

otherwise gamma shrinks by ``beta``. After an accepted step the next iteration
first retries ``gamma / beta`` (capped at ``gamma0``) unless
``expand_step=False``. Iteration stops when
``||x_k - x_{k-1}|| / ||x_{k-1}|| < epsilon`` (denominator 1 when the previous
iterate is zero) or after ``max_iters`` steps.

For inpainting g is the indicator of ``{P x = y}``; iterates are feasible after
the first prox, so f reduces to ``tau h`` there.

``reg=None`` means tau = 0 (data term only).
"""

import csv
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import forward_model as fm
from . import regularizer as rg
from .errors import ConfigError, StepFailure


@dataclass(frozen=True)
class SolverConfig:
    gamma0: float = 1.0
    beta: float = 0.5
    rho: float = 0.1
    epsilon: float = 1e-2
    max_iters: int = 100
    line_search: bool = True
    max_backtracks: int = 30
    expand_step: bool = True

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise ConfigError("gamma0 must be positive")
        if not 0 < self.beta < 1:
            raise ConfigError("beta must lie in (0, 1)")
        if not 0 < self.rho < 0.5:
            raise ConfigError("rho must lie in (0, 1/2)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.max_iters < 1 or self.max_backtracks < 1:
            raise ConfigError("max_iters and max_backtracks must be positive")

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class SolverState:
    x: np.ndarray
    k: int = 0
    gamma: float = 1.0
    f: float = float("nan")
    grad: Optional[np.ndarray] = None
    f_history: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)
    gamma_history: list = field(default_factory=list)


@dataclass
class FixedPointResult:
    x_bar: np.ndarray
    converged: bool
    iterations: int
    final_residual: float
    f_history: list
    residual_history: list
    gamma_history: list
    gamma: float
    backtracks: list
    failure: Optional[str] = None

    def trace_rows(self):
        """(k, f, relative residual, gamma) per iteration; k = 0 is the start point."""
        rows = [(0, self.f_history[0], None, None)]
        for k, (f, r, g) in enumerate(zip(self.f_history[1:], self.residual_history, self.gamma_history), 1):
            rows.append((k, f, r, g))
        return rows


def _tau(reg):
    return 0.0 if reg is None else reg.tau


def smooth_value_and_grad(reg, x):
    """tau h(x) and its gradient (zeros for ``reg=None``)."""
    if reg is None:
        return 0.0, np.zeros_like(x)
    h, g = rg.value_and_grad(reg, x)
    return reg.tau * h, reg.tau * g


def objective(problem, reg, x):
    """f(x) = g(x) + tau h(x)."""
    g = fm.data_fidelity(problem, x)
    if reg is None or not np.isfinite(g):
        return g
    return g + reg.tau * rg.value(reg, x)


def pgm_step(problem, reg, state, gamma, smooth_grad=None):
    """prox_{gamma g}(x - gamma tau grad h(x)) for ``state`` (a SolverState or an array)."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    x = state.x if isinstance(state, SolverState) else np.asarray(state, dtype=np.float64)
    if smooth_grad is None:
        smooth_grad = smooth_value_and_grad(reg, x)[1]
    return fm.prox_data(problem.model, x - gamma * smooth_grad, gamma, problem.y)


def _evaluate(problem, reg, x):
    g = fm.data_fidelity(problem, x)
    s, grad = smooth_value_and_grad(reg, x)
    return g + s, grad


def sufficient_decrease(f_old, f_new, x_old, x_new, gamma, rho):
    return f_old - f_new >= (rho / gamma) * float(np.sum((x_new - x_old) ** 2))


def backtrack(problem, reg, state, config, gamma=None):
    """Shrink gamma from ``gamma`` (default ``state.gamma``) until sufficient decrease.

    Returns ``(x_new, gamma, f_new, grad_new, trials)`` where ``grad_new`` is the
    smooth-term gradient at ``x_new`` and ``trials`` the number of shrinks.
    Raises :class:`StepFailure` after ``config.max_backtracks`` shrinks.
    """
    gamma = state.gamma if gamma is None else gamma
    if state.grad is None:
        state.f, state.grad = _evaluate(problem, reg, state.x)
    cand = None
    for j in range(config.max_backtracks + 1):
        cand = pgm_step(problem, reg, state, gamma, smooth_grad=state.grad)
        f_new, g_new = _evaluate(problem, reg, cand)
        if sufficient_decrease(state.f, f_new, state.x, cand, gamma, config.rho):
            return cand, gamma, f_new, g_new, j
        if j < config.max_backtracks:
            gamma *= config.beta
    raise StepFailure(f"no sufficient decrease after {config.max_backtracks} backtracks "
                      f"(gamma={gamma:.3e})", candidate=cand, gamma=gamma)


def relative_change(x_new, x_old):
    denom = float(np.linalg.norm(x_old))
    return float(np.linalg.norm(x_new - x_old)) / (denom if denom > 0 else 1.0)


def run_forward(problem, reg, config=SolverConfig(), x0=None, callback=None):
    """Iterate the PGM map until the relative change drops below epsilon."""
    x = problem.model.initial_estimate(problem.y) if x0 is None else np.array(x0, dtype=np.float64)
    state = SolverState(x=x, gamma=config.gamma0)
    state.f, state.grad = _evaluate(problem, reg, x)
    state.f_history.append(state.f)
    backtracks = []
    converged, failure, residual = False, None, float("inf")

    for k in range(1, config.max_iters + 1):
        if config.line_search:
            try:
                x_new, gamma, f_new, g_new, trials = backtrack(problem, reg, state, config)
            except StepFailure as exc:
                failure = str(exc)
                break
            backtracks.append(trials)
        else:
            gamma = config.gamma0
            x_new = pgm_step(problem, reg, state, gamma, smooth_grad=state.grad)
            f_new, g_new = _evaluate(problem, reg, x_new)
        residual = relative_change(x_new, state.x)
        state.x, state.f, state.grad, state.k = x_new, f_new, g_new, k
        state.f_history.append(f_new)
        state.residual_history.append(residual)
        state.gamma_history.append(gamma)
        if callback is not None:
            callback(state)
        if config.line_search:
            state.gamma = min(gamma / config.beta, config.gamma0) if config.expand_step else gamma
        if residual < config.epsilon:
            converged = True
            break

    last_gamma = state.gamma_history[-1] if state.gamma_history else config.gamma0
    return FixedPointResult(
        x_bar=state.x, converged=converged, iterations=state.k, final_residual=residual,
        f_history=state.f_history, residual_history=state.residual_history,
        gamma_history=state.gamma_history, gamma=last_gamma, backtracks=backtracks, failure=failure)


def fixed_point_gap(problem, reg, x_bar, gamma):
    """||x - T(x)|| / ||x|| for the PGM map T at step ``gamma``."""
    return relative_change(pgm_step(problem, reg, x_bar, gamma), x_bar)


def _fmt(v):
    return "" if v is None else repr(float(v)) if not isinstance(v, int) else str(v)


def write_trace(result, path):
    """CSV with header ``k,f,residual,gamma`` (blank residual/gamma on row 0)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "f", "residual", "gamma"])
        for row in result.trace_rows():
            w.writerow([_fmt(v) for v in row])
