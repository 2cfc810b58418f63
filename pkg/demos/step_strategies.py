"""
Backtracking versus fixed step sizes
====================================

On a convex quadratic (Gaussian deblurring plus a linear LSR) the Lipschitz
constant is known, so the reference step 1/(tau L) is available. Backtracking
from any initial step matches it; a step ten times smaller is much slower.
"""

from elder import cli

problem, reg, lipschitz = cli.toy_problem()
gamma_ref = 1.0 / (reg.tau * lipschitz)
summary, _ = cli.bench_strategies(problem, reg, gamma_ref, epsilon=1e-6, max_iters=5000, threshold=0.01)

print(f"{'strategy':14s}{'gamma0':>8s}{'iters':>7s}{'final f':>14s}{'to 1%':>7s}")
for name, gamma0, iters, converged, final_f, hit in summary:
    print(f"{name:14s}{gamma0:8.2f}{iters:7d}{final_f:14.8f}{hit:7d}")
