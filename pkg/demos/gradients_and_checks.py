"""
Gradients of explicit regularizers
==================================

Build a small network, wrap it as an LSR, RED and DSV regularizer, and
compare each analytic gradient against central differences.
"""

import numpy as np

from elder import autodiff as ad
from elder import gradcheck as gc
from elder import regularizer as rg

rng = np.random.default_rng(0)
x = rng.random((8, 8))

# a tiny random network with nonzero biases
weights = gc.tiny_weights(0)

for kind in ("lsr", "red", "dsv"):
    reg = rg.Regularizer(kind, weights)
    analytic = rg.grad(reg, x)
    fd = ad.finite_difference_gradient(lambda z: rg.value(reg, z), x, 1e-5)
    print(f"{kind}: h(x) = {rg.value(reg, x):+.4f}   rel err = {gc.relative_error(analytic, fd):.1e}")

# RED's exact gradient differs from the x - G(x) shortcut unless G is
# homogeneous with a symmetric Jacobian
red = rg.Regularizer("red", weights)
gap = gc.relative_error(rg.red_shortcut_gradient(red, x), rg.grad(red, x))
print(f"RED shortcut vs exact gradient: {gap:.2f} relative difference")

# the whole derivative suite, as the gradcheck command prints it
print(gc.format_report(gc.run_suite(seed=0)))
