"""Differentiating through an SGD step.

The meta-update needs the gradient of a loss evaluated *after* an inner
gradient step, taken with respect to the parameters *before* it. This demo
builds that on a quadratic where the answer is known in closed form, then
runs the full numerical oracle suite that guards the engine.

    python demos/01_gradients_through_a_step.py
"""

import numpy as np

from mt3 import autodiff as ad
from mt3 import verify
from mt3.autodiff import Tensor

rng = np.random.default_rng(0)
A = rng.normal(size=(5, 5))
A = A @ A.T / 5 + np.eye(5)  # inner loss 0.5 t'At, gradient At
c = rng.normal(size=(5, 1))
alpha = 0.1

with ad.precision("float64"):
    theta = Tensor(rng.normal(size=(5, 1)), requires_grad=True)
    inner = ad.affine(ad.reduce_sum(theta * ad.matmul(Tensor(A), theta)), 0.5)
    # create_graph keeps the inner gradient differentiable
    (g,) = ad.grad(inner, [theta], create_graph=True)
    phi = ad.sgd_step({"t": theta}, {"t": g}, alpha)["t"]
    outer = ad.reduce_sum((phi - Tensor(c)) * (phi - Tensor(c)))
    (meta,) = ad.grad(outer, [theta])

# phi = (I - aA) theta, so d outer / d theta = 2 (I - aA)' (phi - c)
J = np.eye(5) - alpha * A
closed = 2 * J.T @ (J @ theta.data - c)
print("second-order meta-gradient vs closed form, max abs diff:",
      float(np.max(np.abs(meta.data - closed))))

# first-order mode treats the step as a constant and drops the (I - aA) factor
with ad.precision("float64"):
    t1 = Tensor(theta.data, requires_grad=True)
    (g1,) = ad.grad(ad.affine(ad.reduce_sum(t1 * ad.matmul(Tensor(A), t1)), 0.5), [t1])
    phi1 = ad.sgd_step({"t": t1}, {"t": g1}, alpha)["t"]
    (fo,) = ad.grad(ad.reduce_sum((phi1 - Tensor(c)) * (phi1 - Tensor(c))), [t1])
print("first-order vs second-order difference norm:", float(np.linalg.norm(fo.data - meta.data)))

print("\nrunning the oracle suite (finite differences for every op, HVPs, a 41-parameter")
print("meta problem, loss and format properties) ...")
results = verify.run_all(trials=5, second_order_trials=1)
bad = [r.name for r in results if not r.passed]
worst = max((r for r in results if r.value is not None), key=lambda r: r.value / r.tolerance)
print(f"{len(results) - len(bad)}/{len(results)} checks pass; "
      f"closest to its tolerance: {worst.name} ({worst.value:.2e} vs {worst.tolerance:g})")

# a sign flip in one primitive's backward is caught by its check
with ad.inject_sign_error("matmul"):
    flipped = [r.name for r in verify.op_gradient_checks(trials=2, ops=["matmul", "relu"])
               if not r.passed]
print("with matmul's backward negated, failing checks:", flipped)
