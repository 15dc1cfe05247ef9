"""Evaluating the bound shapes on made-up inputs.

Shows how the clean-data bound coefficient grows with the poison rate,
how a Monte-Carlo Rademacher estimate compares with enumeration, and how
the balanced-gap probability shrinks like 1/sqrt(N).
"""
import math

import numpy as np

from plab.bounds import (BoundInputs, capacity_report, clean_bound_rhs, empirical_rademacher,
                         gap_probability_exact, poison_bound_rhs)

print("alpha  coefficient  clean bound")
for a in (0.0, 0.02, 0.05, 0.1, 0.3, 0.5):
    rep = clean_bound_rhs(BoundInputs(N=2400, alpha=a, emp_error=0.01, rad_neq=0.02,
                                      rad_eq=0.03))
    print(f"{a:5.2f}  {rep.extras['coefficient']:11.4f}  {rep.total:.4f}")

inp = BoundInputs(N=2400, alpha=0.1, eta_frac=0.25, epsilon=0.2, tau=0.1, emp_error=0.01,
                  emp_risk=0.05)
for form in ("plain", "doubled"):
    rep = poison_bound_rhs(inp, 0.02, form)
    print(form, {k: round(v, 4) for k, v in rep.terms.items()}, "total", round(rep.total, 4))

print(capacity_report(BoundInputs(N=2400, W=256, D=1, m=4, n=256)).to_json())

vals = np.random.default_rng(0).random((5, 12))
exact = empirical_rademacher(vals)
mc = empirical_rademacher(vals, num_sigma=4000, method="mc")
print(f"Rademacher exact {exact.value:.5f}, MC {mc.value:.5f} +- {mc.stderr:.5f}")

for N in (10, 100, 10**4, 10**6):
    p = gap_probability_exact(N, 1, 1)
    print(f"N={N:>8d}  P={p:.6f}  P*sqrt(N)={p * math.sqrt(N):.4f}")
