"""
=============================================
Checking the target-error bound exactly
=============================================

On a finite input space every error is a weighted sum, so each line of the
bound can be computed and compared directly.
"""

# %%
# A hand-built instance
# ---------------------

import numpy as np

from redlab.boundlab import (FiniteInstance, exact_transition, h_tilde_divergence,
                             run_campaign, summary_line, verify_bound_chain)

inst = FiniteInstance(
    w_s=[0.4, 0.3, 0.2, 0.1],
    w_t=[0.1, 0.2, 0.3, 0.4],
    hc=[0, 1, 0, 1],
    hes=[0, 0, 1, 1],
    het=[0, 1, 1, 0],
    lam=0.3,
    f=[0, 1, 1, 1],
)
print("M =\n", exact_transition(inst).m)
print("d_H~ =", h_tilde_divergence(inst.w_s, inst.w_t))   # total variation here

rep = verify_bound_chain(inst)
print(f"eps_T(f) = {rep.lhs:.4f} <= {rep.rhs:.4f}   slack {rep.slack:.4f}")
print("steps:", rep.steps_ok)

# %%
# A random campaign
# -----------------
#
# Same check over many random instances.  The CLI equivalent is
# ``python -m redlab verify-bound --instances 10000``.

summary = run_campaign(2000, max_n=6, seed=1)
print(summary_line(summary))
print("max identity residual", summary["max_identity_residual"])
