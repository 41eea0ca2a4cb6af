"""
=============================================
Learned M̂ against the generative oracle
=============================================

With λ frozen at 0 the classifier only sees environmental features, so M̂
can be compared with the transition matrix of the Bayes environmental
labellers of the generator.  On the default spec the target association is
a derangement, so the oracle trace is 0.

The learned hard trace does not track it: it drifts to 0 or 1 depending on
the seed.  Nothing in the objective ties the two environmental labellers to
the true environments without target labels.
"""

# %%

import dataclasses

import numpy as np

from redlab.synthgen import SynthSpec, oracle_transition
from redlab.trainer import RunConfig, run_variant

spec, cfg = SynthSpec(), RunConfig()
print("oracle M =\n", np.round(oracle_transition(spec).m, 3))

# %%

for seed in range(3):
    _, records, acc = run_variant(cfg, spec, {"lambda_fixed": 0.0}, seed)
    last = np.mean([r.trace_hard for r in records if r.epoch == records[-1].epoch])
    oracle = oracle_transition(dataclasses.replace(spec, seed=seed)).trace
    print(f"seed {seed}: learned hard trace {last:.3f}  oracle {oracle:.3f}  acc {acc:.3f}")
