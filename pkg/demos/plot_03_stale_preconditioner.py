"""
Looking at a stale preconditioner
=================================

Keep every v the run produced, then look at its spread and at how much the
gradient moved while v stayed fixed.
"""

import numpy as np

from dp2.diagnostics import lemma1_check, snapshot_preconditioner
from dp2.harness import RunConfig, run_train

cfg = RunConfig(synth_n=3000, synth_d=200, batch_size=32, epochs=3, sigma=1.0,
                optimizer="dp2-rmsprop", s1=20, clip_sgd=1.0, clip_adaptive=1.0,
                track_hs=True, seed=1)
m = run_train(cfg, out_dir=False, keep_v=True)

v = m.v_snapshots[-1]
snap = snapshot_preconditioner(v, t=len(m.v_snapshots))
print("quantiles of v:", {k: f"{x:.2e}" for k, x in snap.quantiles.items()})

# E[v_j] stays under C^2 + sigma^2 C^2 / (s b^2)
print(lemma1_check(m.v_snapshots[cfg.s1:], 1.0, 1.0, cfg.s1, cfg.batch_size))

hs = m.summary["diagnostics"]["hs"]
print("h(s) on clean gradients, running max:", round(hs["running_max"], 3))
print("same ratio from the released gradients, median:", round(float(np.median(hs["noisy_ratios"])), 3))
# the clean numbers read raw gradients, so a run that logs them is no longer private
