"""
Private optimizers side by side
===============================

Same data, same noise multiplier, same number of steps. Only the update rule
changes.
"""

from dp2.harness import RunConfig, run_train

common = dict(synth_n=4000, synth_d=400, batch_size=64, epochs=10, sigma=1.0,
              eps_adapt=1e-3, eval_every=10 ** 9, seed=0)
methods = {
    "dpsgd": dict(lr_sgd=1.0, clip_sgd=0.5),
    "dp-rmsprop": dict(lr_adaptive=0.03, clip_sgd=0.1),
    "dp2-rmsprop": dict(lr_sgd=1.0, lr_adaptive=0.1, clip_sgd=0.5, clip_adaptive=5.0, s1=31),
    "ablation2": dict(lr_sgd=1.0, lr_adaptive=0.003, clip_sgd=0.5, s1=31),
}

for name, kw in methods.items():
    m = run_train(RunConfig(optimizer=name, **common, **kw), out_dir=False)
    s = m.summary
    print(f"{name:12s} train loss {s['final']['train_loss']:.4f}  "
          f"test acc {s['final']['test_metric']:.3f}  eps {s['privacy']['epsilon']:.2f}")

# a single seed is anecdote; the harness sweep gives means and spreads
# dp2 sweep --set optimizer=dp2-rmsprop --grid s=8,31,125 --seeds 0,1,2,3,4
