"""
What a training run spends
==========================

Every private step releases one noisy gradient. The accountant turns those
releases into an (epsilon, delta) pair.
"""

from dp2.privacy import calibrate_sigma, compute_epsilon

n, b, delta = 10_000, 64, 1e-5
q = b / n
steps_per_epoch = -(-n // b)

# epsilon after 5, 20 and 100 epochs at noise multiplier 1
for epochs in (5, 20, 100):
    T = epochs * steps_per_epoch
    print(f"{epochs:4d} epochs  T={T:6d}  eps={compute_epsilon(q, 1.0, T, delta):.3f}")

# delayed preconditioning releases exactly one gradient per step, so its cost
# is that of DP-SGD; refreshing from a second query costs more
T = 20 * steps_per_epoch
s = 78
extra = T - -(-T // s)
print("DP-SGD / DP2      ", round(compute_epsilon(q, 1.0, T, delta), 3))
print("second-query kind ", round(compute_epsilon(q, 1.0, T + extra, delta), 3))

# the other direction: pick sigma for a target budget
for target in (1.0, 3.0, 8.0):
    print(f"eps={target}: sigma={calibrate_sigma(target, delta, q, T):.3f}")
