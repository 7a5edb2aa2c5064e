"""Simulated velocity against the averaged local drift lambda = eps^2 (d = 2).

The residual v - lambda should stay within eps^2/d at every eps.
"""

from rwre.environment import build_two_point_law, law_lambda
from rwre.walker import estimate_velocity

print(f"{'eps':>6} {'lambda':>9} {'v_hat':>9} {'stderr':>9} {'bound':>7}")
for i, eps in enumerate([0.1, 0.15, 0.2, 0.25]):
    law = build_two_point_law(2, eps, eps * eps, seed=i)
    v = estimate_velocity(law, n_steps=3000, n_walks=3000, stream_offset=i * 3000)
    print(f"{eps:6.2f} {law_lambda(law):9.5f} {v.mean:9.5f} {v.stderr:9.5f} {eps * eps / 2:7.4f}")
