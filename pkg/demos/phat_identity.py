"""Right-exit probability of a slab by absorption and by the Green drift formula."""

import numpy as np

from rwre.environment import build_two_point_law
from rwre.green import phat

law = build_two_point_law(2, 0.2, 0.04, transverse_noise=0.05, seed=3)
for env_id in range(5):
    r = phat(law, [0, 0], 8, env_id=env_id)
    print(f"env {env_id}: direct {r.direct:.12f}  1/2 + G/(2L) {r.green_form:.12f}  "
          f"gap {r.discrepancy:.1e}")

x = np.array([3, -2])
r = phat(law, x, 8, transverse="absorbing", leakage_tol=1e-10)
print(f"absorbing window: [{r.lower:.10f}, {r.upper:.10f}] with cap {r.cap}")
