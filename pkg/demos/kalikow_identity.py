"""Kalikow's environment reproduces the annealed Green function exactly.

Enumerates every environment on a 3x3 box under a two-point law, builds
Kalikow's auxiliary walk and compares both sides of the identity.
"""

from rwre.environment import build_two_point_law
from rwre.kalikow import kalikow_environment, verify_kalikow_corollary, verify_kalikow_formula
from rwre.lattice import Rect, make_explicit

law = build_two_point_law(2, 0.2, 0.04, transverse_noise=0.05, seed=1)
box = make_explicit(Rect([-1, -1], [1, 1]).enumerate())

kal = kalikow_environment(law, box, [0, 0])
print("Kalikow drift along e1 at each site:")
for site, drift in zip(box.sites.tolist(), kal.drift[:, 0]):
    print(f"  {site}: {drift:+.6f}")
print("formula  :", verify_kalikow_formula(law, box, [0, 0]))
print("corollary:", verify_kalikow_corollary(law, box, [0, 0]))
