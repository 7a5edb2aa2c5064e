"""Concrete renormalization scales at eps = 0.5 and the audit of C1 to C7."""

from rwre.renorm import make_scale_sequence, verify_conditions, xi_k

seq = make_scale_sequence(0.5, 200)
print(f"K = {seq.K}, L = {seq.L}, N_0 = {seq.N0}")
for row in seq.to_rows()[:4]:
    print({k: (v if v < 10**12 else f"~10^{len(str(v)) - 1}") for k, v in row.items()})
audit = verify_conditions(seq)
for name, c in audit.conditions.items():
    print(name, "holds" if c["holds"] else "fails")
print("C7 product", audit.conditions["C7"]["product"])
print("Xi_1, Xi_10, Xi_1000:", xi_k(1), xi_k(10), float(xi_k(1000)))
