"""Kalikow's auxiliary environment and its exact identities.

For a finite connected domain ``B`` and a base point ``x``, Kalikow's
environment is the ratio of annealed expectations

    omega_B^x(y, e) = E[g_B(x, y) omega(y, e)] / E[g_B(x, y)].

Exact mode enumerates every environment configuration on ``B`` under the
product law, inverts ``I - Q`` for each configuration (batched dense
inverses) and accumulates weighted sums with compensation. Monte Carlo
mode samples configurations with the keyed generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import keyed
from .environment import EnvironmentLaw, ParameterError, check_condition, kappa, law_lambda, local_drift
from .green import absorb, green_row, NonEllipticError
from .lattice import CapacityError, Domain, is_connected

__all__ = [
    "DEFAULT_ENUMERATION_CAP",
    "KalikowTables",
    "KalikowEnvironment",
    "DriftBoundReport",
    "kalikow_tables",
    "kalikow_environment",
    "verify_kalikow_formula",
    "verify_kalikow_corollary",
    "kalikow_drift",
    "truncation_iterates",
    "drift_bound_report",
    "kalikow_witness",
]

DEFAULT_ENUMERATION_CAP = 2**20
_CHUNK_ENTRIES = 2**22


class _Neumaier:
    """Elementwise compensated accumulator for arrays."""

    def __init__(self, shape):
        self.s = np.zeros(shape)
        self.c = np.zeros(shape)

    def add(self, v):
        t = self.s + v
        big = np.abs(self.s) >= np.abs(v)
        self.c += np.where(big, (self.s - t) + v, (v - t) + self.s)
        self.s = t

    @property
    def value(self):
        return self.s + self.c


def _check_domain(domain: Domain) -> None:
    if not is_connected(domain.sites):
        raise ParameterError("Kalikow computations require a connected domain")


def _dense_kernels(domain: Domain, omega: np.ndarray):
    """Batched ``I - Q`` and ``R`` for configurations ``omega`` of shape (K, n, 2d)."""
    K, n, _ = omega.shape
    m = domain.boundary.shape[0]
    nb = domain.neighbors
    A = np.zeros((K, n, n))
    R = np.zeros((K, n, m))
    idx = np.arange(n)
    A[:, idx, idx] = 1.0
    for e in range(nb.shape[1]):
        col = nb[:, e]
        inner = col < n
        np.add.at(A, (slice(None), idx[inner], col[inner]), -omega[:, inner, e])
        np.add.at(R, (slice(None), idx[~inner], col[~inner] - n), omega[:, ~inner, e])
    return A, R


def _configs_exact(law: EnvironmentLaw, n: int, cap: int):
    a = law.n_atoms
    total = a**n
    if total > cap:
        raise CapacityError(
            f"exact enumeration needs {a}^{n} = {total} configurations, above the cap {cap}; "
            "use mode='mc'"
        )
    chunk = max(1, _CHUNK_ENTRIES // max(1, n * n))
    powers = a ** np.arange(n - 1, -1, -1, dtype=np.int64)
    for lo in range(0, total, chunk):
        c = np.arange(lo, min(lo + chunk, total), dtype=np.int64)
        digits = (c[:, None] // powers[None, :]) % a
        w = np.prod(law.probs[digits], axis=1)
        yield digits, w


def _configs_mc(law: EnvironmentLaw, n: int, n_samples: int, seed: int):
    chunk = max(1, _CHUNK_ENTRIES // max(1, n * n))
    cum = np.cumsum(law.probs)
    cum[-1] = 1.0
    sites = np.arange(n)
    for lo in range(0, n_samples, chunk):
        s = np.arange(lo, min(lo + chunk, n_samples), dtype=np.int64)
        h = keyed.key(seed, keyed.TAG_CONFIG, s[:, None], sites[None, :])
        digits = np.searchsorted(cum, keyed.uniform(h), side="right")
        yield digits, np.ones(s.size)


@dataclass(frozen=True)
class KalikowTables:
    """Annealed Green quantities for every base point of a domain.

    ``num[x, y, e] = E[g(x,y) omega(y,e)]``, ``den[x, y] = E[g(x,y)]`` and
    ``boundary[x, z] = E[g(x,z)]`` for boundary points ``z``. In MC mode
    the second moments needed for ratio standard errors are kept too.
    """

    domain: Domain = field(repr=False)
    num: np.ndarray = field(repr=False)
    den: np.ndarray = field(repr=False)
    boundary: np.ndarray = field(repr=False)
    mode: str
    count: int
    seed: int | None = None
    ratio_var: np.ndarray | None = field(default=None, repr=False)

    def vectors(self, xi: int) -> np.ndarray:
        return self.num[xi] / self.den[xi][:, None]


def kalikow_tables(law: EnvironmentLaw, domain: Domain, mode: str = "exact",
                   cap: int = DEFAULT_ENUMERATION_CAP, n_samples: int = 10**5,
                   seed: int | None = None) -> KalikowTables:
    """Compute :class:`KalikowTables` by enumeration or by sampling."""
    _check_domain(domain)
    n, m, d2 = domain.n_sites, domain.boundary.shape[0], 2 * law.d
    omega_atoms = law.omega_atoms
    if mode == "exact":
        gen = _configs_exact(law, n, cap)
        count = law.n_atoms**n
    elif mode == "mc":
        if n_samples < 2:
            raise ParameterError("mc mode needs at least two samples")
        seed = law.master_seed if seed is None else seed
        gen = _configs_mc(law, n, n_samples, seed)
        count = n_samples
    else:
        raise ParameterError("mode must be 'exact' or 'mc'")
    num, den, bnd = _Neumaier((n, n, d2)), _Neumaier((n, n)), _Neumaier((n, m))
    sq = None
    if mode == "mc":
        sq = [_Neumaier((n, n, d2)), _Neumaier((n, n, d2)), _Neumaier((n, n))]
    for digits, w in gen:
        om = omega_atoms[digits]
        A, R = _dense_kernels(domain, om)
        G = np.linalg.inv(A)
        wG = G * w[:, None, None]
        num.add(np.einsum("kxy,kye->xye", wG, om))
        den.add(wG.sum(axis=0))
        bnd.add(np.einsum("kxy,kyz->xz", wG, R))
        if sq is not None:
            gw = G[..., None] * om[:, None, :, :]
            sq[0].add(np.einsum("kxye,kxye->xye", gw, gw))
            sq[1].add(np.einsum("kxye,kxy->xye", gw, G))
            sq[2].add(np.einsum("kxy,kxy->xy", G, G))
    N, D, B = num.value, den.value, bnd.value
    var = None
    if mode == "mc":
        N, D, B = N / count, D / count, B / count
        s_nn, s_nd, s_dd = (a.value / count for a in sq)
        r = N / D[..., None]
        # delta method: Var(num - r den) / (n den^2)
        v = s_nn - 2 * r * s_nd + r**2 * s_dd[..., None] - (N - r * D[..., None]) ** 2
        var = np.maximum(v, 0.0) / (count - 1) / D[..., None] ** 2
    if np.any(D <= 0):
        raise NonEllipticError("E g_B(x, y) vanished, which ellipticity forbids")
    return KalikowTables(domain, N, D, B, mode, count, seed, var)


@dataclass(frozen=True)
class KalikowEnvironment:
    """Kalikow vectors ``omega_B^x(y, .)`` on the sites of ``domain``."""

    x: np.ndarray
    domain: Domain = field(repr=False)
    vectors: np.ndarray = field(repr=False)
    expected_green: np.ndarray = field(repr=False)
    provenance: dict = field(default_factory=dict)

    def probs(self, points) -> np.ndarray:
        idx = self.domain.index_of(points)
        if np.any(idx < 0):
            raise ParameterError("Kalikow environment queried outside its domain")
        return self.vectors[idx]

    @property
    def drift(self) -> np.ndarray:
        return local_drift(self.vectors)


def _source(domain: Domain, x) -> int:
    i = int(domain.index_of(np.asarray(x, dtype=np.int64))[0])
    if i < 0:
        raise ParameterError("base point must be an interior site")
    return i


def _environment_from_tables(tab: KalikowTables, x) -> KalikowEnvironment:
    i = _source(tab.domain, x)
    vec = tab.vectors(i)
    prov = {"mode": tab.mode, "configurations" if tab.mode == "exact" else "n": tab.count}
    if tab.ratio_var is not None:
        prov["stderr"] = np.sqrt(tab.ratio_var[i])
        prov["seed"] = tab.seed
    eg = np.concatenate([tab.den[i], tab.boundary[i]])
    return KalikowEnvironment(np.asarray(x, dtype=np.int64), tab.domain, vec, eg, prov)


def kalikow_environment(law: EnvironmentLaw, domain: Domain, x, mode: str = "exact",
                        cap: int = DEFAULT_ENUMERATION_CAP, n_samples: int = 10**5,
                        seed: int | None = None) -> KalikowEnvironment:
    """Kalikow's environment on ``domain`` seen from ``x``.

    Parameters
    ----------
    mode : {"exact", "mc"}
        Exact enumeration (capped at ``cap`` configurations) or
        ``n_samples`` sampled configurations; MC provenance carries a
        componentwise ``stderr`` array.
    """
    return _environment_from_tables(kalikow_tables(law, domain, mode, cap, n_samples, seed), x)


def verify_kalikow_formula(law: EnvironmentLaw, domain: Domain, x, mode: str = "exact",
                           cap: int = DEFAULT_ENUMERATION_CAP, tables: KalikowTables | None = None) -> dict:
    """Compare ``E g_B(x, y)`` with ``g_B(x, y, omega_B^x)`` on ``B`` and its boundary."""
    tab = tables if tables is not None else kalikow_tables(law, domain, mode, cap)
    kal = _environment_from_tables(tab, x)
    row = green_row(kal.vectors, domain, x)
    err = np.abs(kal.expected_green - row.values)
    return {"max_abs_error": float(err.max()), "n_points": int(err.size), "mode": tab.mode,
            "configurations": tab.count}


def verify_kalikow_corollary(law: EnvironmentLaw, domain: Domain, x, mode: str = "exact",
                             cap: int = DEFAULT_ENUMERATION_CAP,
                             tables: KalikowTables | None = None) -> dict:
    """Exit time and exit law of the annealed walk versus Kalikow's walk.

    The Kalikow side is solved by absorption (independently of Green rows).
    """
    tab = tables if tables is not None else kalikow_tables(law, domain, mode, cap)
    kal = _environment_from_tables(tab, x)
    i = _source(domain, x)
    m = domain.boundary.shape[0]
    n = domain.n_sites
    t_annealed = math.fsum(tab.den[i].tolist())
    t_kal = float(absorb(kal.vectors, domain, np.zeros(m), np.ones(n))[i])
    law_kal = absorb(kal.vectors, domain, np.eye(m))[i]
    diff = np.abs(tab.boundary[i] - law_kal)
    return {"time_error": abs(t_annealed - t_kal), "exit_law_error": float(diff.sum()),
            "exit_law_tv": 0.5 * float(diff.sum()), "expected_exit_time": t_annealed}


def _hit_probabilities(domain: Domain, om: np.ndarray, yi: int) -> np.ndarray:
    """``P_z(H_y < T_B)`` for all interior ``z``, batched over configurations."""
    K, n, _ = om.shape
    A, _ = _dense_kernels(domain, om)
    keep = np.array([j for j in range(n) if j != yi], dtype=np.intp)
    rhs = -A[:, keep, yi]  # one-step probability of landing on y
    h = np.ones((K, n))
    if keep.size:
        h[:, keep] = np.linalg.solve(A[:, keep][:, :, keep], rhs[..., None])[..., 0]
    return h


def kalikow_drift(law: EnvironmentLaw, domain: Domain, x, y, method: str = "direct",
                  cap: int = DEFAULT_ENUMERATION_CAP, tables: KalikowTables | None = None) -> np.ndarray:
    """Drift of Kalikow's walk at ``y``.

    ``method="direct"`` sums the Kalikow vector. ``method="f_formula"`` uses
    ``E[d(y) W] / E[W]`` with ``W = 1 / sum_e omega(y,e) f(y, y+e)`` and
    ``f(y, z) = P_z(T_B <= H_y) / P_x(H_y < T_B)``, computed from hitting
    probabilities by absorbing solves per configuration.
    """
    _check_domain(domain)
    xi, yi = _source(domain, x), _source(domain, y)
    if method == "direct":
        tab = tables if tables is not None else kalikow_tables(law, domain, "exact", cap)
        return local_drift(tab.num[xi, yi] / tab.den[xi, yi])
    if method != "f_formula":
        raise ParameterError("method must be 'direct' or 'f_formula'")
    n = domain.n_sites
    nb = domain.neighbors[yi]
    num, den = _Neumaier((law.d,)), _Neumaier(())
    for digits, w in _configs_exact(law, n, cap):
        om = law.omega_atoms[digits]
        h = _hit_probabilities(domain, om, yi)
        h_ext = np.concatenate([h, np.zeros((h.shape[0], 1))], axis=1)
        nb_idx = np.where(nb < n, nb, n)
        f = (1.0 - h_ext[:, nb_idx]) / h[:, [xi]]
        W = 1.0 / np.einsum("ke,ke->k", om[:, yi, :], f)
        num.add((w * W) @ local_drift(om[:, yi, :]))
        den.add(float(w @ W))
    return num.value / den.value


def truncation_iterates(kal: KalikowEnvironment, k_max: int = 50) -> np.ndarray:
    """Fixed-point iterates ``g^(k)`` of the Green recursion in Kalikow's walk.

    ``g^(0) = delta_x`` and ``g^(k+1)(y) = 1_x(y) + sum_e g^(k)(y-e) omega(y-e, e)``
    over ``y`` in ``B`` and its boundary. Returns shape ``(k_max+1, n+m)``.
    """
    dom = kal.domain
    n, m = dom.n_sites, dom.boundary.shape[0]
    nb = dom.neighbors
    i = _source(dom, kal.x)
    g = np.zeros(n + m)
    g[i] = 1.0
    out = [g.copy()]
    for _ in range(k_max):
        new = np.zeros(n + m)
        new[i] = 1.0
        flow = g[:n, None] * kal.vectors
        np.add.at(new, nb.ravel(), flow.ravel())
        g = new
        out.append(g.copy())
    return np.array(out)


@dataclass(frozen=True)
class DriftBoundReport:
    """Worst deviation of Kalikow drifts from ``lambda`` over sampled triples."""

    max_deviation: float
    bound: float
    margin: float
    holds: bool
    n_domains: int
    n_triples: int
    lambda_: float
    min_drift: float
    diagnostic_lower: float
    diagnostic_upper: float
    diagnostic_violations: int
    worst: dict


def drift_bound_report(law: EnvironmentLaw, domains, cap: int = DEFAULT_ENUMERATION_CAP,
                       arithmetic_tol: float = 1e-12) -> DriftBoundReport:
    """Check ``|d_{B,x}(y).e1 - lambda| <= eps^2/d`` for all ``x, y`` in each domain.

    The law must satisfy the quadratic local drift condition. The report
    also counts how many drifts fall outside the sharper two-sided window
    ``[lambda - 2 eps^2/(3d) + 2 eps^4/3, lambda + 2 eps^2/(3d) + eps^3/(3d)]``,
    kept as a diagnostic only.
    """
    rep = check_condition(law, "QLD")
    if not rep.holds:
        raise ParameterError("the law does not satisfy the quadratic local drift condition")
    lam, eps, d = law_lambda(law), law.epsilon, law.d
    bound = eps**2 / d
    lo_diag = lam - 2 * eps**2 / (3 * d) + 2 * eps**4 / 3
    hi_diag = lam + 2 * eps**2 / (3 * d) + eps**3 / (3 * d)
    worst, dev_max, n_trip, viol, dmin = {}, -1.0, 0, 0, math.inf
    domains = list(domains)
    for k, dom in enumerate(domains):
        tab = kalikow_tables(law, dom, "exact", cap)
        drift = local_drift(tab.num / tab.den[..., None])[..., 0]
        dev = np.abs(drift - lam)
        n_trip += dev.size
        viol += int(np.count_nonzero((drift < lo_diag) | (drift > hi_diag)))
        dmin = min(dmin, float(drift.min()))
        j = np.unravel_index(int(np.argmax(dev)), dev.shape)
        if dev[j] > dev_max:
            dev_max = float(dev[j])
            worst = {"domain": k, "x": dom.sites[j[0]].tolist(), "y": dom.sites[j[1]].tolist(),
                     "drift_e1": float(drift[j])}
    return DriftBoundReport(dev_max, bound, bound - dev_max, dev_max <= bound + arithmetic_tol,
                            len(domains), n_trip, lam, dmin, lo_diag, hi_diag, viol, worst)


def kalikow_witness(law: EnvironmentLaw, domains, cap: int = DEFAULT_ENUMERATION_CAP) -> dict:
    """Lower-confidence witness for Kalikow's coefficient from sampled domains.

    Returns ``min d_{B,0}(y).e1`` over the sampled domains containing the
    origin. This is an upper bound on the true infimum over all connected
    domains, so it witnesses the condition only on the sample.
    """
    vals = []
    for dom in domains:
        tab = kalikow_tables(law, dom, "exact", cap)
        xi = _source(dom, np.zeros(dom.d, dtype=np.int64))
        vals.append(float(local_drift(tab.vectors(xi))[:, 0].min()))
    lam, eps, d = law_lambda(law), law.epsilon, law.d
    return {"witness": min(vals), "n_domains": len(vals), "lambda": lam,
            "lambda_minus_bound": lam - eps**2 / d, "sampled_only": True,
            "kappa": kappa(d)}

