"""Killed Green's functions, Green operators and the slab exit identity.

The killed walk on a finite domain ``B`` has substochastic kernel ``Q``
(moves inside ``B``) and exit kernel ``R`` (moves to the boundary). The
Green row from ``x`` solves ``g (I - Q) = delta_x`` on the interior and
puts ``g R`` on the boundary, so boundary values are exit probabilities.
Absorption problems ``(I - Q) h = R f`` are solved separately; they are
the independent route used to cross-check identities built from rows.

Simple symmetric walk Green functions have two further routes:

* on an l-infinity ball, the killed operator is diagonalized by the
  type-I discrete sine transform;
* on a slab that is infinite transversally, the continuous-time heat
  kernel factorizes into a killed one-dimensional part along ``e1`` and
  modified Bessel factors ``exp(-t) I_m(t)`` transversally.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import scipy.special

from .environment import HomogeneousEnvironment, ParameterError, local_drift, omega_on
from .lattice import Direction, Domain, Side, Slab

__all__ = [
    "DIRECT_SOLVE_BUDGET",
    "NonEllipticError",
    "GreenRow",
    "PhatResult",
    "PowerSumResult",
    "BallGreen",
    "kernel_matrices",
    "lu_factor",
    "green_row",
    "absorb",
    "exit_probabilities",
    "expected_exit_time",
    "green_operator_apply",
    "phat",
    "symmetric_slab",
    "ssrw_green_killed",
    "ssrw_exit_time_slab",
    "green_power_sum",
    "ssrw_green_ball",
    "ssrw_green_full",
    "slab_green_heat_kernel",
    "slab_power_sum",
]

DIRECT_SOLVE_BUDGET = 10**5
ITERATIVE_RTOL = 1e-13


class NonEllipticError(ParameterError):
    """A transition weight is zero (or negative) where ellipticity is required."""


def _uniform(d: int) -> np.ndarray:
    return np.full(2 * d, 1.0 / (2 * d))


def kernel_matrices(domain: Domain, omega: np.ndarray):
    """Sparse ``Q`` (interior to interior) and ``R`` (interior to boundary)."""
    n, m = domain.n_sites, domain.boundary.shape[0]
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (n, 2 * domain.d):
        raise ParameterError(f"omega must have shape ({n}, {2 * domain.d})")
    if np.any(~(omega > 0)):
        raise NonEllipticError("kernel is not uniformly elliptic (a weight is <= 0)")
    nb = domain.neighbors
    rows = np.repeat(np.arange(n), 2 * domain.d)
    cols = nb.ravel()
    vals = omega.ravel()
    inner = cols < n
    Q = sp.csr_matrix((vals[inner], (rows[inner], cols[inner])), shape=(n, n))
    R = sp.csr_matrix((vals[~inner], (rows[~inner], cols[~inner] - n)), shape=(n, m))
    return Q, R


def lu_factor(A: sp.spmatrix):
    """Sparse LU with a fill-reducing ordering suited to lattice operators."""
    return spla.splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A")


def _solve(A: sp.spmatrix, b: np.ndarray, budget: int | None):
    n = A.shape[0]
    if budget is None or n <= budget:
        return lu_factor(A).solve(b), "sparse-lu"
    # Krylov solve on the well-conditioned M-matrix I - Q
    cols = b if b.ndim == 2 else b[:, None]
    out = np.empty_like(cols)
    ilu = spla.spilu(sp.csc_matrix(A), drop_tol=1e-5, fill_factor=10)
    pre = spla.LinearOperator(A.shape, ilu.solve)
    for j in range(cols.shape[1]):
        x, info = spla.bicgstab(A, cols[:, j], rtol=ITERATIVE_RTOL, atol=0.0, M=pre,
                                maxiter=20 * n)
        if info != 0:
            raise RuntimeError(f"iterative Green solve did not converge (info={info})")
        out[:, j] = x
    return (out if b.ndim == 2 else out[:, 0]), "bicgstab-ilu"


@dataclass(frozen=True)
class GreenRow:
    """Green row ``g_B(x, .)`` on interior and boundary points.

    ``interior[i]`` belongs to ``domain.sites[i]`` and ``boundary[j]`` to
    ``domain.boundary[j]``.
    """

    source: np.ndarray
    domain: Domain = field(repr=False)
    interior: np.ndarray = field(repr=False)
    boundary: np.ndarray = field(repr=False)
    method: str = "sparse-lu"

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.interior, self.boundary])

    def at(self, points) -> np.ndarray:
        """Values at arbitrary points (zero away from ``B`` and its boundary)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        idx = self.domain.index_of(pts)
        out = np.zeros(pts.shape[0])
        out[idx >= 0] = self.interior[idx[idx >= 0]]
        rest = np.flatnonzero(idx < 0)
        if rest.size:
            bmap = {tuple(p): j for j, p in enumerate(self.domain.boundary.tolist())}
            canon = self.domain.canonical(pts[rest])
            for r, p in zip(rest, canon.tolist()):
                j = bmap.get(tuple(p))
                if j is not None:
                    out[r] = self.boundary[j]
        return out

    def exit_mass(self) -> dict[str, float]:
        sides = self.domain.boundary_sides
        return {Side(s).name.lower(): float(self.boundary[sides == s].sum()) for s in np.unique(sides)}


def _source_index(domain: Domain, x) -> int:
    i = int(domain.index_of(np.asarray(x, dtype=np.int64))[0])
    if i < 0:
        raise ParameterError("source point is not an interior site of the domain")
    return i


def green_row(env, domain: Domain, x, budget: int | None = DIRECT_SOLVE_BUDGET) -> GreenRow:
    """Exact killed Green row ``g_B(x, .)`` in a fixed environment.

    Parameters
    ----------
    env : EnvironmentLaw, environment object or array
        Anything :func:`rwre.environment.omega_on` accepts; an array must
        hold the transition vectors of ``domain.sites``.
    domain : Domain
    x : point
        Interior source.
    budget : int or None
        Largest system solved by sparse LU; larger systems use an
        ILU-preconditioned Krylov method. The method is recorded.
    """
    omega = omega_on(env, domain)
    Q, R = kernel_matrices(domain, omega)
    i = _source_index(domain, x)
    b = np.zeros(domain.n_sites)
    b[i] = 1.0
    A = (sp.identity(domain.n_sites, format="csr") - Q).T
    g, method = _solve(A, b, budget)
    return GreenRow(np.asarray(x, dtype=np.int64), domain, g, R.T @ g, method)


def absorb(env, domain: Domain, boundary_values, interior_source=None,
           budget: int | None = DIRECT_SOLVE_BUDGET) -> np.ndarray:
    """Solve ``h = Q h + R f + s`` on the interior.

    ``h(y) = E_y[f(X_T) + sum_{k<T} s(X_k)]``. ``boundary_values`` may be a
    vector over ``domain.boundary`` or a matrix of several columns.
    """
    omega = omega_on(env, domain)
    Q, R = kernel_matrices(domain, omega)
    rhs = R @ np.asarray(boundary_values, dtype=np.float64)
    if interior_source is not None:
        s = np.asarray(interior_source, dtype=np.float64)
        rhs = rhs + (s if rhs.ndim == 1 else s[:, None])
    A = sp.identity(domain.n_sites, format="csr") - Q
    h, _ = _solve(A, rhs, budget)
    return h


def exit_probabilities(env, domain: Domain, x) -> dict[str, float]:
    """Exit probability per boundary side, by absorption solves."""
    i = _source_index(domain, x)
    sides = domain.boundary_sides
    labels = np.unique(sides)
    F = np.stack([(sides == s).astype(np.float64) for s in labels], axis=1)
    H = absorb(env, domain, F)
    return {Side(s).name.lower(): float(H[i, k]) for k, s in enumerate(labels)}


def expected_exit_time(env, domain: Domain, x) -> float:
    """``E_x T_B`` by the absorption route (independent of :func:`green_row`)."""
    i = _source_index(domain, x)
    m = domain.boundary.shape[0]
    return float(absorb(env, domain, np.zeros(m), np.ones(domain.n_sites))[i])


def green_operator_apply(env, domain: Domain, f, x, row: GreenRow | None = None) -> float:
    """``G_B[f](x) = sum_{y in B} g_B(x, y) f(y)``.

    ``f`` is an array over ``domain.sites`` or a callable on an ``(n, d)``
    array of sites.
    """
    row = row if row is not None else green_row(env, domain, x)
    vals = f(domain.sites) if callable(f) else np.asarray(f, dtype=np.float64)
    vals = np.broadcast_to(vals, (domain.n_sites,))
    return math.fsum((row.interior * vals).tolist())


def symmetric_slab(x, L: int, cap: int, periodic: bool = True) -> Slab:
    """Open slab ``|(y-x).e1| < L`` around ``x`` with a transverse window.

    Its exits are exactly the first hits of the hyperplanes ``x.e1 +- L``.
    """
    return Slab(Direction(1, 1), L, x, cap, symmetric=True, periodic=periodic)


@dataclass(frozen=True)
class PhatResult:
    """Right-exit probability of the slab around ``x`` by two routes.

    ``direct`` solves the absorption problem with the right hyperplane as
    target. ``green_form`` is ``1/2 + G[d.e1](x) / (2L)``. With
    ``transverse="periodic"`` the identity between them is exact. With
    ``"absorbing"`` lateral exits leak mass ``lateral``; then ``direct`` is
    a lower bound and ``direct + lateral`` an upper bound for the
    transversally infinite slab.
    """

    direct: float
    green_form: float
    green_drift: float
    lateral: float
    L: int
    cap: int
    transverse: str
    leakage_tol: float

    @property
    def discrepancy(self) -> float:
        return abs(self.direct - self.green_form)

    @property
    def flagged(self) -> bool:
        return self.lateral > self.leakage_tol

    @property
    def lower(self) -> float:
        return self.direct

    @property
    def upper(self) -> float:
        return self.direct + self.lateral


def _phat_once(env, x, L, cap, periodic, env_id=0):
    dom = symmetric_slab(x, L, cap, periodic)
    omega = omega_on(env if not hasattr(env, "site_probs") else _quenched(env, env_id), dom)
    Q, R = kernel_matrices(dom, omega)
    n = dom.n_sites
    i = _source_index(dom, x)
    sides = dom.boundary_sides
    A = sp.identity(n, format="csr") - Q
    lu = lu_factor(A)
    h = lu.solve(R @ (sides == Side.FRONTAL).astype(np.float64))
    b = np.zeros(n)
    b[i] = 1.0
    g = lu.solve(b, trans="T")
    gb = R.T @ g
    G = math.fsum((g * local_drift(omega)[:, 0]).tolist())
    lateral = float(gb[sides == Side.LATERAL].sum())
    return float(h[i]), G, lateral


def _quenched(law, env_id):
    from .environment import QuenchedEnvironment
    return QuenchedEnvironment(law, env_id)


def phat(env, x, L: int, cap: int | None = None, transverse: str = "periodic",
         leakage_tol: float = 1e-6, max_cap: int | None = None, env_id: int = 0) -> PhatResult:
    """Probability that the walk from ``x`` hits ``x.e1 + L`` before ``x.e1 - L``.

    Parameters
    ----------
    env : environment object or EnvironmentLaw
        A law is evaluated in environment ``env_id``.
    x : point
    L : int
    cap : int, optional
        Transverse half-window. For ``"absorbing"`` and no cap given, the
        cap starts at ``2L`` and doubles until the lateral leakage is below
        ``leakage_tol`` (or ``max_cap`` is reached, which flags the result).
    transverse : {"periodic", "absorbing"}
    """
    if L < 1:
        raise ParameterError("L must be positive")
    x = np.asarray(x, dtype=np.int64)
    if transverse == "periodic":
        c = cap if cap is not None else 2 * L
        direct, G, lat = _phat_once(env, x, L, c, True, env_id)
    elif transverse == "absorbing":
        c = cap if cap is not None else 2 * L
        limit = max_cap if max_cap is not None else 64 * L
        while True:
            direct, G, lat = _phat_once(env, x, L, c, False, env_id)
            if cap is not None or lat <= leakage_tol or c >= limit:
                break
            c = min(2 * c, limit)
    else:
        raise ParameterError("transverse must be 'periodic' or 'absorbing'")
    return PhatResult(direct, 0.5 + G / (2 * L), G, lat, L, c, transverse, leakage_tol)


def ssrw_green_killed(domain: Domain, x, budget: int | None = DIRECT_SOLVE_BUDGET) -> GreenRow:
    """Green row of the simple symmetric walk killed outside ``domain``."""
    return green_row(HomogeneousEnvironment(_uniform(domain.d)), domain, x, budget)


def ssrw_exit_time_slab(d: int, L: int) -> int:
    """``E_0 T`` for the slab ``-L <= y.e1 < L``: the e1 projection is a lazy walk."""
    return d * L * (L + 1)


def green_power_sum(domain: Domain, alpha: float, x=None) -> float:
    """``sum_{y in B} g_{0,B}(x, y)^(2/(2-alpha))`` from an exact SSRW row."""
    if not 0.0 <= alpha < 1.0:
        raise ParameterError("alpha must lie in [0, 1)")
    x = np.zeros(domain.d, dtype=np.int64) if x is None else x
    row = ssrw_green_killed(domain, x)
    return math.fsum((row.interior ** (2.0 / (2.0 - alpha))).tolist())


# ---------------------------------------------------------------------------
# simple symmetric walk on l-infinity balls (sine transform)


@dataclass(frozen=True)
class BallGreen:
    """Killed SSRW Green row from the origin on ``[-R, R]^d``."""

    d: int
    R: int
    values: np.ndarray = field(repr=False)

    def at(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.int64))
        inside = np.all(np.abs(p) <= self.R, axis=1)
        out = np.zeros(p.shape[0])
        q = p[inside] + self.R
        out[inside] = self.values[tuple(q.T)]
        return out


def ssrw_green_ball(d: int, R: int) -> BallGreen:
    """Exact killed Green row on the ball via the type-I sine transform.

    The killed operator ``I - P`` has eigenvalues
    ``1 - (1/d) sum_i cos(pi j_i / (2R+2))`` with sine eigenvectors, so
    ``g = S diag(1/mu) S delta_0`` with ``S`` the orthonormal DST-I.
    """
    if R < 1:
        raise ParameterError("radius must be positive")
    n = 2 * R + 1
    c = np.cos(np.pi * np.arange(1, n + 1) / (n + 1)) / d
    mu = np.ones((n,) * d)
    for i in range(d):
        shape = [1] * d
        shape[i] = n
        mu = mu - c.reshape(shape)
    delta = np.zeros((n,) * d)
    delta[(R,) * d] = 1.0
    g = scipy.fft.dstn(delta, type=1, norm="ortho")
    g /= mu
    g = scipy.fft.dstn(g, type=1, norm="ortho", overwrite_x=True)
    return BallGreen(d, R, g)


@dataclass(frozen=True)
class FullGreenResult:
    values: np.ndarray
    error: np.ndarray
    truncated: np.ndarray
    radii: tuple[int, int]


def ssrw_green_full(d: int, y, R: int, second_radius: int | None = None) -> FullGreenResult:
    """Full-lattice SSRW Green function ``g(y, 0)`` from killed balls.

    The ball of radius ``R`` misses ``E_y g(X_T, 0) ~ c R^(2-d)``. With a
    second radius ``R2`` (default ``2R``) the leading term is eliminated by
    Richardson extrapolation, and the size of the correction is reported
    as the error bar.
    """
    if d < 3:
        raise ParameterError("the full-lattice Green function diverges for d < 3 (recurrence)")
    R2 = 2 * R if second_radius is None else int(second_radius)
    if R2 <= R:
        raise ParameterError("second radius must exceed the first")
    pts = np.atleast_2d(np.asarray(y, dtype=np.int64))
    g1 = ssrw_green_ball(d, R).at(pts)
    g2 = ssrw_green_ball(d, R2).at(pts)
    r = (R / R2) ** (d - 2)
    extra = g2 + (g2 - g1) * r / (1 - r)
    return FullGreenResult(extra, np.abs(extra - g2), g2, (R, R2))


# ---------------------------------------------------------------------------
# transversally infinite slab (heat-kernel factorization)


def _heat_nodes(L: int, h: float, tail: float):
    n1 = 2 * L
    mu_min = 1.0 - math.cos(math.pi / (n1 + 1))
    s_max = math.log(-math.log(tail) / mu_min) + 1.0
    s_min = math.log(tail)
    s = np.arange(s_min, s_max + h, h)
    t = np.exp(s)
    return t, h * t


def _killed_1d_kernel(L: int, t: np.ndarray) -> np.ndarray:
    """``K1[k, i] = exp(-t_k H1)(0, -L + i)`` for the killed interval walk."""
    n1 = 2 * L
    j = np.arange(1, n1 + 1)
    i = np.arange(n1)
    phi = math.sqrt(2.0 / (n1 + 1)) * np.sin(np.pi * np.outer(j, i + 1) / (n1 + 1))
    mu = 1.0 - np.cos(np.pi * j / (n1 + 1))
    return (np.exp(-np.outer(t, mu)) * phi[:, L][None, :]) @ phi


def slab_green_heat_kernel(d: int, L: int, points, h: float = 0.2, tail: float = 1e-17) -> np.ndarray:
    """SSRW Green ``g(0, y)`` on ``{-L <= y.e1 < L}`` with no transverse cap.

    ``g(0,y) = d * int_0^inf K1(t; 0, y1) prod_i exp(-t) I_{y_i}(t) dt``,
    evaluated by the trapezoid rule in ``log t``.
    """
    t, w = _heat_nodes(L, h, tail)
    K1 = _killed_1d_kernel(L, t)
    p = np.atleast_2d(np.asarray(points, dtype=np.int64))
    out = np.zeros(p.shape[0])
    ok = (p[:, 0] >= -L) & (p[:, 0] < L)
    for r in np.flatnonzero(ok):
        trans = np.ones_like(t)
        for m in p[r, 1:]:
            trans = trans * scipy.special.ive(abs(int(m)), t)
        out[r] = d * float((trans * w) @ K1[:, p[r, 0] + L])
    return out


@dataclass(frozen=True)
class PowerSumResult:
    """Power sum over the transversally infinite slab.

    ``value`` includes a geometric tail estimate beyond the last shell,
    whose size is ``tail_estimate``; ``partial`` is the explicit sum up to
    transverse l-infinity radius ``radius``.
    """

    value: float
    partial: float
    tail_estimate: float
    radius: int
    n_orbits: int
    exponent: float


def _shell_orbits(m: int, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted nonnegative ``m``-tuples with maximum ``r`` and their orbit sizes."""
    if m == 1:
        a = np.array([[r]], dtype=np.int64)
    else:
        head = np.array(list(itertools.combinations_with_replacement(range(r + 1), m - 1)),
                        dtype=np.int64).reshape(-1, m - 1)
        a = np.concatenate([head, np.full((head.shape[0], 1), r, dtype=np.int64)], axis=1)
    # distinct permutations times sign choices of nonzero entries
    perms = np.full(a.shape[0], math.factorial(m), dtype=np.float64)
    for v in range(r + 1):
        c = (a == v).sum(axis=1)
        perms /= scipy.special.factorial(c)
    signs = 2.0 ** (a > 0).sum(axis=1)
    return a, perms * signs


def slab_power_sum(d: int, L: int, alpha: float, rtol: float = 1e-4, h: float = 0.25,
                   max_radius: int | None = None, chunk: int = 40000) -> PowerSumResult:
    """``sum_y g_{0,U}(0,y)^(2/(2-alpha))`` over the slab ``U = {-L <= y.e1 < L}``.

    Transverse points are grouped into orbits of the hyperoctahedral group
    and summed shell by shell in l-infinity radius until a shell adds less
    than ``rtol`` of the running total; the remaining tail is estimated
    from the ratio of the last two shells.
    """
    if d < 2:
        raise ParameterError("slabs need d >= 2")
    if not 0.0 <= alpha < 1.0:
        raise ParameterError("alpha must lie in [0, 1)")
    q = 2.0 / (2.0 - alpha)
    m = d - 1
    t, w = _heat_nodes(L, h, 1e-17)
    K1 = d * _killed_1d_kernel(L, t)
    rmax = max_radius if max_radius is not None else 64 * L
    table = scipy.special.ive(np.arange(rmax + 1)[:, None], t[None, :])
    K1w = K1 * w[:, None]
    total, shells, n_orbits = 0.0, [], 0
    r = 0
    while True:
        a, mult = _shell_orbits(m, r)
        s = 0.0
        for lo in range(0, a.shape[0], chunk):
            blk = a[lo:lo + chunk]
            prod = table[blk[:, 0]].copy()
            for k in range(1, m):
                prod *= table[blk[:, k]]
            g = prod @ K1w
            np.maximum(g, 0.0, out=g)
            s += float(mult[lo:lo + chunk] @ (g**q).sum(axis=1))
        n_orbits += a.shape[0]
        total += s
        shells.append(s)
        if r >= L and s <= rtol * total:
            break
        if r >= rmax:
            break
        r += 1
    tail = 0.0
    if len(shells) >= 2 and shells[-2] > 0:
        ratio = shells[-1] / shells[-2]
        tail = shells[-1] * ratio / (1 - ratio) if ratio < 1 else float("inf")
    return PowerSumResult(total + tail, total, tail, r, n_orbits, q)
