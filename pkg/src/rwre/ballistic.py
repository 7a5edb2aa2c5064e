"""Ballisticity probes, the gambler's-ruin oracle and the coupled rescaled walks.

The rescaled walk ``Y`` records the position of ``X`` each time its
``e1`` coordinate has moved by ``L`` since the last record. Given the
quenched probability ``phat(Y_k)`` that the move is to the right, a
companion nearest-neighbour walk on ``Z`` with right probability ``p`` is
sampled conditionally on ``Y``'s move so that, whenever ``p <= phat``, a
right step of the companion forces a right step of ``Y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.stats import norm

from . import keyed
from .environment import (EnvironmentLaw, ParameterError, alpha_d, as_environment, kappa,
                          local_drift)
from .green import kernel_matrices, lu_factor, phat as _phat, symmetric_slab, _source_index
from .lattice import Box, Direction, Side, make_box, make_slab, middle_frontal
from .walker import MCEstimate, mean_estimate, parallel_chunks, run_batch, simulate, wilson

__all__ = [
    "default_L",
    "gambler_exit_left",
    "gambler_exit_left_alt",
    "gambler_upper_bound",
    "gambler_exit_left_solve",
    "M0",
    "ProbeReport",
    "polynomial_condition_probe",
    "TGammaReport",
    "t_gamma_probe",
    "annealed_green_drift",
    "PPlusMinus",
    "p_plus_minus",
    "RescaledTrajectory",
    "coupled_rescaled_runs",
    "coupled_rescaled_run",
    "companion_hitting_time_exact",
    "companion_hitting_time_mc",
]


def default_L(theta: float, epsilon: float) -> int:
    """``L = 2 [theta / eps]``."""
    L = 2 * math.floor(theta / epsilon)
    if L < 2:
        raise ParameterError("theta/eps must be at least 1 so that L >= 2")
    return L


# ---------------------------------------------------------------------------
# gambler's ruin


def _check_gambler(a, b, p):
    if int(a) != a or int(b) != b or a < 1 or b < 1:
        raise ParameterError("a and b must be positive integers")
    if not 0.0 < p < 1.0:
        raise ParameterError("p must lie strictly between 0 and 1")


def gambler_exit_left(a: int, b: int, p: float) -> float:
    """Probability that a ``p``-walk from 0 leaves ``[-a, b]`` through ``-a``.

    ``rho^a (1 - rho^b) / (1 - rho^(a+b))`` with ``rho = (1-p)/p``, and
    ``b / (a + b)`` at ``p = 1/2``.
    """
    _check_gambler(a, b, p)
    if p == 0.5:
        return b / (a + b)
    rho = (1.0 - p) / p
    if rho > 1.0:
        # same formula in 1/rho, which keeps the powers bounded
        r = 1.0 / rho
        return (1.0 - r**b) / (1.0 - r ** (a + b))
    return rho**a * (1.0 - rho**b) / (1.0 - rho ** (a + b))


def gambler_exit_left_alt(a: int, b: int, p: float) -> float:
    """Second form ``(1-p)^a (p^b - q^b) / (p^(a+b) - q^(a+b))``, ``q = 1 - p``."""
    _check_gambler(a, b, p)
    if p == 0.5:
        return b / (a + b)
    q = 1.0 - p
    return q**a * (p**b - q**b) / (p ** (a + b) - q ** (a + b))


def gambler_upper_bound(a: int, b: int, p: float) -> float:
    """Upper bound ``(1-p)^a / (p^(a+b) - (1-p)^(a+b))`` for ``p > 1/2``."""
    _check_gambler(a, b, p)
    if p <= 0.5:
        raise ParameterError("the bound needs p > 1/2")
    q = 1.0 - p
    return q**a / (p ** (a + b) - q ** (a + b))


def gambler_exit_left_solve(a: int, b: int, p: float) -> float:
    """Same probability from the absorbing-chain linear system on ``{-a..b}``."""
    _check_gambler(a, b, p)
    n = a + b - 1
    if n == 0:
        return 1.0 - p
    q = 1.0 - p
    ab = np.zeros((3, n))
    ab[0, 1:] = -p
    ab[1, :] = 1.0
    ab[2, :-1] = -q
    rhs = np.zeros(n)
    rhs[0] = q
    h = scipy.linalg.solve_banded((1, 1), ab, rhs)
    return float(h[a - 1])


# ---------------------------------------------------------------------------
# condition probes


def M0(d: int) -> float:
    """Scale ``exp(100 + 4 d (log kappa)^2)`` above which (P)_K implies ballisticity."""
    return math.exp(100 + 4 * d * math.log(kappa(d)) ** 2)


@dataclass(frozen=True)
class ProbeReport:
    """Outcome of the polynomial condition probe on ``B_M``."""

    M: int
    K: float
    threshold: float
    sup_estimate: float
    sup_upper: float
    max_lower: float
    verdict: str
    n_starts: int
    n_walks: int
    coverage: float
    level: float
    M0: float
    below_M0: bool
    starts: list = field(repr=False)
    per_start: list = field(repr=False)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("M", "K", "threshold", "sup_estimate", "sup_upper", "max_lower", "verdict",
                 "n_starts", "n_walks", "coverage", "level", "M0", "below_M0")} | {
            "starts": self.starts, "per_start": self.per_start}


def _probe_starts(M: int, d: int, n_starts: int | None, rng: np.random.Generator) -> np.ndarray:
    star, back = middle_frontal(M, np.zeros(d, dtype=np.int64))
    layers = np.arange(M // 2, M)
    if n_starts is None:
        n_starts = 2 * layers.size
    pts = [np.zeros(d, dtype=np.int64)]
    pts[0][0] = M // 2
    for k in range(1, n_starts):
        p = star.sample(1, rng)[0]
        p[0] = layers[k % layers.size]
        pts.append(p)
    return np.array(pts)


def polynomial_condition_probe(law, M: int, K: float, n_walks: int, n_starts: int | None = None,
                               seed: int = 0, level: float = 0.95, step_cap: int = 10**7,
                               threads: int = 1) -> ProbeReport:
    """Estimate ``sup_{x in B*_M} P_x(X_T not in the frontal side of B_M)``.

    Starting points are the centre of the back side of ``B*_M`` plus random
    points of ``B*_M`` spread over all ``e1`` layers (all of them lie in
    ``B*_M``; a sample rather than the whole set). Each start gets
    ``n_walks`` walks. Wilson bounds use a Bonferroni-adjusted level so that
    the verdict holds simultaneously over the sampled starts: ``pass`` if
    every upper bound is at most ``M^-K``, ``fail`` if some lower bound
    exceeds it, ``inconclusive`` otherwise. Step-cap hits count as
    non-frontal exits.
    """
    if M < 2 or M % 2:
        raise ParameterError("M must be even and at least 2")
    d = law.d
    rng = np.random.default_rng(seed)
    starts = _probe_starts(M, d, n_starts, rng)
    box = make_box(M, np.zeros(d, dtype=np.int64), site_budget=None)
    adj = 1 - (1 - level) / len(starts)
    thr = float(M) ** (-K)
    per = []
    for k, x in enumerate(starts):
        def work(lo, hi, x=x, k=k):
            ids = k * n_walks + np.arange(lo, hi)
            return run_batch(law, box, np.broadcast_to(x, (hi - lo, d)), ids, step_cap, seed).code
        codes = np.concatenate(parallel_chunks(work, n_walks, threads))
        bad = int(np.count_nonzero(codes != Side.FRONTAL))
        w = wilson(bad, n_walks, adj)
        per.append({"start": x.tolist(), "non_frontal": bad, "estimate": w.mean, "lo": w.lo,
                    "hi": w.hi})
    sup_est = max(p["estimate"] for p in per)
    sup_hi = max(p["hi"] for p in per)
    max_lo = max(p["lo"] for p in per)
    verdict = "pass" if sup_hi <= thr else ("fail" if max_lo > thr else "inconclusive")
    star, _ = middle_frontal(M, np.zeros(d, dtype=np.int64))
    m0 = M0(d)
    return ProbeReport(M, K, thr, sup_est, sup_hi, max_lo, verdict, len(starts), n_walks,
                       len(starts) / star.count, level, m0, M < m0,
                       [s.tolist() for s in starts], per)


@dataclass(frozen=True)
class TGammaReport:
    """Slope of ``-log P_0(back exit of U_{e1,M})`` against ``M^gamma``."""

    gamma: float
    M: list
    probabilities: list
    counts: list
    censored: list
    slope: float
    slope_stderr: float
    slope_lo: float
    slope_hi: float
    n_fit: int
    verdict: str
    note: str = ("heuristic check along e1 only; the condition quantifies over a neighbourhood "
                 "of directions and is asymptotic")


def t_gamma_probe(law, gamma: float, M_list, n_walks: int, seed: int = 0, level: float = 0.95,
                  cap_factor: int = 10, step_cap: int = 10**7, threads: int = 1) -> TGammaReport:
    """Weighted least-squares slope of ``-log P`` versus ``M^gamma`` on the uncensored prefix.

    An ``M`` where no walk exits through the back is censored, and so is
    every larger ``M``. Transverse windows of half-width ``cap_factor * M``
    are used; lateral hits count as non-back exits and are reported.
    """
    Ms = [int(m) for m in M_list]
    if len(Ms) < 3 or any(b <= a for a, b in zip(Ms, Ms[1:])):
        raise ParameterError("M_list must be increasing with at least three values")
    d = law.d
    probs, counts, cens = [], [], []
    for j, M in enumerate(Ms):
        slab = make_slab(Direction(1, 1), M, np.zeros(d, dtype=np.int64), cap_factor * M)

        def work(lo, hi, slab=slab, j=j):
            ids = j * n_walks + np.arange(lo, hi)
            return run_batch(law, slab, np.zeros((hi - lo, d), dtype=np.int64), ids, step_cap,
                             seed).code

        codes = np.concatenate(parallel_chunks(work, n_walks, threads))
        k = int(np.count_nonzero(codes == Side.BACK))
        counts.append(k)
        probs.append(k / n_walks)
        cens.append(k == 0 or (len(cens) > 0 and cens[-1]))
    keep = [i for i, c in enumerate(cens) if not c]
    slope = se = float("nan")
    if len(keep) >= 2:
        x = np.array([Ms[i] ** gamma for i in keep], dtype=float)
        p = np.array([probs[i] for i in keep])
        y = -np.log(p)
        var = (1 - p) / (n_walks * p)
        w = 1.0 / np.maximum(var, 1e-300)
        xb = np.sum(w * x) / np.sum(w)
        yb = np.sum(w * y) / np.sum(w)
        sxx = np.sum(w * (x - xb) ** 2)
        slope = float(np.sum(w * (x - xb) * (y - yb)) / sxx)
        se = float(1.0 / math.sqrt(sxx))
    z = float(norm.ppf(0.5 + level / 2))
    lo, hi = slope - z * se, slope + z * se
    if len(keep) < 2:
        verdict = "insufficient"
    elif lo > 0:
        verdict = "supports"
    elif hi < 0:
        verdict = "contradicts"
    else:
        verdict = "inconclusive"
    return TGammaReport(gamma, Ms, probs, counts, cens, slope, se, lo, hi, len(keep), verdict)


# ---------------------------------------------------------------------------
# annealed Green drift and the thresholds p-/p+


def _slab_for(L: int, d: int, cap: int | None, slab: str):
    c = cap if cap is not None else 2 * L
    origin = np.zeros(d, dtype=np.int64)
    if slab == "symmetric":
        return symmetric_slab(origin, L, c, periodic=True)
    if slab == "half-open":
        return make_slab(Direction(1, 1), L, origin, c, periodic=True)
    raise ParameterError("slab must be 'symmetric' or 'half-open'")


def annealed_green_drift(law: EnvironmentLaw, L: int, n_envs: int, cap: int | None = None,
                         slab: str = "symmetric", env_offset: int = 0,
                         values: bool = False):
    """Average over environments of ``G_U[d.e1](0)``, each computed exactly.

    ``U`` is the symmetric open slab ``|y.e1| < L`` (whose exits are the
    hits of ``+-L``, the slab entering ``phat``) or the half-open slab
    ``-L <= y.e1 < L``. Transverse directions are periodic with half-width
    ``cap`` (default ``2L``); environment ``k`` is ``env_id = env_offset + k``.
    """
    if n_envs < 1:
        raise ParameterError("n_envs must be positive")
    dom = _slab_for(L, law.d, cap, slab)
    n = dom.n_sites
    i = _source_index(dom, np.zeros(law.d, dtype=np.int64))
    b = np.zeros(n)
    b[i] = 1.0
    out = np.empty(n_envs)
    for k in range(n_envs):
        om = law.site_probs(dom.sites, env_offset + k)
        Q, _ = kernel_matrices(dom, om)
        g = lu_factor(sp.identity(n) - Q).solve(b, trans="T")
        out[k] = math.fsum((g * local_drift(om)[:, 0]).tolist())
    est = mean_estimate(out) if n_envs > 1 else MCEstimate(float(out[0]), 0.0, 1)
    if law.is_deterministic:
        est = MCEstimate(float(out[0]), 0.0, n_envs, est.ci_level, float(out[0]), float(out[0]))
    return (est, out) if values else est


@dataclass(frozen=True)
class PPlusMinus:
    p_minus: float
    p_plus: float
    green_drift: MCEstimate
    offset: float
    L: int
    exponent: float

    @property
    def two_p_minus_1(self) -> tuple[float, float]:
        return 2 * self.p_minus - 1, 2 * self.p_plus - 1


def p_plus_minus(law: EnvironmentLaw, epsilon: float | None = None, delta: float = 0.25,
                 L: int | None = None, n_envs: int = 50, theta: float = 0.5,
                 exponent: float | None = None, cap: int | None = None) -> PPlusMinus:
    """Thresholds ``p-/+ = 1/2 + (E G_U[d.e1](0) -/+ eps^(alpha(d)-2-delta)) / (2L)``.

    Clamped to ``[0, 1]``. ``exponent`` overrides ``alpha(d) - 2 - delta``.
    """
    eps = law.epsilon if epsilon is None else epsilon
    L = default_L(theta, eps) if L is None else L
    expo = alpha_d(law.d) - 2 - delta if exponent is None else exponent
    off = eps**expo
    g = annealed_green_drift(law, L, n_envs, cap)
    pm = max(0.5 + (g.mean - off) / (2 * L), 0.0)
    pp = min(0.5 + (g.mean + off) / (2 * L), 1.0)
    return PPlusMinus(pm, pp, g, off, L, expo)


# ---------------------------------------------------------------------------
# coupled rescaled walks


@dataclass
class RescaledTrajectory:
    """One coupled run: the rescaled walk, its box-stopped copy and the companion.

    ``Y[k] = X_{W_k}``; ``Z[k] = X_{V_k}`` with ``V_k = W_k`` until ``X``
    leaves the box, after which ``Z`` is frozen at the exit point.
    ``companion[k]`` is the companion walk after ``k`` steps.
    ``hypothesis[k]`` records whether ``p <= phat(Y_k)`` was certified (using
    the lower bound of an absorbing-cap solve) and ``violations`` counts
    steps where the hypothesis held, the companion stepped right, and ``Y``
    did not. ``dominated`` records ``(Y_k - Y_0).e1 >= L * companion_k``
    along the certified prefix of the run.
    """

    Y: list
    Z: list
    W: list
    V: list
    companion: list
    phat_lower: list
    phat_upper: list
    hypothesis: list
    y_right: list
    c_right: list
    box_exit_time: int | None = None
    box_exit_side: str | None = None
    flagged_points: int = 0
    step_cap_hit: bool = False
    dominated: bool = True

    @property
    def violations(self) -> int:
        return sum(1 for h, c, y in zip(self.hypothesis, self.c_right, self.y_right)
                   if h and c and not y)

    @property
    def hypothesis_failures(self) -> int:
        return sum(1 for h in self.hypothesis if not h)

    def to_dict(self) -> dict:
        return {"Y": [list(map(int, y)) for y in self.Y], "Z": [list(map(int, z)) for z in self.Z],
                "W": self.W, "V": self.V, "companion": self.companion,
                "phat_lower": self.phat_lower, "phat_upper": self.phat_upper,
                "hypothesis": self.hypothesis, "violations": self.violations,
                "dominated": self.dominated,
                "box_exit_time": self.box_exit_time, "box_exit_side": self.box_exit_side}


class PhatCache:
    """Per-environment cache of ``phat`` bounds keyed by lattice point."""

    def __init__(self, env, L: int, leakage_tol: float = 1e-6, cap: int | None = None):
        self.env, self.L, self.tol, self.cap = env, L, leakage_tol, cap
        self.store: dict = {}

    def __call__(self, x) -> tuple[float, float, bool]:
        key = tuple(int(v) for v in x)
        if key not in self.store:
            r = _phat(self.env, np.array(key), self.L, cap=self.cap, transverse="absorbing",
                      leakage_tol=self.tol)
            self.store[key] = (r.lower, r.upper, r.flagged)
        return self.store[key]


def coupled_rescaled_runs(env, box: Box, starts, p: float, stream_ids, L: int,
                          seed: int = 0, leakage_tol: float = 1e-6, cap: int | None = None,
                          max_jumps: int = 10**4, step_cap: int = 10**7,
                          phat_cache: PhatCache | None = None,
                          phat_exact=None) -> list[RescaledTrajectory]:
    """Simulate coupled runs in one fixed environment, batched across runs.

    Parameters
    ----------
    env : environment object
        A fixed (quenched) environment such as :class:`QuenchedEnvironment`.
    box : Box
        Runs stop after the excursion during which ``X`` leaves the box.
    starts : array (n, d)
    p : float
        Right probability of the companion walk.
    stream_ids : array (n,)
    L : int
    phat_exact : callable, optional
        Returns the exact ``phat`` at a point (used for homogeneous
        environments); by default an absorbing-cap solve supplies a
        certified lower bound and an upper bound.
    """
    if not 0.0 <= p <= 1.0:
        raise ParameterError("p must lie in [0, 1]")
    env = as_environment(env)
    starts = np.atleast_2d(np.asarray(starts, dtype=np.int64))
    sid = np.atleast_1d(np.asarray(stream_ids, dtype=np.int64))
    n, d = starts.shape
    if np.any(box.classify(starts) != Side.INTERIOR):
        raise ParameterError("every start must be inside the box")
    cache = phat_cache if phat_cache is not None else PhatCache(env, L, leakage_tol, cap)
    comp_keys = keyed.key(seed, keyed.TAG_COMPANION, sid)
    runs = [RescaledTrajectory([s.copy()], [s.copy()], [0], [0], [0], [], [], [], [], [])
            for s in starts]
    pos = starts.copy()
    clock = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    dominated = np.ones(n, dtype=bool)
    certified = np.ones(n, dtype=bool)
    jumps = 0
    while alive.any() and jumps < max_jumps:
        act = np.flatnonzero(alive)
        # quenched right-probabilities at the current rescale points
        ph = []
        for j in act:
            if phat_exact is not None:
                v = float(phat_exact(pos[j]))
                lo_, hi_, fl = v, v, False
            else:
                lo_, hi_, fl = cache(pos[j])
            runs[j].phat_lower.append(lo_)
            runs[j].phat_upper.append(hi_)
            runs[j].hypothesis.append(bool(p <= lo_))
            runs[j].flagged_points += int(fl)
            ph.append(lo_)
        ph = np.array(ph)
        origin1 = pos[act, 0].copy()
        frozen = np.array([runs[j].box_exit_time is not None for j in act])
        exit_t = np.full(act.size, -1, dtype=np.int64)
        exit_pt = np.zeros((act.size, d), dtype=np.int64)
        exit_side = np.zeros(act.size, dtype=np.int64)
        state = {"rows": np.arange(act.size)}

        def stop(x, t):
            rows = state["rows"]
            side = box.classify(x)
            newly = (side != Side.INTERIOR) & (~frozen[rows]) & (exit_t[rows] < 0)
            if newly.any():
                r = rows[newly]
                exit_t[r] = t
                exit_pt[r] = x[newly]
                exit_side[r] = side[newly]
            done = np.abs(x[:, 0] - origin1[rows]) >= L
            state["rows"] = rows[~done]
            return done.astype(np.int64)

        res = simulate(env, pos[act], sid[act], stop, step_cap, seed, step_offset=clock[act])
        u = keyed.uniform(keyed.fold(comp_keys[act], jumps))
        for r, j in enumerate(act):
            run = runs[j]
            if res.code[r] == -1:
                run.step_cap_hit = True
                alive[j] = False
                continue
            t = int(res.time[r])
            y_new = res.position[r]
            y_right = bool(y_new[0] > origin1[r])
            m = min(ph[r], p)
            if y_right:
                c_right = bool(u[r] < (m / ph[r] if ph[r] > 0 else 0.0))
            else:
                c_right = bool(u[r] < ((p - m) / (1 - ph[r]) if ph[r] < 1 else 0.0))
            run.y_right.append(y_right)
            run.c_right.append(c_right)
            run.companion.append(run.companion[-1] + (1 if c_right else -1))
            run.Y.append(y_new.copy())
            run.W.append(int(clock[j] + t))
            if not frozen[r] and exit_t[r] >= 0:
                run.box_exit_time = int(clock[j] + exit_t[r])
                run.box_exit_side = Side(int(exit_side[r])).name.lower()
                run.Z.append(exit_pt[r].copy())
                run.V.append(run.box_exit_time)
            elif run.box_exit_time is not None:
                run.Z.append(run.Z[-1].copy())
                run.V.append(run.V[-1])
            else:
                run.Z.append(y_new.copy())
                run.V.append(run.W[-1])
            certified[j] &= run.hypothesis[-1]
            if certified[j]:
                dominated[j] &= bool((run.Y[-1][0] - run.Y[0][0]) >= L * run.companion[-1])
            clock[j] += t
            pos[j] = y_new
            if run.box_exit_time is not None:
                alive[j] = False
        jumps += 1
    for j, run in enumerate(runs):
        run.dominated = bool(dominated[j])
    return runs


def coupled_rescaled_run(env, box: Box, start, p: float, stream_id: int, L: int,
                         **kw) -> RescaledTrajectory:
    """Single coupled run; see :func:`coupled_rescaled_runs`."""
    return coupled_rescaled_runs(env, box, np.asarray(start)[None, :], p, [stream_id], L, **kw)[0]


# ---------------------------------------------------------------------------
# companion walk hitting times


def companion_hitting_time_exact(p: float, level: int, floor: int | None = None) -> float:
    """``E T_level`` for a ``p``-walk from 0 by the first-step recursion.

    ``h(i) = 1 + p h(i+1) + (1-p) h(i-1)``, ``h(level) = 0``, with a
    reflecting floor far below 0 (its effect decays like ``((1-p)/p)^floor``).
    """
    if not 0.5 < p <= 1.0:
        raise ParameterError("the hitting time is finite in mean only for p > 1/2")
    if level < 1:
        raise ParameterError("level must be positive")
    q = 1.0 - p
    if floor is None:
        floor = level + (int(math.ceil(60 / math.log(p / q))) if q > 0 else 1)
    n = level + floor  # unknowns at -floor .. level-1
    ab = np.zeros((3, n))
    ab[1, :] = 1.0
    ab[0, 1:] = -p
    ab[2, :-1] = -q
    ab[1, 0] = 1.0
    ab[0, 1] = -1.0  # reflecting: h(-floor) = 1 + h(-floor+1)
    rhs = np.ones(n)
    h = scipy.linalg.solve_banded((1, 1), ab, rhs)
    return float(h[floor])


def companion_hitting_time_mc(p: float, level: int, n_walks: int, seed: int = 0,
                              step_cap: int = 10**7) -> MCEstimate:
    """Monte Carlo estimate of ``E T_level`` for the companion walk."""
    keys = keyed.key(seed, keyed.TAG_COMPANION, np.arange(n_walks))
    x = np.zeros(n_walks, dtype=np.int64)
    t = np.zeros(n_walks, dtype=np.int64)
    act = np.arange(n_walks)
    step = 0
    while act.size and step < step_cap:
        u = keyed.uniform(keyed.fold(keys[act], step))
        x[act] += np.where(u < p, 1, -1)
        t[act] += 1
        act = act[x[act] < level]
        step += 1
    return mean_estimate(t)

