"""Renormalization scales, their admissibility conditions and box verdicts.

Scales satisfy ``N_k = a_k N'_k``, ``N'_{k+1} = b_k N'_k`` and
``N_{k+1} = alpha_k N_k`` with ``alpha_k = b_k a_{k+1} / a_k``. The concrete
choice is ``a_0 = 2``, ``a_{k+1} = (k+1+K)^3``, ``b_k = a_k (k+1+K)^2`` and
``K = 22 floor(eps^-6)``, started from ``N_0 = N L`` with
``L = 2 floor(theta/eps)`` and ``N = L^3``. All sequence arithmetic uses
Python integers and fractions, so nothing overflows.

Box verdicts:

* a 0-box is good when its frontal exit probability from the middle-frontal
  part and its expected exit time from that part's back side clear two
  configured thresholds;
* a ``(k+1)``-box is good when a single ``k``-box meets every bad ``k``-box
  that intersects it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import mpmath
import numpy as np

from .ballistic import default_L
from .environment import ParameterError, alpha_d, as_environment, law_lambda
from .green import absorb
from .lattice import LATERAL_FACTOR, Box, CapacityError, Rect, Side
from .walker import DEFAULT_STEP_CAP, mean_estimate, run_batch, wilson

__all__ = [
    "BadProbRecursion",
    "BoxVerdict",
    "ConditionAudit",
    "ScaleSequence",
    "bad_prob_recursion",
    "box_of_cell",
    "c7_closed_form",
    "classify_box0",
    "classify_box_k",
    "make_scale_sequence",
    "middle_frontal_k",
    "verify_conditions",
    "xi_k",
    "xi_sequence_check",
]

K_MAX_BUDGET = 10**4


# ---------------------------------------------------------------------------
# scale sequences


@dataclass(frozen=True)
class ScaleSequence:
    """Materialized scales ``k = 0, ..., k_max`` (exact integers)."""

    epsilon: float
    theta: float
    K: int
    K_overridden: bool
    L: int
    N0: int
    a: tuple[int, ...]
    b: tuple[int, ...]
    alpha: tuple[int, ...]
    N: tuple[int, ...]
    N_prime: tuple[int, ...]
    k_max: int

    @property
    def NL(self) -> int:
        return self.N0

    def to_rows(self) -> list[dict]:
        return [{"k": k, "a": self.a[k], "b": self.b[k], "alpha": self.alpha[k],
                 "N": self.N[k], "N_prime": self.N_prime[k]} for k in range(self.k_max + 1)]


def concrete_K(epsilon: float) -> int:
    """``22 floor(eps^-6)``, with the floor taken exactly for rational input."""
    inv = Fraction(1) / Fraction(epsilon)
    return 22 * math.floor(inv**6)


def make_scale_sequence(epsilon: float, k_max: int, K_override: int | None = None,
                        theta: float = 0.5, N0_override: int | None = None) -> ScaleSequence:
    """Build the concrete scale sequence.

    Parameters
    ----------
    epsilon : float
        In ``(0, 1)``.
    k_max : int
        Last level materialized, at most ``10**4``.
    K_override : int, optional
        Desk-scale replacement for ``K``; recorded in ``K_overridden``.
    theta : float
        Enters ``L = 2 floor(theta/eps)``.
    N0_override : int, optional
        Replaces ``N_0 = L^4``; must be even so ``N'_0 = N_0 / 2``.
    """
    if not 0.0 < epsilon < 1.0:
        raise ParameterError("epsilon must lie in (0, 1)")
    if not 0 <= k_max <= K_MAX_BUDGET:
        raise ParameterError(f"k_max must lie in [0, {K_MAX_BUDGET}]")
    K = concrete_K(epsilon) if K_override is None else int(K_override)
    if K < 0:
        raise ParameterError("K must be nonnegative")
    L = default_L(theta, epsilon)
    N0 = L**4 if N0_override is None else int(N0_override)
    if N0 < 2 or N0 % 2:
        raise ParameterError("N_0 must be an even integer >= 2 (N'_0 = N_0 / 2)")
    a = [2] + [(k + 1 + K) ** 3 for k in range(k_max + 1)]
    b = [a[k] * (k + 1 + K) ** 2 for k in range(k_max + 1)]
    alpha = [a[k + 1] * b[k] // a[k] for k in range(k_max + 1)]
    Np = [N0 // 2]
    for k in range(k_max):
        Np.append(b[k] * Np[k])
    N = [a[k] * Np[k] for k in range(k_max + 1)]
    return ScaleSequence(float(epsilon), float(theta), K, K_override is not None, L, N0,
                         tuple(a[:k_max + 1]), tuple(b), tuple(alpha), tuple(N), tuple(Np), k_max)


# ---------------------------------------------------------------------------
# condition audit


@dataclass(frozen=True)
class ConditionAudit:
    """Verdicts for C1 to C7 on the materialized range.

    ``conditions[name]`` has ``holds`` plus witness or violation details.
    ``c_lower_star`` is the smallest constant for C6, ``c_upper_star`` the
    smallest for C7 with exponent 3, and ``c_upper_star_sharp`` with
    exponent 6.
    """

    conditions: dict
    c_lower_star: float
    c_upper_star: float
    c_upper_star_sharp: float
    K: int
    K_overridden: bool
    k_max: int

    @property
    def all_hold(self) -> bool:
        return all(v["holds"] for v in self.conditions.values())

    def to_dict(self) -> dict:
        return {"conditions": self.conditions, "c_lower_star": self.c_lower_star,
                "c_upper_star": self.c_upper_star, "c_upper_star_sharp": self.c_upper_star_sharp,
                "K": self.K, "K_overridden": self.K_overridden, "k_max": self.k_max}


def _log_over_upper(a: int) -> Fraction:
    """Exact rational upper bound on ``log(a)/a`` from interval arithmetic."""
    with mpmath.workprec(80):
        iv = mpmath.iv.log(mpmath.iv.mpf(a)) / a
        return _mpf_fraction(iv.b)


def _mpf_fraction(x) -> Fraction:
    man, exp = mpmath.mpf(x).man_exp
    return Fraction(int(man)) * (Fraction(2) ** int(exp))


def c7_closed_form(K: int) -> mpmath.mpf:
    """``prod_{k>=1} (1 - 8/(k+K)^2)`` in closed form via the Gamma function."""
    c = mpmath.sqrt(8)
    n = K + 1
    return mpmath.gamma(n) ** 2 / (mpmath.gamma(n - c) * mpmath.gamma(n + c))


def verify_conditions(seq: ScaleSequence) -> ConditionAudit:
    """Check C1 to C7 for ``k <= k_max``.

    C1 to C3 and C5 are decided exactly: rationals plus a certified upper
    bound on ``log a / a``, so a pass is a proof on the materialized range.
    C4 reports ``max log(alpha_k)/a_k``; C6 and C7 report the smallest
    constants that make them hold on the range.
    """
    a, b, al, km = seq.a, seq.b, seq.alpha, seq.k_max
    cond = {}
    cond["C1"] = {"holds": a[0] == 2 and 2 * seq.N_prime[0] == seq.N0,
                  "a0": a[0], "N_prime_0": seq.N_prime[0], "NL": seq.N0}
    bad = [k for k in range(km) if not a[k + 1] > a[k]]
    cond["C2"] = {"holds": not bad, "first_violation": bad[0] if bad else None}
    bad = [k for k in range(km + 1) if not 22 * a[k] <= b[k]]
    cond["C3"] = {"holds": not bad, "first_violation": bad[0] if bad else None}
    ratios = [math.log(al[k]) / a[k] for k in range(km + 1)]
    kmax4 = int(np.argmax(ratios))
    cond["C4"] = {"holds": all(math.isfinite(r) for r in ratios),
                  "sup_log_alpha_over_a": ratios[kmax4], "argmax": kmax4,
                  "tail_value": ratios[-1]}
    bad5, worst = [], None
    for k in range(1, km + 1):
        lhs = (Fraction(2, a[k]) + _log_over_upper(a[k - 1]) / 12
               + Fraction(seq.N0, al[k - 1]))
        rhs = Fraction(1, (k + 1) ** 2)
        slack = float((rhs - lhs) / rhs)
        if worst is None or slack < worst[1]:
            worst = (k, slack)
        if not lhs < rhs:
            bad5.append(k)
    cond["C5"] = {"holds": not bad5, "violations": bad5[:20], "n_violations": len(bad5),
                  "first_violation": bad5[0] if bad5 else None,
                  "tightest_k": worst[0] if worst else None,
                  "tightest_relative_slack": worst[1] if worst else None}
    log_eps = math.log(1.0 / seq.epsilon)
    partial = 0.0
    c_star = 0.0
    for j in range(1, km + 1):
        partial += math.log(al[j - 1])
        c_star = max(c_star, partial / (j * j * log_eps))
    cond["C6"] = {"holds": math.isfinite(c_star), "c_star": c_star}
    with mpmath.workdps(40):
        prod = mpmath.mpf(1)
        for k in range(1, km + 1):
            prod *= 1 - mpmath.mpf(8 * a[k - 1]) / b[k - 1]
        direct = mpmath.mpf(1)
        for k in range(1, km + 1):
            direct *= 1 - mpmath.mpf(8) / (k + seq.K) ** 2
        limit = c7_closed_form(seq.K) if seq.K > 2 else mpmath.mpf("nan")
        deficit = 1 - prod
        c_up = float(deficit / mpmath.mpf(seq.epsilon) ** 3)
        c_up6 = float(deficit / mpmath.mpf(seq.epsilon) ** 6)
        sharp_c = 128 * mpmath.zeta(3) / 11
        sharp_ok = bool(limit >= 1 - sharp_c * mpmath.mpf(seq.epsilon) ** 6) if seq.K > 2 else False
        cond["C7"] = {"holds": bool(prod > 0), "product": float(prod),
                      "sharp_bound_constant": float(sharp_c), "sharp_bound_holds": sharp_ok,
                      "closed_form_partial": float(direct),
                      "partial_vs_closed_form": float(abs(prod - direct)),
                      "infinite_product": float(limit),
                      "c_upper_star": c_up, "c_upper_star_sharp": c_up6}
    return ConditionAudit(cond, c_star, c_up, c_up6, seq.K, seq.K_overridden, km)


# ---------------------------------------------------------------------------
# Xi_k


def xi_k(k: int) -> Fraction:
    """``prod_{j=1}^k (1 - 1/(j+1)^2)`` exactly; telescopes to ``(k+2)/(2(k+1))``."""
    if k < 0:
        raise ParameterError("k must be nonnegative")
    return Fraction(k + 2, 2 * (k + 1))


def xi_sequence_check(k_max: int) -> dict:
    """Multiply the factors one by one in exact integers and audit them.

    Returns whether every ``Xi_k > 1/2``, whether ``Xi_k - 1/2`` decreases
    strictly, and whether each product equals :func:`xi_k`.
    """
    num, den = 1, 1
    above = decreasing = matches = True
    prev_gap = None
    for j in range(1, k_max + 1):
        m = (j + 1) * (j + 1)
        num, den = num * (m - 1), den * m
        g = math.gcd(num, den)
        num, den = num // g, den // g
        gap = (2 * num - den, 2 * den)
        above &= gap[0] > 0
        if prev_gap is not None:
            decreasing &= gap[0] * prev_gap[1] < prev_gap[0] * gap[1]
        prev_gap = gap
        if j & (j - 1) == 0 or j == k_max:
            matches &= Fraction(num, den) == xi_k(j)
    return {"k_max": k_max, "all_above_half": bool(above), "gap_decreasing": bool(decreasing),
            "matches_closed_form": bool(matches),
            "final_gap": prev_gap[0] / prev_gap[1] if prev_gap else 0.0}


# ---------------------------------------------------------------------------
# bad-box probability recursion


@dataclass(frozen=True)
class BadProbRecursion:
    """``m_k = m_0 - 12 d sum_{j<=k} log(N_j)/2^j`` and its certificates."""

    m: list[float]
    log_bounds: list[float]
    recursion_holds: bool
    first_failure: int | None
    inf_m: float
    inf_positive: bool
    series_partial: list[float]
    cauchy_after_60: float
    union_term: list[float]
    union_monotone_from: int | None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def bad_prob_recursion(seq: ScaleSequence, m0: float, d: int) -> BadProbRecursion:
    """Evaluate the probability recursion ``q_k <= (2 N_k)^(6d) q_{k-1}^2``.

    With ``q_{k-1} <= exp(-m_{k-1} 2^(k-1))`` the step is certified when
    ``m_{k-1} 2^k - 6d log(2 N_k) >= m_k 2^k``. The check runs in high
    precision. ``log_bounds[k]`` is ``-m_k 2^k``, the log of the bound.
    """
    if m0 <= 0:
        raise ParameterError("m0 must be positive")
    km = seq.k_max
    dps = 30 + int(0.31 * km) + 10
    with mpmath.workdps(dps):
        logs = [mpmath.log(mpmath.mpf(n)) for n in seq.N]
        m = [mpmath.mpf(m0)]
        series = [mpmath.mpf(0)]
        for k in range(1, km + 1):
            series.append(series[-1] + logs[k] / mpmath.mpf(2) ** k)
            m.append(m[0] - 12 * d * series[-1])
        fail = None
        for k in range(1, km + 1):
            two_k = mpmath.mpf(2) ** k
            lhs = m[k - 1] * two_k - 6 * d * mpmath.log(2 * mpmath.mpf(seq.N[k]))
            if lhs < m[k] * two_k:
                fail = k
                break
        union = [float(6 * d * mpmath.log(2 * mpmath.mpf(seq.N[k])) / mpmath.mpf(2) ** k)
                 for k in range(km + 1)]
        cauchy = float(abs(series[-1] - series[60])) if km > 60 else float("nan")
        m_f = [float(v) for v in m]
        bounds = [float(-m[k] * mpmath.mpf(2) ** k) for k in range(km + 1)]
    mono = None
    for r in range(km + 1):
        if all(union[i + 1] < union[i] for i in range(r, km)):
            mono = r
            break
    return BadProbRecursion(m_f, bounds, fail is None, fail, min(m_f), min(m_f) > 0,
                            [float(s) for s in series], cauchy, union, mono)


# ---------------------------------------------------------------------------
# box verdicts


@dataclass(frozen=True)
class BoxVerdict:
    """Verdict on one box with the evidence and constants that produced it."""

    level: int
    box_id: tuple
    verdict: str
    evidence: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    @property
    def good(self) -> bool:
        return self.verdict == "good"

    def to_dict(self) -> dict:
        return {"level": self.level, "box_id": list(self.box_id), "verdict": self.verdict,
                "evidence": self.evidence, "constants": self.constants}


def middle_frontal_k(N: int, N_prime: int, center) -> tuple[Rect, Rect]:
    """Middle-frontal ``k``-part of ``B_N(x)`` and its back side.

    ``N - N' <= (y-x).e1 < N`` and ``|(y-x).e_i| < N^3``.
    """
    c = np.asarray(center, dtype=object)
    w = N**3 - 1
    lo = [int(v) - w for v in c]
    hi = [int(v) + w for v in c]
    lo[0], hi[0] = int(c[0]) + N - N_prime, int(c[0]) + N - 1
    back_hi = list(hi)
    back_hi[0] = lo[0]
    return Rect(lo, hi), Rect(list(lo), back_hi)


def box_of_cell(z, N: int, N_prime: int) -> np.ndarray:
    """Centre of the ``k``-box whose middle-frontal part is the cell ``z``."""
    z = [int(v) for v in z]
    pitch_t = 2 * N**3 - 1
    c = [z[0] * N_prime - N + N_prime]
    c += [zi * pitch_t + N**3 - 1 for zi in z[1:]]
    return np.array(c, dtype=object)


def _thresholds(law, epsilon, delta, c2, c4, lambda_power, n_prime, d):
    lam = law_lambda(law)
    front = 1.0 - math.exp(-(c2 / 2.0) / epsilon)
    if lam <= 0:
        time_thr = math.inf
    else:
        time_thr = (1.0 / lam - c4 / lam**lambda_power * epsilon ** (alpha_d(d) - delta)) * n_prime
    return lam, front, time_thr


def classify_box0(env, law, N0: int, center=None, epsilon: float | None = None,
                  delta: float = 0.1, c2: float = 1.0, c4: float = 1.0,
                  lambda_power: int = 2, exact_budget: int = 2 * 10**5,
                  n_walks: int = 200, n_starts: int = 16, seed: int = 0,
                  level: float = 0.95, step_cap: int = DEFAULT_STEP_CAP,
                  box_id: tuple = (0,)) -> BoxVerdict:
    """Good/bad verdict for the 0-box ``B_{N0}(center)`` in a fixed environment.

    Good means ``inf P_x(exit through the front) >= 1 - exp(-c2/(2 eps))``
    over the middle-frontal part and ``inf E_x T > (1/lambda - c4
    lambda^-p eps^(alpha(d)-delta)) N0'`` over its back side, with
    ``p = lambda_power``.

    Within ``exact_budget`` sites both infima come from exact absorption
    solves over every point. Otherwise ``n_starts`` points of each set are
    sampled and ``n_walks`` walks run from each; the verdict is ``bad`` if
    some confidence interval lies entirely below its threshold, ``good``
    if every sampled interval clears its threshold (noted as sampled
    coverage), and ``inconclusive`` otherwise.
    """
    env = as_environment(env)
    d = law.d
    eps = law.epsilon if epsilon is None else float(epsilon)
    if N0 < 2 or N0 % 2:
        raise ParameterError("N0 must be an even integer >= 2")
    n_prime = N0 // 2
    center = np.zeros(d, dtype=np.int64) if center is None else np.asarray(center, dtype=np.int64)
    lam, thr_front, thr_time = _thresholds(law, eps, delta, c2, c4, lambda_power, n_prime, d)
    consts = {"c2": c2, "c4": c4, "delta": delta, "epsilon": eps, "lambda_power": lambda_power,
              "N0": N0, "N0_prime": n_prime, "lambda": lam,
              "front_threshold": thr_front, "time_threshold": thr_time}
    box = Box(N0, center, site_budget=None)
    star, back = middle_frontal_k(N0, n_prime, center)
    size = box.expected_size()
    if size <= exact_budget:
        sides = box.boundary_sides
        f = (sides == Side.FRONTAL).astype(np.float64)
        m = box.boundary.shape[0]
        H = absorb(env, box, np.stack([f, np.zeros(m)], axis=1), None, budget=None)
        T = absorb(env, box, np.zeros(m), np.ones(box.n_sites), budget=None)
        in_star = star.contains(box.sites)
        in_back = back.contains(box.sites)
        inf_front = float(H[in_star, 0].min())
        inf_time = float(T[in_back].min())
        good = inf_front >= thr_front and inf_time > thr_time
        ev = {"mode": "exact", "sites": size, "inf_front": inf_front, "inf_time": inf_time,
              "front_ok": inf_front >= thr_front, "time_ok": inf_time > thr_time}
        return BoxVerdict(0, tuple(box_id), "good" if good else "bad", ev, consts)
    if size > 10**12:
        raise CapacityError("box too large even for sampled classification")
    rng = np.random.default_rng(seed)
    pts_front = star.sample(n_starts, rng)
    pts_back = back.sample(n_starts, rng)
    z = n_starts
    adj = 1 - (1 - level) / (2 * z)
    fronts, times = [], []
    for i, x in enumerate(pts_front):
        res = run_batch(env, box, np.repeat(x[None, :], n_walks, axis=0),
                        np.arange(n_walks) + (2 * i) * n_walks, step_cap=step_cap, seed=seed)
        k = int(np.count_nonzero(res.code == Side.FRONTAL))
        fronts.append(wilson(k, n_walks, adj))
    for i, x in enumerate(pts_back):
        res = run_batch(env, box, np.repeat(x[None, :], n_walks, axis=0),
                        np.arange(n_walks) + (2 * i + 1) * n_walks, step_cap=step_cap, seed=seed)
        times.append(mean_estimate(res.time.astype(np.float64), adj))
    below = any(e.hi < thr_front for e in fronts) or any(e.hi <= thr_time for e in times)
    above = all(e.lo >= thr_front for e in fronts) and all(e.lo > thr_time for e in times)
    verdict = "bad" if below else ("good" if above else "inconclusive")
    ev = {"mode": "sampled", "sites": size, "n_starts": n_starts, "n_walks": n_walks,
          "coverage_note": "infima over sampled points only",
          "min_front": min(e.mean for e in fronts), "min_time": min(e.mean for e in times),
          "front": [e.to_dict() for e in fronts], "time": [e.to_dict() for e in times]}
    return BoxVerdict(0, tuple(box_id), verdict, ev, consts)


def _box_extent(center, N: int) -> list[tuple[int, int]]:
    """Inclusive coordinate ranges of the interior of ``B_N(center)``."""
    c = [int(v) for v in center]
    w = LATERAL_FACTOR * N**3 - 1
    ext = [(c[0] - (N - 1) // 2, c[0] + N - 1)]
    ext += [(ci - w, ci + w) for ci in c[1:]]
    return ext


def _cell_range(parent_ext, N: int, N_prime: int) -> list[tuple[int, int]]:
    """Cells ``z`` whose ``k``-box meets the parent box (per-axis inclusive range)."""
    lo0 = -((N - 1) // 2) - N + N_prime
    hi0 = N - 1 - N + N_prime
    out = [(-((-(parent_ext[0][0] - hi0)) // N_prime),
            (parent_ext[0][1] - lo0) // N_prime)]
    w = LATERAL_FACTOR * N**3 - 1
    pt = 2 * N**3 - 1
    off = N**3 - 1
    for lo, hi in parent_ext[1:]:
        out.append((-((-(lo - w - off)) // pt), (hi + w - off) // pt))
    return out


def classify_box_k(k: int, parent_center, N_k: int, N_prime_k: int, N_parent: int,
                   verdicts: Mapping[tuple, str]) -> BoxVerdict:
    """Verdict on the ``(k+1)``-box ``B_{N_parent}(parent_center)``.

    ``verdicts`` maps a cell index ``z`` of the level-``k`` partition to
    ``"good"``, ``"bad"`` or ``"inconclusive"`` for the ``k``-box built on
    that cell. The parent is good iff some ``k``-box ``Q'`` meets every
    bad ``k``-box meeting the parent. All ``k``-boxes are translates of one
    rectangle of side lengths ``s_i``, so ``Q'`` exists iff along every axis
    the bad centres spread over at most ``2 (s_i - 1)``. Missing cells or
    inconclusive sub-verdicts make the result inconclusive unless both
    resolutions agree.
    """
    parent_ext = _box_extent(parent_center, N_parent)
    rng = _cell_range(parent_ext, N_k, N_prime_k)
    d = len(rng)
    sizes = [hi - lo + 1 for lo, hi in rng]
    total = math.prod(max(s, 0) for s in sizes)

    def inside(z):
        return all(lo <= zi <= hi for zi, (lo, hi) in zip(z, rng))

    present = {tuple(int(v) for v in z): v for z, v in verdicts.items()
               if len(z) == d and inside(z)}
    missing = total - len(present)
    bad = [z for z, v in present.items() if v == "bad"]
    unsure = [z for z, v in present.items() if v not in ("good", "bad")]
    ext0 = _box_extent([0] * d, N_k)
    span = [2 * (hi - lo) for lo, hi in ext0]

    def coverable(zs) -> bool:
        if len(zs) <= 1:
            return True
        cs = [box_of_cell(z, N_k, N_prime_k) for z in zs]
        return all(max(int(c[i]) for c in cs) - min(int(c[i]) for c in cs) <= span[i]
                   for i in range(d))

    strict = coverable(bad + unsure) if missing == 0 else False
    lenient = coverable(bad)
    if missing == 0 and strict:
        verdict = "good"
    elif not lenient:
        verdict = "bad"
    else:
        verdict = "inconclusive"
    ev = {"n_subboxes": total, "n_present": len(present), "n_missing": missing,
          "bad": [list(z) for z in sorted(bad)], "inconclusive": [list(z) for z in sorted(unsure)],
          "cell_range": [list(r) for r in rng]}
    return BoxVerdict(k + 1, tuple(int(v) for v in parent_center), verdict, ev,
                      {"N_k": N_k, "N_prime_k": N_prime_k, "N_parent": N_parent})
