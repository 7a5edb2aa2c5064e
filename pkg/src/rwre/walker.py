"""Trajectory simulation and Monte Carlo estimators.

All walks of a batch advance in lockstep as numpy arrays. The uniform
driving step ``k`` of walk ``s`` is ``uniform(hash(seed, WALK, s, k))``, so
a trajectory depends only on its stream id and never on batch layout or
thread count. Under a law, walk ``s`` runs in its own environment
``env_id = s`` (annealed sampling); under a fixed environment every walk
shares it (quenched sampling).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from . import keyed
from .environment import EnvironmentLaw, as_environment
from .lattice import Domain, DomainError, Side, Slab, unit_vectors

__all__ = [
    "DEFAULT_STEP_CAP",
    "MCEstimate",
    "TrajectoryOutcome",
    "BatchOutcome",
    "ExitDistribution",
    "HittingRow",
    "wilson",
    "mean_estimate",
    "simulate",
    "run_batch",
    "run_until_exit",
    "estimate_exit_distribution",
    "estimate_velocity",
    "estimate_hitting_ratios",
    "parallel_chunks",
]

DEFAULT_STEP_CAP = 10**7
CAP_SIDE = -1


@dataclass(frozen=True)
class MCEstimate:
    """Monte Carlo estimate with a symmetric standard error and a CI."""

    mean: float
    stderr: float
    n: int
    ci_level: float = 0.95
    lo: float = float("nan")
    hi: float = float("nan")

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n,
                "ci_level": self.ci_level, "lo": self.lo, "hi": self.hi}


def _z(level: float) -> float:
    return float(norm.ppf(0.5 + level / 2))


def wilson(k: int, n: int, level: float = 0.95) -> MCEstimate:
    """Proportion ``k/n`` with its Wilson score interval.

    ``stderr`` is the interval half-width divided by the normal quantile,
    which stays positive when ``k`` is 0 or ``n``.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    z = _z(level)
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return MCEstimate(p, half / z, n, level, max(0.0, centre - half), min(1.0, centre + half))


def mean_estimate(x, level: float = 0.95) -> MCEstimate:
    """Sample mean of i.i.d. values with the usual standard error."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 1:
        raise ValueError("need at least one sample")
    m = math.fsum(x.tolist()) / n
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    z = _z(level)
    return MCEstimate(m, se, n, level, m - z * se, m + z * se)


@dataclass(frozen=True)
class TrajectoryOutcome:
    exit_point: np.ndarray
    exit_side: str
    exit_time: int
    displacement: np.ndarray
    step_cap_hit: bool = False
    transverse_cap_hit: bool = False

    @property
    def cap_hit(self) -> bool:
        return self.step_cap_hit or self.transverse_cap_hit


@dataclass(frozen=True)
class BatchOutcome:
    """Final positions, stop codes and stopping times of a batch of walks.

    ``code`` is the value returned by the stop rule, or ``-1`` when the
    step cap was reached first.
    """

    stream_ids: np.ndarray
    position: np.ndarray
    code: np.ndarray
    time: np.ndarray


class _Driver:
    """Per-walk transition lookup and driving uniforms."""

    def __init__(self, env, stream_ids: np.ndarray, seed: int | None):
        self.annealed = isinstance(env, EnvironmentLaw)
        if self.annealed:
            self.law = env
            self.env_keys = env.env_key(stream_ids)
            base_seed = env.master_seed if seed is None else seed
        else:
            self.env = as_environment(env)
            base_seed = 0 if seed is None else seed
        self.walk_keys = keyed.key(base_seed, keyed.TAG_WALK, stream_ids)

    def probs(self, pos: np.ndarray, sel: np.ndarray) -> np.ndarray:
        if self.annealed:
            return self.law.omega_atoms[self.law.atoms_from_key(self.env_keys[sel], pos)]
        return np.asarray(self.env.probs(pos))

    def uniforms(self, sel: np.ndarray, step: int) -> np.ndarray:
        return keyed.uniform(keyed.fold(self.walk_keys[sel], step))


def _choose(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(p, axis=1)
    idx = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1)


def simulate(env, starts, stream_ids, stop: Callable[[np.ndarray, np.ndarray], np.ndarray] | None,
             step_cap: int, seed: int | None = None, record: bool = False, step_offset=0):
    """Advance walks until ``stop`` returns a nonzero code or the cap is hit.

    Parameters
    ----------
    env : EnvironmentLaw or environment object
    starts : array (n, d)
    stream_ids : array (n,)
    stop : callable or None
        ``stop(positions, time) -> int codes`` evaluated after every step on
        the active walks; ``None`` runs exactly ``step_cap`` steps.
    step_cap : int
    record : bool
        Also return the list of per-step positions (single walks only).
    step_offset : int or array (n,)
        Index of the first driving uniform, for walks continued in pieces.
    """
    pos = np.array(np.atleast_2d(starts), dtype=np.int64)
    sid = np.atleast_1d(np.asarray(stream_ids, dtype=np.int64))
    n, d = pos.shape
    if sid.size != n:
        raise ValueError("one stream id per start is required")
    drv = _Driver(env, sid, seed)
    offset = np.broadcast_to(np.asarray(step_offset, dtype=np.int64), (n,))
    U = unit_vectors(d)
    final = pos.copy()
    code = np.full(n, CAP_SIDE, dtype=np.int64)
    time = np.full(n, step_cap, dtype=np.int64)
    act = np.arange(n)
    path = [pos[0].copy()] if record else None
    for step in range(step_cap):
        if act.size == 0:
            break
        p = drv.probs(pos, act)
        u = drv.uniforms(act, step + offset[act])
        pos += U[_choose(p, u)]
        if record:
            path.append(pos[0].copy())
        if stop is None:
            continue
        c = np.asarray(stop(pos, step + 1))
        done = c != 0
        if done.any():
            di = act[done]
            final[di] = pos[done]
            code[di] = c[done]
            time[di] = step + 1
            keep = ~done
            act, pos = act[keep], pos[keep]
    if act.size:
        final[act] = pos
    out = BatchOutcome(sid, final, code, time)
    return (out, np.array(path)) if record else out


def parallel_chunks(fn, n: int, threads: int = 1, chunk: int = 4096):
    """Apply ``fn(lo, hi)`` to consecutive index ranges and keep their order."""
    ranges = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    if threads <= 1 or len(ranges) == 1:
        return [fn(lo, hi) for lo, hi in ranges]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda r: fn(*r), ranges))


def _domain_stop(domain: Domain):
    def stop(pos, _t):
        return domain.classify(pos).astype(np.int64)
    return stop


def run_batch(env, domain: Domain, starts, stream_ids, step_cap: int = DEFAULT_STEP_CAP,
              seed: int | None = None) -> BatchOutcome:
    """Run walks until they leave ``domain``; codes are :class:`Side` values."""
    starts = np.atleast_2d(np.asarray(starts, dtype=np.int64))
    if np.any(domain.classify(starts) != Side.INTERIOR):
        raise DomainError("every start must be an interior site")
    return simulate(env, starts, stream_ids, _domain_stop(domain), step_cap, seed)


def _side_name(code: int) -> str:
    return "cap" if code == CAP_SIDE else Side(code).name.lower()


def run_until_exit(env, domain: Domain, start, stream_id: int = 0,
                   step_cap: int = DEFAULT_STEP_CAP, seed: int | None = None) -> TrajectoryOutcome:
    """One trajectory from ``start`` until its first exit from ``domain``.

    With a law, the walk runs in environment ``env_id = stream_id``. For a
    slab, reaching the lateral side means the transverse window was too
    small; that is reported as ``transverse_cap_hit`` rather than an exit.
    """
    start = np.asarray(start, dtype=np.int64)
    res = run_batch(env, domain, start[None, :], [stream_id], step_cap, seed)
    c = int(res.code[0])
    lateral_cap = isinstance(domain, Slab) and c == Side.LATERAL
    return TrajectoryOutcome(res.position[0], _side_name(c), int(res.time[0]),
                             res.position[0] - start, c == CAP_SIDE, lateral_cap)


@dataclass(frozen=True)
class ExitDistribution:
    """Exit-side frequencies; counts over sides plus ``cap`` sum to ``n``."""

    estimates: dict
    counts: dict
    n: int

    def __getitem__(self, side: str) -> MCEstimate:
        return self.estimates[side]


def estimate_exit_distribution(env, domain: Domain, start, n_walks: int, stream_offset: int = 0,
                               step_cap: int = DEFAULT_STEP_CAP, seed: int | None = None,
                               threads: int = 1, level: float = 0.95) -> ExitDistribution:
    """Exit-side probabilities from ``start`` with Wilson intervals.

    A law gives annealed estimates (fresh environment per walk).
    """
    if n_walks < 1:
        raise ValueError("n_walks must be positive")
    start = np.asarray(start, dtype=np.int64)

    def work(lo, hi):
        starts = np.broadcast_to(start, (hi - lo, start.size))
        return run_batch(env, domain, starts, np.arange(stream_offset + lo, stream_offset + hi),
                         step_cap, seed).code

    codes = np.concatenate(parallel_chunks(work, n_walks, threads))
    names = ["frontal", "back", "lateral", "other", "cap"]
    vals = [Side.FRONTAL, Side.BACK, Side.LATERAL, Side.OTHER, CAP_SIDE]
    counts = {nm: int(np.count_nonzero(codes == v)) for nm, v in zip(names, vals)}
    return ExitDistribution({k: wilson(c, n_walks, level) for k, c in counts.items()}, counts, n_walks)


def estimate_velocity(env, n_steps: int, n_walks: int, d: int | None = None, stream_offset: int = 0,
                      seed: int | None = None, threads: int = 1, chunk: int = 4096) -> MCEstimate:
    """Estimate of ``X_n.e1 / n`` across independent walks from the origin."""
    if n_steps < 1 or n_walks < 1:
        raise ValueError("n_steps and n_walks must be positive")
    dim = env.d if d is None else d

    def work(lo, hi):
        starts = np.zeros((hi - lo, dim), dtype=np.int64)
        res = simulate(env, starts, np.arange(stream_offset + lo, stream_offset + hi), None,
                       n_steps, seed)
        return res.position[:, 0] / n_steps

    x = np.concatenate(parallel_chunks(work, n_walks, threads, chunk))
    return mean_estimate(x)


@dataclass(frozen=True)
class HittingRow:
    """``T_n / n`` statistics at one level ``n`` of the hyperplane ``x.e1 = n``."""

    n: int
    estimate: MCEstimate | None
    n_hit: int
    n_capped: int

    @property
    def cap_fraction(self) -> float:
        tot = self.n_hit + self.n_capped
        return self.n_capped / tot if tot else 0.0


def estimate_hitting_ratios(env, n_list, n_walks: int, step_cap: int = DEFAULT_STEP_CAP,
                            d: int | None = None, stream_offset: int = 0, seed: int | None = None,
                            threads: int = 1, chunk: int = 4096) -> list[HittingRow]:
    """First hitting times ``T_n`` of ``{x.e1 = n}`` for every ``n`` in ``n_list``.

    Walks that do not reach a level within ``step_cap`` are counted in
    ``n_capped`` for that level; the mean is over walks that reached it.
    """
    levels = np.asarray(sorted(set(int(v) for v in n_list)), dtype=np.int64)
    if levels.size == 0 or levels[0] < 1:
        raise ValueError("levels must be positive integers")
    dim = env.d if d is None else d
    top = int(levels[-1])

    def work(lo, hi):
        m = hi - lo
        best = np.zeros(m, dtype=np.int64)
        hits = np.full((m, levels.size), -1, dtype=np.int64)
        ids = np.arange(m)

        def stop(pos, t):
            # walks in ``pos`` are the active ones, in their original order
            a = stop.active
            x1 = pos[:, 0]
            new = x1 > best[a]
            if new.any():
                best[a[new]] = x1[new]
                j = np.searchsorted(levels, x1[new])
                hit_lv = (j < levels.size) & (levels[np.minimum(j, levels.size - 1)] == x1[new])
                rows = a[new][hit_lv]
                hits[rows, j[hit_lv]] = t
            done = x1 >= top
            stop.active = a[~done]
            return done.astype(np.int64)

        stop.active = ids
        simulate(env, np.zeros((m, dim), dtype=np.int64),
                 np.arange(stream_offset + lo, stream_offset + hi), stop, step_cap, seed)
        return hits

    hits = np.concatenate(parallel_chunks(work, n_walks, threads, chunk))
    rows = []
    for k, n in enumerate(levels):
        h = hits[:, k]
        ok = h >= 0
        est = mean_estimate(h[ok] / n) if ok.any() else None
        rows.append(HittingRow(int(n), est, int(ok.sum()), int((~ok).sum())))
    return rows
