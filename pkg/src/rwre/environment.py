"""Environment laws on the perturbation band around the simple symmetric walk.

A site's transition vector is ``omega(x) = 1/(2d) + eps * xi(x)`` with
``xi`` drawn i.i.d. from a finite support of zero-sum perturbations
bounded by ``1/(4d)``. Site vectors are recomputed on demand from a keyed
hash of ``(master_seed, env_id, site)``, so an environment is never stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import keyed

__all__ = [
    "ParameterError",
    "EnvironmentLaw",
    "ConditionReport",
    "alpha_d",
    "kappa",
    "build_two_point_law",
    "point_mass_law",
    "ssrw_law",
    "law_lambda",
    "omega_audit",
    "check_condition",
    "sample_site",
    "local_drift",
    "random_omega",
    "QuenchedEnvironment",
    "HomogeneousEnvironment",
    "ArrayEnvironment",
    "as_environment",
    "omega_on",
]

TOL = 1e-12


class ParameterError(ValueError):
    """Inconsistent or infeasible model parameters."""


def kappa(d: int) -> float:
    """Uniform ellipticity constant ``1/(4d)`` of the band."""
    return 1.0 / (4 * d)


def alpha_d(d: int) -> float:
    """Exponent ``alpha(d)`` of the local drift condition: 2, 2.5 or 3."""
    if d < 2:
        raise ParameterError("dimension must be at least 2")
    return {2: 2.0, 3: 2.5}.get(d, 3.0)


def local_drift(p) -> np.ndarray:
    """Drift ``sum_e p(e) e`` of probability vectors of shape ``(..., 2d)``."""
    p = np.asarray(p, dtype=np.float64)
    return p[..., 0::2] - p[..., 1::2]


@dataclass(frozen=True)
class EnvironmentLaw:
    """I.i.d. product law with finite per-site support.

    Parameters
    ----------
    d : int
        Dimension, at least 2.
    epsilon : float
        Perturbation scale in ``(0, 1)``.
    xi : array, shape (n_atoms, 2d)
        Zero-sum perturbations with entries bounded by ``1/(4d)``.
    probs : array, shape (n_atoms,)
        Atom probabilities summing to one.
    master_seed : int
        Key of the site hash.
    """

    d: int
    epsilon: float
    xi: np.ndarray
    probs: np.ndarray
    master_seed: int = 0
    label: str = ""
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        xi = np.array(self.xi, dtype=np.float64, ndmin=2)
        pr = np.array(self.probs, dtype=np.float64, ndmin=1)
        d = int(self.d)
        if d < 2:
            raise ParameterError("dimension must be at least 2")
        if not 0.0 < self.epsilon < 1.0:
            raise ParameterError("epsilon must lie in (0, 1)")
        if xi.shape != (pr.size, 2 * d):
            raise ParameterError(f"support must have shape (n_atoms, {2 * d})")
        if np.any(pr < 0) or abs(math.fsum(pr) - 1.0) > TOL:
            raise ParameterError("support probabilities must be nonnegative and sum to 1")
        if np.any(np.abs(xi.sum(axis=1)) > TOL):
            raise ParameterError("perturbations must sum to zero")
        if np.any(np.abs(xi) > kappa(d) + TOL):
            raise ParameterError(f"perturbation entries must be bounded by 1/(4d) = {kappa(d)}")
        for a in (xi, pr):
            a.setflags(write=False)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "probs", pr)
        object.__setattr__(self, "master_seed", int(self.master_seed))
        cum = np.cumsum(pr)
        cum[-1] = 1.0
        object.__setattr__(self, "_cum", cum)

    # derived quantities -------------------------------------------------
    @property
    def n_atoms(self) -> int:
        return int(self.probs.size)

    @property
    def omega_atoms(self) -> np.ndarray:
        """Transition vectors of the atoms, shape ``(n_atoms, 2d)``."""
        return 1.0 / (2 * self.d) + self.epsilon * self.xi

    @property
    def drift_atoms(self) -> np.ndarray:
        return local_drift(self.omega_atoms)

    @property
    def is_deterministic(self) -> bool:
        return self.n_atoms == 1

    def with_seed(self, seed: int) -> "EnvironmentLaw":
        return EnvironmentLaw(self.d, self.epsilon, self.xi, self.probs, seed, self.label)

    # site sampling ------------------------------------------------------
    def env_key(self, env_id=0) -> np.ndarray:
        """Per-environment hash prefix; ``env_id`` may be an array."""
        return keyed.key(self.master_seed, keyed.TAG_ENV, env_id)

    def atoms_from_key(self, base, points) -> np.ndarray:
        """Atom index at each point given a precomputed environment key."""
        p = np.asarray(points, dtype=np.int64)
        if p.ndim == 1:
            p = p[None, :]
        if self.is_deterministic:
            return np.zeros(p.shape[0], dtype=np.intp)
        h = np.broadcast_to(base, (p.shape[0],))
        for i in range(self.d):
            h = keyed.fold(h, p[:, i])
        u = keyed.uniform(h)
        return np.searchsorted(self._cum, u, side="right")

    def site_atoms(self, points, env_id=0) -> np.ndarray:
        return self.atoms_from_key(self.env_key(env_id), points)

    def site_probs(self, points, env_id=0) -> np.ndarray:
        """Transition vectors at ``points`` in environment ``env_id``."""
        return self.omega_atoms[self.site_atoms(points, env_id)]

    # serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "epsilon": self.epsilon,
            "master_seed": self.master_seed,
            "support": [
                {"xi": [float(v) for v in x], "prob": float(p)}
                for x, p in zip(self.xi, self.probs)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EnvironmentLaw":
        sup = doc["support"]
        return cls(
            d=int(doc["d"]),
            epsilon=float(doc["epsilon"]),
            xi=np.array([s["xi"] for s in sup], dtype=np.float64),
            probs=np.array([s["prob"] for s in sup], dtype=np.float64),
            master_seed=int(doc.get("master_seed", 0)),
        )


def _direction_vector(d: int, pairs: dict[int, float]) -> np.ndarray:
    v = np.zeros(2 * d)
    for k, val in pairs.items():
        v[k] = val
    return v


def build_two_point_law(d: int, epsilon: float, lambda_target: float,
                        transverse_noise: float = 0.0, seed: int = 0,
                        kind: str = "switch") -> EnvironmentLaw:
    """Two-point mixture on ``xi(+-e1)`` hitting a prescribed ``lambda``.

    ``kind="switch"`` puts the full push ``xi(+-e1) = +-1/(4d)`` on an atom
    of probability ``q = 2 d lambda / eps`` and no perturbation otherwise.
    ``kind="flip"`` uses ``+-1/(4d)`` with probability ``1/2 + d lambda / eps``
    for the plus sign. A transverse noise ``t`` adds an independent fair sign
    ``s`` with ``xi(+-e_i) = +-s t`` on every transverse axis.

    Raises
    ------
    ParameterError
        If ``lambda_target`` exceeds the drift ceiling ``eps/(2d)`` or is negative.
    """
    k = kappa(d)
    ceiling = epsilon / (2 * d)
    if not 0.0 < epsilon < 1.0:
        raise ParameterError("epsilon must lie in (0, 1)")
    if lambda_target < 0 or lambda_target > ceiling * (1 + 1e-12):
        raise ParameterError(
            f"lambda_target={lambda_target} is infeasible: the drift ceiling of the band is "
            f"eps/(2d) = {ceiling}"
        )
    if not 0.0 <= transverse_noise <= k:
        raise ParameterError(f"transverse_noise must lie in [0, 1/(4d)] = [0, {k}]")
    push = _direction_vector(d, {0: k, 1: -k})
    if kind == "switch":
        q = min(2 * d * lambda_target / epsilon, 1.0)
        base = [(push, q), (np.zeros(2 * d), 1.0 - q)]
    elif kind == "flip":
        q = min(0.5 + d * lambda_target / epsilon, 1.0)
        base = [(push, q), (-push, 1.0 - q)]
    else:
        raise ParameterError(f"unknown law kind {kind!r}")
    atoms = []
    if transverse_noise > 0:
        t = np.zeros(2 * d)
        t[2::2], t[3::2] = transverse_noise, -transverse_noise
        for x, p in base:
            atoms += [(x + t, p / 2), (x - t, p / 2)]
    else:
        atoms = base
    atoms = [(x, p) for x, p in atoms if p > 0]
    law = EnvironmentLaw(
        d, epsilon,
        np.array([x for x, _ in atoms]), np.array([p for _, p in atoms]),
        seed, label=f"two-point/{kind}",
    )
    return law


def point_mass_law(d: int, epsilon: float, xi: Sequence[float], seed: int = 0) -> EnvironmentLaw:
    """Deterministic (homogeneous) law with a single perturbation."""
    return EnvironmentLaw(d, epsilon, np.array([xi], dtype=np.float64), np.array([1.0]), seed,
                          label="point-mass")


def ssrw_law(d: int, epsilon: float = 0.5, seed: int = 0) -> EnvironmentLaw:
    return point_mass_law(d, epsilon, np.zeros(2 * d), seed)


def law_lambda(law: EnvironmentLaw) -> float:
    """Exact ``lambda = E d(0).e1`` over the finite support."""
    return math.fsum(float(p) * float(v) for p, v in zip(law.probs, law.drift_atoms[:, 0]))


def omega_audit(law: EnvironmentLaw) -> dict:
    """Band membership audit: worst deviation from ``1/(2d)`` versus ``eps/(4d)``."""
    dev = float(np.max(np.abs(law.omega_atoms - 1.0 / (2 * law.d))))
    bound = law.epsilon / (4 * law.d)
    return {"max_deviation": dev, "bound": bound, "holds": dev <= bound + TOL,
            "min_weight": float(law.omega_atoms.min()), "kappa": kappa(law.d)}


@dataclass(frozen=True)
class ConditionReport:
    kind: str
    holds: bool
    lambda_: float
    threshold: float
    in_band: bool


def check_condition(law: EnvironmentLaw, kind: str = "QLD", eta: float | None = None) -> ConditionReport:
    """Check the quadratic local drift (``QLD``) or local drift (``LD``) condition.

    ``QLD``: ``lambda >= eps^2``. ``LD``: ``lambda >= eps^(alpha(d) - eta)``.
    Both also require band membership.
    """
    lam = law_lambda(law)
    band = omega_audit(law)["holds"]
    eps = law.epsilon
    if kind.upper() == "QLD":
        thr = eps**2
    elif kind.upper() == "LD":
        if eta is None or not 0 < eta < 1:
            raise ParameterError("LD requires eta in (0, 1)")
        thr = eps ** (alpha_d(law.d) - eta)
    else:
        raise ParameterError(f"unknown condition {kind!r}")
    return ConditionReport(kind.upper(), bool(band and lam >= thr * (1 - 1e-12)), lam, thr, band)


def sample_site(law: EnvironmentLaw, site, env_id: int = 0) -> np.ndarray:
    """Transition vector at one site; a pure function of ``(seed, env_id, site)``."""
    return law.site_probs(np.asarray(site, dtype=np.int64)[None, :], env_id)[0]


def random_omega(d: int, epsilon: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` random transition vectors in the band, shape ``(n, 2d)``.

    Zero-sum directions are drawn uniformly and scaled by a uniform factor
    so that the band constraint holds.
    """
    xi = rng.uniform(-1.0, 1.0, size=(n, 2 * d))
    xi -= xi.mean(axis=1, keepdims=True)
    scale = rng.uniform(0.0, 1.0, size=(n, 1)) * kappa(d) / np.abs(xi).max(axis=1, keepdims=True)
    return 1.0 / (2 * d) + epsilon * xi * scale


class QuenchedEnvironment:
    """One fixed environment of a law, evaluated lazily at any site."""

    def __init__(self, law: EnvironmentLaw, env_id: int = 0):
        self.law = law
        self.env_id = int(env_id)
        self.d = law.d
        self._key = law.env_key(env_id)

    def probs(self, points) -> np.ndarray:
        return self.law.omega_atoms[self.law.atoms_from_key(self._key, points)]


class HomogeneousEnvironment:
    """The same transition vector at every site."""

    def __init__(self, p):
        self.p = np.asarray(p, dtype=np.float64)
        if self.p.ndim != 1 or self.p.size % 2:
            raise ParameterError("transition vector must have even length 2d")
        if np.any(self.p < 0) or abs(self.p.sum() - 1) > TOL:
            raise ParameterError("transition vector must be a probability vector")
        self.d = self.p.size // 2

    def probs(self, points) -> np.ndarray:
        n = np.atleast_2d(np.asarray(points)).shape[0]
        return np.broadcast_to(self.p, (n, self.p.size))


class ArrayEnvironment:
    """Explicit transition vectors on the interior of a finite domain."""

    def __init__(self, domain, omega):
        self.domain = domain
        self.d = domain.d
        self.omega = np.asarray(omega, dtype=np.float64)
        if self.omega.shape != (domain.n_sites, 2 * domain.d):
            raise ParameterError("omega must have shape (n_sites, 2d)")

    def probs(self, points) -> np.ndarray:
        idx = self.domain.index_of(points)
        if np.any(idx < 0):
            raise ParameterError("environment queried outside its domain")
        return self.omega[idx]


def as_environment(env, env_id: int = 0):
    """Wrap a law as a quenched environment; pass other environments through."""
    if isinstance(env, EnvironmentLaw):
        return QuenchedEnvironment(env, env_id)
    if hasattr(env, "probs"):
        return env
    raise ParameterError("expected an EnvironmentLaw or an object with a probs(points) method")


def omega_on(env, domain) -> np.ndarray:
    """Transition vectors of ``env`` on the interior sites of ``domain``."""
    if isinstance(env, np.ndarray):
        return env
    return np.asarray(as_environment(env).probs(domain.sites), dtype=np.float64)

