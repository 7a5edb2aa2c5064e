"""Integer-lattice geometry: directions, slabs, boxes and level partitions.

Points are integer arrays of shape ``(d,)`` or ``(n, d)``. Domains are
predicates first: membership and boundary-side classification are
vectorized and never need the site list. A domain is materialized (sites,
boundary, neighbour table) lazily, under a site budget, only when a linear
solve needs it.

Directions are ordered ``[+e1, -e1, +e2, -e2, ...]`` everywhere in the
package, so a probability vector is an array of length ``2d`` in that
order.
"""

from __future__ import annotations

import math
from enum import IntEnum
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "DEFAULT_SITE_BUDGET",
    "CapacityError",
    "DomainError",
    "Side",
    "Direction",
    "directions",
    "unit_vectors",
    "Rect",
    "Domain",
    "Slab",
    "Box",
    "ExplicitDomain",
    "make_slab",
    "make_box",
    "make_explicit",
    "middle_frontal",
    "partition_index",
    "cell_pitch",
    "is_connected",
    "random_connected_sites",
]

DEFAULT_SITE_BUDGET = 2 * 10**7
LATERAL_FACTOR = 25


class CapacityError(RuntimeError):
    """A computation would exceed its configured size budget."""


class DomainError(ValueError):
    """Invalid geometry or a point outside the domain where one is required."""


class Side(IntEnum):
    INTERIOR = 0
    FRONTAL = 1
    BACK = 2
    LATERAL = 3
    OTHER = 4


class Direction(NamedTuple):
    """Canonical unit vector ``sign * e_axis`` with a 1-based axis."""

    axis: int
    sign: int

    @property
    def index(self) -> int:
        return 2 * (self.axis - 1) + (0 if self.sign > 0 else 1)

    def vector(self, d: int) -> np.ndarray:
        v = np.zeros(d, dtype=np.int64)
        v[self.axis - 1] = self.sign
        return v


def directions(d: int) -> list[Direction]:
    """The ``2d`` canonical directions in package order."""
    if d < 1:
        raise DomainError("dimension must be positive")
    return [Direction(a, s) for a in range(1, d + 1) for s in (1, -1)]


def unit_vectors(d: int) -> np.ndarray:
    """Array of shape ``(2d, d)`` whose rows follow :func:`directions`."""
    u = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        u[2 * i, i] = 1
        u[2 * i + 1, i] = -1
    return u


def _points(points, d: int) -> np.ndarray:
    p = np.asarray(points, dtype=np.int64)
    if p.ndim == 1:
        p = p[None, :]
    if p.ndim != 2 or p.shape[1] != d:
        raise DomainError(f"expected points of dimension {d}, got shape {p.shape}")
    return p


class Rect:
    """Axis-aligned integer rectangle with inclusive bounds."""

    def __init__(self, lo: Sequence[int], hi: Sequence[int]):
        self.lo = np.asarray(lo, dtype=np.int64)
        self.hi = np.asarray(hi, dtype=np.int64)
        if self.lo.shape != self.hi.shape or np.any(self.hi < self.lo):
            raise DomainError("empty or malformed rectangle")
        self.d = self.lo.size

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self.hi - self.lo + 1)

    @property
    def count(self) -> int:
        return math.prod(self.shape)

    def contains(self, points) -> np.ndarray:
        p = _points(points, self.d)
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)

    def enumerate(self, budget: int | None = DEFAULT_SITE_BUDGET) -> np.ndarray:
        """All points in lexicographic order, shape ``(count, d)``."""
        if budget is not None and self.count > budget:
            raise CapacityError(f"rectangle has {self.count} sites, budget is {budget}")
        axes = [np.arange(l, h + 1, dtype=np.int64) for l, h in zip(self.lo, self.hi)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform sample of ``n`` points (with replacement)."""
        return rng.integers(self.lo, self.hi + 1, size=(n, self.d), dtype=np.int64)

    def __repr__(self) -> str:
        return f"Rect(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


class Domain:
    """Finite subset of the lattice with a boundary-side classifier.

    Subclasses implement :meth:`classify` (side code per point, 0 for
    interior) and :meth:`_enumerate`. Periodic domains also override
    :meth:`canonical`, which wraps points into the fundamental window.
    """

    kind = "domain"

    def __init__(self, d: int, site_budget: int | None = DEFAULT_SITE_BUDGET):
        if d < 1:
            raise DomainError("dimension must be positive")
        self.d = d
        self.site_budget = site_budget

    # predicates ---------------------------------------------------------
    def classify(self, points) -> np.ndarray:
        raise NotImplementedError

    def canonical(self, points) -> np.ndarray:
        return _points(points, self.d)

    def contains(self, points) -> np.ndarray:
        return self.classify(points) == Side.INTERIOR

    def side(self, point) -> Side:
        return Side(int(self.classify(point)[0]))

    # materialization ----------------------------------------------------
    def _enumerate(self) -> np.ndarray:
        raise NotImplementedError

    def expected_size(self) -> int | None:
        return None

    @cached_property
    def sites(self) -> np.ndarray:
        n = self.expected_size()
        if n is not None and self.site_budget is not None and n > self.site_budget:
            raise CapacityError(
                f"{self.kind} domain has {n} sites, exceeding the site budget {self.site_budget}"
            )
        s = self._enumerate()
        order = np.lexsort(s.T[::-1])
        s = np.ascontiguousarray(s[order])
        s.setflags(write=False)
        return s

    @property
    def n_sites(self) -> int:
        return int(self.sites.shape[0])

    @cached_property
    def _keying(self):
        s = self.sites
        lo = s.min(axis=0)
        span = s.max(axis=0) - lo + 1
        strides = np.ones(self.d, dtype=np.int64)
        for i in range(self.d - 2, -1, -1):
            strides[i] = strides[i + 1] * span[i + 1]
        keys = (s - lo) @ strides
        return lo, span, strides, keys

    def index_of(self, points) -> np.ndarray:
        """Row index into :attr:`sites`, or ``-1`` for non-interior points."""
        p = self.canonical(points)
        lo, span, strides, keys = self._keying
        rel = p - lo
        inside = np.all((rel >= 0) & (rel < span), axis=1)
        k = np.where(inside, rel @ strides, 0)
        pos = np.clip(np.searchsorted(keys, k), 0, keys.size - 1)
        hit = inside & (keys[pos] == k)
        return np.where(hit, pos, -1)

    @cached_property
    def _boundary_data(self):
        s = self.sites
        u = unit_vectors(self.d)
        nb = self.canonical((s[:, None, :] + u[None, :, :]).reshape(-1, self.d))
        idx = self.index_of(nb)
        out = idx < 0
        bpts, inv = np.unique(nb[out], axis=0, return_inverse=True)
        table = idx.copy()
        table[out] = s.shape[0] + inv.ravel()
        table = table.reshape(s.shape[0], 2 * self.d)
        sides = self.classify(bpts) if bpts.size else np.zeros(0, dtype=np.int8)
        for a in (bpts, table, sides):
            a.setflags(write=False)
        return bpts, table, sides

    @property
    def boundary(self) -> np.ndarray:
        """Boundary points ``(m, d)``: non-interior neighbours of interior sites."""
        return self._boundary_data[0]

    @property
    def boundary_sides(self) -> np.ndarray:
        return self._boundary_data[2]

    @property
    def neighbors(self) -> np.ndarray:
        """``(n, 2d)`` table into ``[sites; boundary]`` (boundary offset by ``n``)."""
        return self._boundary_data[1]

    @property
    def all_points(self) -> np.ndarray:
        return np.concatenate([self.sites, self.boundary], axis=0)


def _as_direction_vector(direction, d: int) -> np.ndarray:
    if isinstance(direction, Direction):
        return direction.vector(d).astype(np.float64)
    v = np.asarray(direction, dtype=np.float64)
    if v.shape != (d,) or not np.any(v):
        raise DomainError("slab direction must be a nonzero d-vector")
    return v


class Slab(Domain):
    """Slab around ``center`` orthogonal to ``l``, with a finite transverse window.

    Interior is ``-M <= (y-x).l < M`` (or ``-M < (y-x).l < M`` when
    ``symmetric``) with transverse coordinates within ``transverse_cap``.
    With ``periodic=True`` the transverse coordinates live on a torus of
    period ``2*cap+1``, so the lateral boundary disappears.
    """

    kind = "slab"

    def __init__(self, direction, M: int, center, transverse_cap: int,
                 symmetric: bool = False, periodic: bool = False,
                 site_budget: int | None = DEFAULT_SITE_BUDGET):
        center = np.asarray(center, dtype=np.int64)
        super().__init__(center.size, site_budget)
        if int(M) != M or M < 1:
            raise DomainError("slab half-width M must be a positive integer")
        if int(transverse_cap) != transverse_cap or transverse_cap < 1:
            raise DomainError("transverse cap must be a positive integer")
        self.M = int(M)
        self.center = center
        self.cap = int(transverse_cap)
        self.symmetric = bool(symmetric)
        self.periodic = bool(periodic)
        self.l = _as_direction_vector(direction, self.d)
        self.axis = int(np.argmax(np.abs(self.l)))
        self.axis_aligned = np.count_nonzero(self.l) == 1
        if self.periodic and not self.axis_aligned:
            raise DomainError("periodic slabs require an axis direction")
        self.direction = direction
        self._trans = np.array([i for i in range(self.d) if i != self.axis], dtype=np.int64)

    def canonical(self, points) -> np.ndarray:
        p = _points(points, self.d)
        if not self.periodic:
            return p
        p = p.copy()
        period = 2 * self.cap + 1
        c = self.center[self._trans]
        p[:, self._trans] = (p[:, self._trans] - c + self.cap) % period + c - self.cap
        return p

    def _proj(self, p: np.ndarray) -> np.ndarray:
        s = (p - self.center) @ self.l
        return np.round(s, 9) if not self.axis_aligned else s

    def classify(self, points) -> np.ndarray:
        p = self.canonical(points)
        s = self._proj(p)
        if self.symmetric:
            front, back = s >= self.M, s <= -self.M
        else:
            front, back = s >= self.M, s < -self.M
        rel = np.abs(p[:, self._trans] - self.center[self._trans])
        lateral = np.any(rel > self.cap, axis=1)
        out = np.full(p.shape[0], Side.INTERIOR, dtype=np.int8)
        out[lateral] = Side.LATERAL
        out[back] = Side.BACK
        out[front] = Side.FRONTAL
        return out

    def _e1_range(self) -> tuple[int, int]:
        lo = -self.M + 1 if self.symmetric else -self.M
        return lo, self.M - 1

    def expected_size(self) -> int | None:
        if not self.axis_aligned:
            return None
        lo, hi = self._e1_range()
        return (hi - lo + 1) * (2 * self.cap + 1) ** (self.d - 1)

    def _enumerate(self) -> np.ndarray:
        lo = self.center - self.cap
        hi = self.center + self.cap
        if self.axis_aligned:
            a, b = self._e1_range()
            sgn = int(np.sign(self.l[self.axis]))
            lo[self.axis] = self.center[self.axis] + (a if sgn > 0 else -b)
            hi[self.axis] = self.center[self.axis] + (b if sgn > 0 else -a)
            return Rect(lo, hi).enumerate(self.site_budget)
        # general direction: the principal coordinate range covers the slab
        la = abs(self.l[self.axis])
        reach = (self.M + np.abs(np.delete(self.l, self.axis)).sum() * self.cap) / la
        lo[self.axis] = self.center[self.axis] - math.ceil(reach) - 1
        hi[self.axis] = self.center[self.axis] + math.ceil(reach) + 1
        cand = Rect(lo, hi).enumerate(self.site_budget)
        return cand[self.classify(cand) == Side.INTERIOR]


class Box(Domain):
    """The box ``B_M(x)``: ``-M/2 < (y-x).e1 < M`` and ``|(y-x).e_i| < 25 M^3``."""

    kind = "box"

    def __init__(self, M: int, center, site_budget: int | None = DEFAULT_SITE_BUDGET):
        center = np.asarray(center, dtype=np.int64)
        super().__init__(center.size, site_budget)
        if int(M) != M or M < 1:
            raise DomainError("box scale M must be a positive integer")
        self.M = int(M)
        self.center = center
        self.half_width = LATERAL_FACTOR * self.M**3 - 1

    def classify(self, points) -> np.ndarray:
        p = _points(points, self.d)
        r = p - self.center
        front = r[:, 0] >= self.M
        back = 2 * r[:, 0] <= -self.M
        lateral = np.any(np.abs(r[:, 1:]) > self.half_width, axis=1)
        out = np.full(p.shape[0], Side.INTERIOR, dtype=np.int8)
        out[lateral] = Side.LATERAL
        out[back] = Side.BACK
        out[front] = Side.FRONTAL
        return out

    @property
    def rect(self) -> Rect:
        lo = self.center - self.half_width
        hi = self.center + self.half_width
        lo[0] = self.center[0] - (self.M - 1) // 2
        hi[0] = self.center[0] + self.M - 1
        return Rect(lo, hi)

    def expected_size(self) -> int:
        return self.rect.count

    def _enumerate(self) -> np.ndarray:
        return self.rect.enumerate(None)


class ExplicitDomain(Domain):
    """Domain given by an explicit finite site set; boundary side is ``OTHER``."""

    kind = "explicit"

    def __init__(self, sites, site_budget: int | None = DEFAULT_SITE_BUDGET):
        s = np.unique(np.atleast_2d(np.asarray(sites, dtype=np.int64)), axis=0)
        if s.size == 0:
            raise DomainError("explicit domain needs at least one site")
        super().__init__(s.shape[1], site_budget)
        self._given = s

    def expected_size(self) -> int:
        return int(self._given.shape[0])

    def _enumerate(self) -> np.ndarray:
        return self._given

    def classify(self, points) -> np.ndarray:
        p = _points(points, self.d)
        inside = self.index_of(p) >= 0
        return np.where(inside, Side.INTERIOR, Side.OTHER).astype(np.int8)


def make_slab(direction, M: int, center, transverse_cap: int, **kw) -> Slab:
    """Slab ``U_{l,M}(x)`` with a finite transverse window (see :class:`Slab`)."""
    return Slab(direction, M, center, transverse_cap, **kw)


def make_box(M: int, center, site_budget: int | None = DEFAULT_SITE_BUDGET) -> Box:
    """Box ``B_M(x)``. The site budget is enforced when the box is materialized."""
    return Box(M, center, site_budget)


def make_explicit(sites, site_budget: int | None = DEFAULT_SITE_BUDGET) -> ExplicitDomain:
    return ExplicitDomain(sites, site_budget)


def middle_frontal(M: int, center) -> tuple[Rect, Rect]:
    """Middle-frontal part ``B*_M(x)`` and its back side, as rectangles.

    ``B*_M``: ``M/2 <= (y-x).e1 < M`` and ``|(y-x).e_i| < M^3``; the back
    side is the layer ``(y-x).e1 = M/2``. ``M`` must be even.
    """
    if int(M) != M or M < 2 or M % 2:
        raise DomainError("middle_frontal requires an even M >= 2")
    c = np.asarray(center, dtype=np.int64)
    w = M**3 - 1
    lo, hi = c - w, c + w
    lo[0], hi[0] = c[0] + M // 2, c[0] + M - 1
    back_hi = hi.copy()
    back_hi[0] = lo[0]
    return Rect(lo, hi), Rect(lo.copy(), back_hi)


def cell_pitch(level_geometry: tuple[int, int]) -> tuple[int, int]:
    """(e1 pitch, transverse pitch) ``(N'_k, 2 N_k^3 - 1)`` of the level-k partition."""
    n_prime, n = (int(v) for v in level_geometry)
    if n_prime < 1 or n < 1:
        raise DomainError("N'_k and N_k must be positive")
    return n_prime, 2 * n**3 - 1


def partition_index(level_geometry: tuple[int, int], x) -> np.ndarray:
    """Cell index ``z(x)`` of the level-k partition (floor division).

    Accepts a single point or an ``(n, d)`` array.
    """
    p1, pt = cell_pitch(level_geometry)
    x = np.asarray(x, dtype=object if _is_big(x) else np.int64)
    z = x.copy()
    z[..., 0] = x[..., 0] // p1
    z[..., 1:] = x[..., 1:] // pt
    return z


def _is_big(x) -> bool:
    try:
        np.asarray(x, dtype=np.int64)
        return False
    except OverflowError:
        return True


def is_connected(sites) -> bool:
    """Nearest-neighbour connectivity of a finite site set."""
    dom = ExplicitDomain(sites)
    n = dom.n_sites
    nb = dom.neighbors
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    stack = [0]
    while stack:
        i = stack.pop()
        for j in nb[i]:
            if j < n and not seen[j]:
                seen[j] = True
                stack.append(int(j))
    return bool(seen.all())


def random_connected_sites(d: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Grow a random connected set containing the origin (lattice animal).

    Each step adds a uniformly chosen outer neighbour of the current set.
    """
    if size < 1:
        raise DomainError("size must be positive")
    u = unit_vectors(d)
    cur = {tuple([0] * d)}
    while len(cur) < size:
        pts = np.array(sorted(cur), dtype=np.int64)
        cand = (pts[:, None, :] + u[None]).reshape(-1, d)
        frontier = sorted({tuple(c) for c in cand.tolist()} - cur)
        cur.add(frontier[int(rng.integers(len(frontier)))])
    return np.array(sorted(cur), dtype=np.int64)
