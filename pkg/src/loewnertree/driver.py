"""Evolution of driving-measure atoms along a genealogy.

Between death events the alive particles repel each other with strength
alpha/(x_j - x_k) (plus Brownian noise of scale sqrt(2 alpha/beta) for finite
beta).  At a branch both children start at the parent's terminal position.

The coincident-pair singularity is never stepped through directly: the most
recently born pair is integrated in (center, gap^2) coordinates, in which the
vector field is rational and smooth at zero gap (gap^2 evolves as
d(g^2)/dt = 4 alpha - 2 g^2 S with S a sum over outside particles).  For a
k-fold coincident initial condition (k >= 3) the first step uses the exact
self-similar spread x_i = sqrt(2 alpha h) y_i along Hermite roots y_i.
Elsewhere explicit midpoint steps are capped by a collision CFL
(step <= cfl_safety * min_gap^2 / alpha) and halved on ordering violations.
"""
from __future__ import annotations

import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite import hermroots

from . import rng as rngmod
from .genealogy import MarkedForest, _as_forest

try:  # optional speedup; the numpy path is the reference implementation
    import numba as _nb

    HAVE_NUMBA = True
except Exception:  # pragma: no cover
    HAVE_NUMBA = False

DEFAULT_CFL_SAFETY = 0.4
DEFAULT_MIN_STEP = 1e-14
MAX_HALVINGS = 45


class OrderingError(Exception):
    """Step halving hit the minimum step without restoring particle order."""

    def __init__(self, t: float, detail: str = ""):
        super().__init__(
            f"particle ordering could not be preserved at t={t!r} "
            f"above the minimum step{(': ' + detail) if detail else ''}"
        )
        self.t = t


@dataclass(frozen=True)
class AlphaSchedule:
    """Right-continuous piecewise-constant repulsion strength."""

    breakpoints: np.ndarray  # ascending, breakpoints[0] == 0
    values: np.ndarray       # one per breakpoint, all > 0

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        if len(bp) != len(vals) or len(bp) == 0:
            raise ValueError("breakpoints and values must have equal positive length")
        if bp[0] != 0.0 or np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must start at 0 and increase")
        if not np.all(vals > 0):
            raise ValueError("alpha values must be positive")

    @classmethod
    def constant(cls, alpha: float) -> "AlphaSchedule":
        return cls(breakpoints=np.array([0.0]), values=np.array([float(alpha)]))

    def value_at(self, t: float) -> float:
        i = bisect_right(self.breakpoints.tolist(), t) - 1
        return float(self.values[max(i, 0)])

    def as_dict(self) -> dict:
        return {"breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()}


def angle_schedule(tree_or_forest, angles: dict | float) -> AlphaSchedule:
    """Schedule realizing per-vertex branch angles: alpha = pi/theta - 2.

    ``angles`` maps (tree_index, vertex) -> theta in (0, pi/2), or is a single
    constant theta.  The strength jumps at each death time to the value of the
    vertex that just died; before the first death it already carries the first
    dying vertex's value (a one-particle system is insensitive to alpha).
    """
    forest = _as_forest(tree_or_forest)
    recs = []
    for k, tree in enumerate(forest.trees):
        death = tree.death_time
        for v in range(tree.n_vertices):
            theta = angles if isinstance(angles, (int, float)) else angles[(k, v)]
            if not (0 < theta < math.pi / 2):
                raise ValueError(f"theta for vertex {(k, v)} must lie in (0, pi/2)")
            recs.append((float(death[v]), math.pi / theta - 2.0))
    recs.sort()
    breakpoints = np.array([0.0] + [t for t, _ in recs[:-1]])
    values = np.array([recs[0][1]] + [a for _, a in recs[:-1]])
    return AlphaSchedule(breakpoints=breakpoints, values=values)


@dataclass(frozen=True)
class AtomicMeasure:
    """Finitely many equal positive point masses."""

    positions: np.ndarray
    mass: float  # per atom

    @property
    def n_atoms(self) -> int:
        return len(self.positions)

    @property
    def total_mass(self) -> float:
        return self.mass * self.n_atoms


@dataclass(frozen=True)
class Event:
    time: float
    kind: str                 # "branch" or "death"
    vertex: tuple[int, int]   # dying vertex
    position: float


@dataclass(frozen=True)
class Segment:
    t0: float
    t1: float
    vertices: tuple[tuple[int, int], ...]  # spatial order, left to right
    times: np.ndarray                      # grid, times[0] == t0, times[-1] == t1
    positions: np.ndarray                  # (len(times), len(vertices))


@dataclass(frozen=True)
class DrivingPath:
    segments: tuple[Segment, ...]
    events: tuple[Event, ...]
    beta: float
    alpha: AlphaSchedule
    mass_per_atom: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def t_end(self) -> float:
        return self.segments[-1].t1 if self.segments else 0.0

    def segment_at(self, t: float) -> Segment | None:
        segs = self.segments
        lo, hi = 0, len(segs)
        while lo < hi:
            mid = (lo + hi) // 2
            if segs[mid].t1 < t:
                lo = mid + 1
            else:
                hi = mid
        if lo >= len(segs):
            return None
        seg = segs[lo]
        if seg.t0 <= t <= seg.t1:
            return seg
        return None

    def drivers_at(self, t: float) -> tuple[tuple[tuple[int, int], ...], np.ndarray]:
        """Alive vertices (spatial order) and their interpolated positions.

        At an event time the new segment's occupants are reported (alive sets
        are right-continuous).
        """
        if t < 0 or t > self.t_end + 1e-12:
            raise ValueError(f"t={t} outside [0, {self.t_end}]")
        t = min(t, self.t_end)
        seg = self.segment_at(t)
        # prefer the segment that STARTS at t
        nxt = self.segment_at(np.nextafter(t, np.inf)) if t < self.t_end else None
        if nxt is not None and nxt.t0 == t:
            seg = nxt
        if seg is None or len(seg.vertices) == 0:
            return (), np.zeros(0)
        if len(seg.times) == 1:
            return seg.vertices, seg.positions[0].copy()
        j = int(np.searchsorted(seg.times, t, side="right") - 1)
        j = min(max(j, 0), len(seg.times) - 2)
        t0, t1 = seg.times[j], seg.times[j + 1]
        w = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
        return seg.vertices, (1 - w) * seg.positions[j] + w * seg.positions[j + 1]

    def vertex_position(self, vertex: tuple[int, int], t: float) -> float:
        verts, pos = self.drivers_at(t)
        return float(pos[verts.index(vertex)])


def measure_at(path: DrivingPath, t: float) -> AtomicMeasure:
    """Driving measure at time t: one atom of mass ``mass_per_atom`` per survivor."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t > path.t_end:
        if path.meta.get("extinct", True):
            return AtomicMeasure(positions=np.zeros(0), mass=path.mass_per_atom)
        raise ValueError(f"t={t} beyond the simulated horizon {path.t_end}")
    _, pos = path.drivers_at(t)
    return AtomicMeasure(positions=pos, mass=path.mass_per_atom)


def two_particle_exact(alpha: float, t: float) -> tuple[float, float]:
    """Exact symmetric solution from a coincident start: -+ sqrt(alpha t)."""
    if not (alpha > 0 and t >= 0):
        raise ValueError("require alpha > 0 and t >= 0")
    r = math.sqrt(alpha * t)
    return -r, r


def branch_startup_step(positions, k: int, alpha: float, dt: float) -> np.ndarray:
    """One explicit step from a configuration whose only collision is x[k] == x[k+1].

    The colliding pair moves to parent -/+ sqrt(alpha dt) plus dt times the
    drift from all other particles frozen in place; every other particle takes
    an explicit Euler step.
    """
    x = np.asarray(positions, dtype=float).copy()
    n = len(x)
    if not (0 <= k < n - 1) or x[k] != x[k + 1]:
        raise ValueError("positions[k] and positions[k+1] must coincide")
    n_coincident = (x[:, None] == x[None, :]).sum() - n
    if n_coincident != 2:
        raise ValueError("exactly one coincident pair is allowed (distinct death times)")
    if dt == 0:
        return x
    mask = np.ones(n, bool)
    mask[[k, k + 1]] = False
    others = x[mask]
    m = x[k]
    if len(others):
        ext = alpha * np.sum(1.0 / (m - others))
        dxo = others[:, None] - others[None, :]
        np.fill_diagonal(dxo, np.inf)
        drift_o = alpha * (1.0 / dxo).sum(axis=1)
        drift_o += 2.0 * alpha / (others - m)  # the pair acts as a double atom at m
        x[mask] = others + dt * drift_o
    else:
        ext = 0.0
    r = math.sqrt(alpha * dt)
    x[k] = m - r + dt * ext
    x[k + 1] = m + r + dt * ext
    return x


# ---------------------------------------------------------------------------
# integration kernels
#
# State: positions ascending; `pk` is the left index of the tracked newborn
# pair (-1 when none).  With a tracked pair the integrated variables are
# (others..., m, u) with m the pair center, u = gap^2 >= 0.

def _rhs_plain(x, alpha):
    dx = x[:, None] - x[None, :]
    np.fill_diagonal(dx, np.inf)
    return alpha * (1.0 / dx).sum(axis=1)


def _rhs_pair(xo, m, u, alpha):
    """Drift of (others, center, gap^2); rational in u, smooth at u = 0."""
    if len(xo):
        d = xo - m
        den = d * d - 0.25 * u
        dxo = xo[:, None] - xo[None, :]
        np.fill_diagonal(dxo, np.inf)
        fo = alpha * (1.0 / dxo).sum(axis=1) + alpha * 2.0 * d / den
        S = alpha * float(np.sum(1.0 / den))
        fm = alpha * float(np.sum(-d / den))
    else:
        fo = np.zeros(0)
        S = 0.0
        fm = 0.0
    fu = 4.0 * alpha - 2.0 * u * S
    return fo, fm, fu


def _ordered_after(out, pk):
    if not np.all(np.isfinite(out)):
        return False
    d = np.diff(out)
    if len(d) == 0:
        return True
    bad = (d < 0) | (d == 0)
    if pk >= 0:
        bad[pk] = d[pk] < 0
    return not bad.any()


def _step_numpy(x, pk, alpha, h):
    """Midpoint step of size h; returns new positions or None if disordered."""
    n = len(x)
    if pk >= 0:
        mask = np.ones(n, bool)
        mask[[pk, pk + 1]] = False
        xo = x[mask]
        m = 0.5 * (x[pk] + x[pk + 1])
        u = (x[pk + 1] - x[pk]) ** 2
        fo1, fm1, fu1 = _rhs_pair(xo, m, u, alpha)
        xo_m = xo + 0.5 * h * fo1
        m_m = m + 0.5 * h * fm1
        u_m = max(u + 0.5 * h * fu1, 0.0)
        fo2, fm2, fu2 = _rhs_pair(xo_m, m_m, u_m, alpha)
        u2 = u + h * fu2
        if u2 < 0:
            return None
        out = np.empty(n)
        out[mask] = xo + h * fo2
        m2 = m + h * fm2
        g2 = math.sqrt(u2)
        out[pk] = m2 - 0.5 * g2
        out[pk + 1] = m2 + 0.5 * g2
    else:
        f1 = _rhs_plain(x, alpha)
        xm = x + 0.5 * h * f1
        if np.any(np.diff(xm) <= 0):
            return None
        out = x + h * _rhs_plain(xm, alpha)
    if not _ordered_after(out, pk):
        return None
    return out


def _advance_numpy(x, pk, alpha, t_now, t_target, dt_max, cfl, min_step):
    """Integrate positions from t_now to t_target; returns final positions."""
    t = t_now
    x = x.copy()
    tol = max(1e-15 * max(1.0, abs(t_target)), min_step)
    while t < t_target - tol:
        gaps = np.diff(x)
        if pk >= 0 and len(gaps):
            gsel = np.delete(gaps, pk)
        else:
            gsel = gaps
        h = min(dt_max, t_target - t)
        if len(gsel):
            gmin = float(gsel.min())
            h = min(h, cfl * gmin * gmin / alpha)
        ok = False
        for _ in range(MAX_HALVINGS):
            if h < min_step:
                break
            xn = _step_numpy(x, pk, alpha, h)
            if xn is not None:
                ok = True
                break
            h *= 0.5
        if not ok:
            raise OrderingError(t)
        x = xn
        t += h
    return x


if HAVE_NUMBA:

    @_nb.njit(cache=True, fastmath=False)
    def _rhs_plain_nb(x, alpha, out):  # pragma: no cover - exercised via wrapper
        n = x.shape[0]
        for j in range(n):
            f = 0.0
            for k in range(n):
                if k != j:
                    f += 1.0 / (x[j] - x[k])
            out[j] = alpha * f

    @_nb.njit(cache=True, fastmath=False)
    def _rhs_pair_nb(xo, m, u, alpha, fo):  # pragma: no cover
        n = xo.shape[0]
        S = 0.0
        fm = 0.0
        for j in range(n):
            f = 0.0
            for k in range(n):
                if k != j:
                    f += 1.0 / (xo[j] - xo[k])
            d = xo[j] - m
            den = d * d - 0.25 * u
            f += 2.0 * d / den
            fo[j] = alpha * f
            S += 1.0 / den
            fm += -d / den
        return alpha * fm, 4.0 * alpha - 2.0 * u * alpha * S

    @_nb.njit(cache=True, fastmath=False)
    def _advance_nb(x0, pk, alpha, t_now, t_target, dt_max, cfl, min_step):  # pragma: no cover
        n = x0.shape[0]
        x = x0.copy()
        out = np.empty(n)
        tol = max(1e-15 * max(1.0, abs(t_target)), min_step)
        t = t_now
        if pk >= 0:
            npo = n - 2
            xo = np.empty(npo)
            xom = np.empty(npo)
            fo = np.empty(npo)
            fo2 = np.empty(npo)
        else:
            npo = 0
            xo = np.empty(0)
            xom = np.empty(0)
            fo = np.empty(0)
            fo2 = np.empty(0)
        f1 = np.empty(n)
        xm = np.empty(n)
        f2 = np.empty(n)
        while t < t_target - tol:
            h = dt_max
            if t_target - t < h:
                h = t_target - t
            gmin = 1.0e300
            for i in range(n - 1):
                if pk >= 0 and i == pk:
                    continue
                g = x[i + 1] - x[i]
                if g < gmin:
                    gmin = g
            if gmin < 1.0e300:
                hc = cfl * gmin * gmin / alpha
                if hc < h:
                    h = hc
            ok = False
            for _ in range(MAX_HALVINGS):
                if h < min_step:
                    break
                good = True
                if pk >= 0:
                    idx = 0
                    for j in range(n):
                        if j != pk and j != pk + 1:
                            xo[idx] = x[j]
                            idx += 1
                    m = 0.5 * (x[pk] + x[pk + 1])
                    u = (x[pk + 1] - x[pk]) ** 2
                    fm1, fu1 = _rhs_pair_nb(xo, m, u, alpha, fo)
                    for j in range(npo):
                        xom[j] = xo[j] + 0.5 * h * fo[j]
                    mm = m + 0.5 * h * fm1
                    um = u + 0.5 * h * fu1
                    if um < 0.0:
                        um = 0.0
                    fm2, fu2 = _rhs_pair_nb(xom, mm, um, alpha, fo2)
                    u2 = u + h * fu2
                    if u2 < 0.0:
                        good = False
                    else:
                        m2 = m + h * fm2
                        g2 = math.sqrt(u2)
                        idx = 0
                        for j in range(n):
                            if j != pk and j != pk + 1:
                                out[j] = xo[idx] + h * fo2[idx]
                                idx += 1
                        out[pk] = m2 - 0.5 * g2
                        out[pk + 1] = m2 + 0.5 * g2
                else:
                    _rhs_plain_nb(x, alpha, f1)
                    for j in range(n):
                        xm[j] = x[j] + 0.5 * h * f1[j]
                    for j in range(n - 1):
                        if xm[j + 1] <= xm[j]:
                            good = False
                            break
                    if good:
                        _rhs_plain_nb(xm, alpha, f2)
                        for j in range(n):
                            out[j] = x[j] + h * f2[j]
                if good:
                    for j in range(n):
                        if not np.isfinite(out[j]):
                            good = False
                            break
                if good:
                    for j in range(n - 1):
                        d = out[j + 1] - out[j]
                        if d < 0.0 or (d == 0.0 and not (pk >= 0 and j == pk)):
                            good = False
                            break
                if good:
                    ok = True
                    break
                h *= 0.5
            if not ok:
                return x, t, 1
            for j in range(n):
                x[j] = out[j]
            t += h
        return x, t, 0


def _advance(x, pk, alpha, t_now, t_target, dt_max, cfl, min_step, use_numba):
    if use_numba and HAVE_NUMBA:
        out, t, status = _advance_nb(
            np.ascontiguousarray(x), pk, alpha, t_now, t_target, dt_max, cfl, min_step
        )
        if status != 0:
            raise OrderingError(t)
        return out
    return _advance_numpy(x, pk, alpha, t_now, t_target, dt_max, cfl, min_step)


_HERMITE_CACHE: dict[int, np.ndarray] = {}


def _hermite_roots(k: int) -> np.ndarray:
    y = _HERMITE_CACHE.get(k)
    if y is None:
        coeffs = np.zeros(k + 1)
        coeffs[-1] = 1.0
        y = np.sort(np.real(hermroots(coeffs)))
        _HERMITE_CACHE[k] = y
    return y


def _hermite_startup(x, alpha, h):
    """Spread every coincident group along scaled Hermite roots over one step h.

    The pure k-body flow from a point is exactly self-similar with profile
    sqrt(2 alpha t) * roots(H_k); outside particles contribute a frozen drift.
    """
    x = x.copy()
    n = len(x)
    groups = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and x[j + 1] == x[i]:
            j += 1
        if j > i:
            groups.append((i, j))
        i = j + 1
    for (i, j) in groups:
        k = j - i + 1
        m = x[i]
        mask = np.ones(n, bool)
        mask[i:j + 1] = False
        ext = alpha * float(np.sum(1.0 / (m - x[mask]))) if mask.any() else 0.0
        y = _hermite_roots(k)
        x[i:j + 1] = m + math.sqrt(2.0 * alpha * h) * y + h * ext
    return x


# ---------------------------------------------------------------------------
# flows

def _forest_events(forest: MarkedForest):
    """Death events in time order: (time, tree, vertex, children)."""
    evs = []
    for k, tree in enumerate(forest.trees):
        death = tree.death_time
        for v in range(tree.n_vertices):
            evs.append((float(death[v]), k, v, tree.children_of(v)))
    evs.sort()
    return evs


def _segment_grid(t0, t1, dt, refine_start=False):
    """Uniform grid of spacing <= dt; with ``refine_start``, extra
    geometrically clustered points resolve square-root driver growth at t0."""
    n_cells = max(int(math.ceil((t1 - t0) / dt - 1e-9)), 1)
    grid = np.linspace(t0, t1, n_cells + 1)
    if not refine_start or n_cells < 1:
        return grid
    span = t1 - t0
    floor = max(1e-8 * span, 1e-10)
    extra = []
    d = min(dt, span)
    for _ in range(40):
        d *= 0.5
        if d < floor:
            break
        extra.append(t0 + d)
    if not extra:
        return grid
    merged = np.unique(np.concatenate([grid, extra]))
    # drop near-duplicate times; keep the endpoint
    keep = np.ones(len(merged), bool)
    keep[1:] = np.diff(merged) > 0.5 * floor
    keep[0] = True
    sel = merged[keep]
    if sel[-1] != t1:
        sel = np.append(sel[sel < t1 - 0.25 * floor], t1)
    return sel


def _single_tracked_pair(x):
    """Index of a lone coincident pair, or -1 (bigger/multiple groups -> -1)."""
    if len(x) < 2:
        return -1
    eq = np.nonzero(np.diff(x) == 0)[0]
    if len(eq) != 1:
        return -1
    i = int(eq[0])
    if i + 2 < len(x) and x[i + 2] == x[i]:
        return -1
    return i


def coulomb_flow(
    forest,
    alpha: AlphaSchedule | float,
    x0,
    dt_max: float,
    *,
    t_max: float | None = None,
    cfl_safety: float = DEFAULT_CFL_SAFETY,
    min_step: float = DEFAULT_MIN_STEP,
    mass_per_atom: float = 1.0,
    record_dt: float | None = None,
    record_refine: bool = True,
    use_numba: bool = True,
) -> DrivingPath:
    """Deterministic Coulombic flow of the atoms along the forest's genealogy.

    ``x0`` holds the ordered initial positions of the initial individuals
    (coincidences allowed).  The recorded grid has spacing at most
    ``record_dt`` (default ``dt_max``); internal steps are additionally capped
    by the collision CFL and halved on ordering violations, erroring out below
    ``min_step``.  With ``t_max`` the flow stops early.
    """
    forest = _as_forest(forest)
    if isinstance(alpha, (int, float)):
        alpha = AlphaSchedule.constant(alpha)
    x0 = np.asarray(x0, dtype=float)
    if len(x0) != len(forest.trees):
        raise ValueError(f"x0 has {len(x0)} entries for {len(forest.trees)} initial individuals")
    if np.any(np.diff(x0) < 0):
        raise ValueError("x0 must be nondecreasing")
    if not (np.isfinite(dt_max) and dt_max > 0):
        raise ValueError("dt_max must be positive")
    record_dt = dt_max if record_dt is None else record_dt

    events_in = _forest_events(forest)
    horizon = events_in[-1][0] if t_max is None else min(t_max, events_in[-1][0])
    extinct = t_max is None or events_in[-1][0] <= t_max
    ev_by_time = {e[0]: e for e in events_in}
    marks = sorted(set([e[0] for e in events_in if e[0] <= horizon]
                       + [float(b) for b in alpha.breakpoints if 0.0 < b < horizon]
                       + [horizon]))

    verts: list[tuple[int, int]] = [(k, 0) for k in range(len(forest.trees))]
    x = x0.copy()
    t = 0.0
    pair = _single_tracked_pair(x)
    segments: list[Segment] = []
    events_out: list[Event] = []

    for t1 in marks:
        if t1 <= t:
            continue
        if len(verts) == 0:
            break
        a_now = alpha.value_at(t)
        grid = _segment_grid(t, t1, record_dt, refine_start=record_refine)
        pos = np.empty((len(grid), len(verts)))
        pos[0] = x
        needs_startup = pair < 0 and len(x) > 1 and np.any(np.diff(x) == 0)
        for j in range(1, len(grid)):
            tj_prev, tj = grid[j - 1], grid[j]
            if j == 1 and needs_startup:
                h0 = min(tj - tj_prev, dt_max)
                x = _hermite_startup(x, a_now, h0)
                if tj - (tj_prev + h0) > 1e-15:
                    x = _advance(x, -1, a_now, tj_prev + h0, tj, dt_max,
                                 cfl_safety, min_step, use_numba)
            else:
                x = _advance(x, pair, a_now, tj_prev, tj, dt_max,
                             cfl_safety, min_step, use_numba)
            pos[j] = x
        segments.append(Segment(t0=t, t1=t1, vertices=tuple(verts),
                                times=grid, positions=pos))
        t = t1
        pair = -1
        ev = ev_by_time.get(t1)
        if ev is not None:
            _, k, v, kids = ev
            idx = verts.index((k, v))
            xv = float(x[idx])
            if kids:
                events_out.append(Event(time=t1, kind="branch", vertex=(k, v), position=xv))
                verts = verts[:idx] + [(k, kids[0]), (k, kids[1])] + verts[idx + 1:]
                x = np.concatenate([x[:idx], [xv, xv], x[idx + 1:]])
                pair = idx
            else:
                events_out.append(Event(time=t1, kind="death", vertex=(k, v), position=xv))
                verts = verts[:idx] + verts[idx + 1:]
                x = np.concatenate([x[:idx], x[idx + 1:]])

    return DrivingPath(
        segments=tuple(segments),
        events=tuple(events_out),
        beta=math.inf,
        alpha=alpha,
        mass_per_atom=mass_per_atom,
        meta={"mode": "coulomb", "dt_max": dt_max, "extinct": extinct,
              "x0": x0.tolist()},
    )


def dyson_flow(
    forest,
    alpha: AlphaSchedule | float,
    beta: float,
    x0,
    dt_max: float,
    seed: int,
    *,
    t_max: float | None = None,
    min_step: float = DEFAULT_MIN_STEP,
    mass_per_atom: float = 1.0,
    record_dt: float | None = None,
    record_refine: bool = True,
    allow_swap: bool = False,
    use_numba: bool = True,
) -> DrivingPath:
    """Dyson Brownian motion of the atoms: Coulomb drift plus independent
    per-vertex noise of scale sqrt(2 alpha / beta).

    Euler-Maruyama on a fixed grid of spacing <= dt_max; ordering violations
    are repaired by step halving with Brownian-bridge refinement of the
    increments (and, if ``allow_swap`` and the minimum step is reached, by
    sorting, which only relabels the exchangeable atoms).  ``beta=inf``
    delegates to the deterministic flow, byte-identical to ``coulomb_flow``
    under the same grid.  Requires beta >= 1.
    """
    if beta == math.inf:
        return coulomb_flow(
            forest, alpha, x0, dt_max, t_max=t_max, min_step=min_step,
            mass_per_atom=mass_per_atom, record_dt=record_dt,
            record_refine=record_refine, use_numba=use_numba,
        )
    if not (beta >= 1):
        raise ValueError("beta must satisfy beta >= 1 (math.inf selects the deterministic flow)")
    forest = _as_forest(forest)
    if isinstance(alpha, (int, float)):
        alpha = AlphaSchedule.constant(alpha)
    x0 = np.asarray(x0, dtype=float)
    if len(x0) != len(forest.trees):
        raise ValueError("x0 length must match the number of initial individuals")
    if np.any(np.diff(x0) < 0):
        raise ValueError("x0 must be nondecreasing")
    record_dt = dt_max if record_dt is None else record_dt

    events_in = _forest_events(forest)
    horizon = events_in[-1][0] if t_max is None else min(t_max, events_in[-1][0])
    extinct = t_max is None or events_in[-1][0] <= t_max
    ev_by_time = {e[0]: e for e in events_in}
    marks = sorted(set([e[0] for e in events_in if e[0] <= horizon]
                       + [float(b) for b in alpha.breakpoints if 0.0 < b < horizon]
                       + [horizon]))

    # per-vertex noise streams chained along genealogy paths
    keys = {(k, 0): rngmod.stream_key(seed, "dbm-noise", k) for k in range(len(forest.trees))}
    gens = {v: rngmod.generator(key) for v, key in keys.items()}

    verts: list[tuple[int, int]] = [(k, 0) for k in range(len(forest.trees))]
    x = x0.copy()
    t = 0.0
    newborn = _single_tracked_pair(x)
    swaps = [0]
    segments: list[Segment] = []
    events_out: list[Event] = []

    for t1 in marks:
        if t1 <= t:
            continue
        if len(verts) == 0:
            break
        a_now = alpha.value_at(t)
        sigma = math.sqrt(2.0 * a_now / beta)
        grid = _segment_grid(t, t1, min(record_dt, dt_max))
        pos = np.empty((len(grid), len(verts)))
        pos[0] = x
        for j in range(1, len(grid)):
            h = grid[j] - grid[j - 1]
            dw = np.array([gens[v].standard_normal() for v in verts]) * math.sqrt(h)
            xn = _em_step(x, a_now, sigma, h, dw, gens, verts,
                          newborn if j == 1 else -1, min_step, allow_swap, swaps)
            if xn is None:
                raise OrderingError(grid[j - 1])
            x = xn
            pos[j] = x
        segments.append(Segment(t0=t, t1=t1, vertices=tuple(verts), times=grid,
                                positions=pos))
        t = t1
        newborn = -1
        ev = ev_by_time.get(t1)
        if ev is not None:
            _, k, v, kids = ev
            idx = verts.index((k, v))
            xv = float(x[idx])
            pk = keys.pop((k, v))
            gens.pop((k, v))
            if kids:
                events_out.append(Event(time=t1, kind="branch", vertex=(k, v), position=xv))
                c0, c1 = (k, kids[0]), (k, kids[1])
                keys[c0] = rngmod.child_key(pk, 0)
                keys[c1] = rngmod.child_key(pk, 1)
                gens[c0] = rngmod.generator(keys[c0])
                gens[c1] = rngmod.generator(keys[c1])
                verts = verts[:idx] + [c0, c1] + verts[idx + 1:]
                x = np.concatenate([x[:idx], [xv, xv], x[idx + 1:]])
                newborn = idx
            else:
                events_out.append(Event(time=t1, kind="death", vertex=(k, v), position=xv))
                verts = verts[:idx] + verts[idx + 1:]
                x = np.concatenate([x[:idx], x[idx + 1:]])

    return DrivingPath(
        segments=tuple(segments), events=tuple(events_out), beta=beta, alpha=alpha,
        mass_per_atom=mass_per_atom,
        meta={"mode": "dyson", "beta": beta, "dt_max": dt_max, "seed": seed,
              "extinct": extinct, "swap_repairs": swaps[0], "x0": x0.tolist()},
    )


def _em_step(x, alpha, sigma, h, dw, gens, verts, newborn, min_step, allow_swap,
             swaps, depth=0):
    """Euler-Maruyama step: sqrt predictor at branch startup, then noise;
    halving with Brownian-bridge refinement on ordering violations."""
    n = len(x)
    if newborn >= 0 and x[newborn] == x[newborn + 1]:
        base = branch_startup_step(x, newborn, alpha, h)
    elif n > 1 and np.any(np.diff(x) == 0):
        base = _hermite_startup(x, alpha, h)
    else:
        base = x + h * _rhs_plain(x, alpha)
    out = base + sigma * dw
    if n <= 1 or np.all(np.diff(out) > 0):
        return out
    if h * 0.5 < min_step or depth >= MAX_HALVINGS:
        if allow_swap:
            swaps[0] += 1
            return np.sort(out)
        return None
    mid_noise = np.array([gens[v].standard_normal() for v in verts])
    dw1 = 0.5 * dw + 0.5 * math.sqrt(h) * mid_noise
    dw2 = dw - dw1
    x1 = _em_step(x, alpha, sigma, 0.5 * h, dw1, gens, verts, newborn, min_step,
                  allow_swap, swaps, depth + 1)
    if x1 is None:
        return None
    return _em_step(x1, alpha, sigma, 0.5 * h, dw2, gens, verts, -1, min_step,
                    allow_swap, swaps, depth + 1)


# ---------------------------------------------------------------------------
# synthetic paths and serialization

def path_from_functions(
    funcs, t_end: float, dt: float, *, mass_per_atom: float = 1.0, vertices=None,
    refine_start: bool = False,
) -> DrivingPath:
    """Single-segment path from explicit driver functions (for slit/wedge tests)."""
    grid = _segment_grid(0.0, t_end, dt, refine_start=refine_start)
    pos = np.column_stack([np.asarray([f(t) for t in grid], dtype=float) for f in funcs])
    verts = tuple(vertices) if vertices is not None else tuple((0, j) for j in range(len(funcs)))
    seg = Segment(t0=0.0, t1=t_end, vertices=verts, times=grid, positions=pos)
    return DrivingPath(
        segments=(seg,), events=(), beta=math.inf,
        alpha=AlphaSchedule.constant(1.0), mass_per_atom=mass_per_atom,
        meta={"mode": "synthetic", "extinct": False},
    )


def wedge_path(zeta1: float, zeta2: float, t_end: float, dt: float,
               *, mass_per_atom: float = 1.0) -> DrivingPath:
    """Two sqrt-drivers zeta_j sqrt(t) from the origin."""
    return path_from_functions(
        [lambda t: zeta1 * math.sqrt(t), lambda t: zeta2 * math.sqrt(t)],
        t_end, dt, mass_per_atom=mass_per_atom, refine_start=True,
    )


def save_path_csv(path: DrivingPath, prefix: str) -> tuple[str, str]:
    """CSV of (t, vertex_id, position) at grid times plus a JSON sidecar.

    vertex_id is "tree:vertex"; floats carry 17 significant digits.  The
    sidecar stores events, the alpha schedule, beta, mass, metadata, and the
    per-segment layout needed for exact reconstruction.
    """
    csv_name = f"{prefix}.csv"
    json_name = f"{prefix}.json"
    with open(csv_name, "w") as f:
        f.write("t,vertex_id,position\n")
        for seg in path.segments:
            for i, t in enumerate(seg.times):
                for j, (k, v) in enumerate(seg.vertices):
                    f.write(f"{t:.17g},{k}:{v},{seg.positions[i, j]:.17g}\n")
    sidecar = {
        "events": [
            {"time": e.time, "kind": e.kind, "tree": e.vertex[0],
             "vertex": e.vertex[1], "position": e.position}
            for e in path.events
        ],
        "alpha": path.alpha.as_dict(),
        "beta": "inf" if path.beta == math.inf else path.beta,
        "mass_per_atom": path.mass_per_atom,
        "segments": [
            {"t0": seg.t0, "t1": seg.t1, "n_times": len(seg.times),
             "vertices": [f"{k}:{v}" for (k, v) in seg.vertices]}
            for seg in path.segments
        ],
        "meta": dict(path.meta),
    }
    with open(json_name, "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
        f.write("\n")
    return csv_name, json_name


def load_path_csv(prefix: str) -> DrivingPath:
    json_name = f"{prefix}.json"
    with open(json_name) as f:
        sidecar = json.load(f)
    ts, pss = [], []
    with open(f"{prefix}.csv") as f:
        next(f)
        for line in f:
            tstr, _, pstr = line.rstrip("\n").split(",")
            ts.append(float(tstr))
            pss.append(float(pstr))
    segments = []
    row = 0
    for sd in sidecar["segments"]:
        verts = tuple(tuple(int(p) for p in s.split(":")) for s in sd["vertices"])
        nt, nv = sd["n_times"], len(verts)
        times = np.array(ts[row:row + nt * nv:max(nv, 1)]) if nv else np.array([sd["t0"], sd["t1"]])
        pos = np.array(pss[row:row + nt * nv]).reshape(nt, nv) if nv else np.zeros((2, 0))
        row += nt * nv
        segments.append(Segment(t0=sd["t0"], t1=sd["t1"], vertices=verts,
                                times=times, positions=pos))
    events = tuple(
        Event(time=e["time"], kind=e["kind"], vertex=(e["tree"], e["vertex"]),
              position=e["position"])
        for e in sidecar["events"]
    )
    alpha = AlphaSchedule(
        breakpoints=np.array(sidecar["alpha"]["breakpoints"]),
        values=np.array(sidecar["alpha"]["values"]),
    )
    beta = math.inf if sidecar["beta"] == "inf" else float(sidecar["beta"])
    return DrivingPath(
        segments=tuple(segments), events=events, beta=beta, alpha=alpha,
        mass_per_atom=float(sidecar["mass_per_atom"]), meta=sidecar.get("meta", {}),
    )
