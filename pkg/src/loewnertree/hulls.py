"""Hull tracing and geometric verification for branching driving paths.

Curve tips are evaluated by the reverse Loewner flow from U + i*eps (the
device that avoids accumulating map-composition error); the tracing cost is
one reverse solve per (sample time, alive vertex), quadratic in the horizon,
which is acceptable at desk scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .driver import DrivingPath
from .genealogy import MarkedPlaneTree
from .loewner import SolverConfig, capacity_oracle, hcap, reverse_batch_fast


@dataclass(frozen=True)
class TracedCurve:
    vertex: tuple[int, int]
    times: np.ndarray          # sample times (growth parameter)
    points: np.ndarray         # complex curve points
    anchor: complex            # base point (roots) or parent branch image


@dataclass(frozen=True)
class TracedHull:
    curves: dict                    # vertex -> TracedCurve, plane order
    base_points: dict               # root vertex -> real base point
    branch_images: dict             # dying vertex -> complex image of the branch point
    capacity_times: np.ndarray
    capacity_values: np.ndarray
    eps: float
    meta: dict = field(default_factory=dict)

    def all_points(self) -> np.ndarray:
        return np.concatenate([c.points for c in self.curves.values()])


def _sample_times(t_birth, t_end, cfg, geometric_levels=14, ratio=0.62):
    """Curve sample times: geometric clusters at both ends plus uniform fill."""
    span = t_end - t_birth
    if span <= 0:
        return np.array([t_end])
    lo = max(cfg.dt, span * 1e-8)
    geo = []
    d = span
    for _ in range(geometric_levels):
        d *= ratio
        if d < lo:
            break
        geo.append(d)
    start_side = [t_birth + d for d in geo]
    end_side = [t_end - d for d in geo if t_end - d > t_birth]
    n_uni = max(cfg.max_points - len(start_side) - len(end_side) - 1, 8)
    uni = np.linspace(t_birth, t_end, n_uni + 1)[1:]
    ts = np.unique(np.concatenate([start_side, end_side, uni, [t_end]]))
    return ts[(ts > t_birth) & (ts <= t_end)]


def trace_hull(path: DrivingPath, cfg: SolverConfig | None = None,
               *, capacity_samples: int = 24) -> TracedHull:
    """Trace gamma_v(t) = reverse flow of U_v(t) + i*eps for every vertex.

    Curves are tagged by genealogy vertex; branch images are the tips of dying
    vertices at their death times; child curves are anchored at their parent's
    image.  The capacity trace samples hcap on a coarse grid.
    """
    cfg = cfg or SolverConfig()
    eps = cfg.eps
    # vertex life spans within the simulated horizon
    spans = {}
    first_seen = {}
    for seg in path.segments:
        for v in seg.vertices:
            if v not in spans:
                spans[v] = [seg.t0, seg.t1]
                first_seen[v] = seg.t0
            else:
                spans[v][1] = seg.t1
    # group sample times so tips alive at the same time share one reverse solve
    jobs: dict[float, list] = {}
    for v, (t0, t1) in spans.items():
        for t in _sample_times(t0, t1, cfg):
            jobs.setdefault(float(t), []).append(v)
    results: dict = {v: ([], []) for v in spans}
    for t in sorted(jobs):
        verts, pos = path.drivers_at(t)
        cols, w0, own = [], [], []
        for v in jobs[t]:
            if v in verts:
                j = verts.index(v)
                cols.append(v)
                w0.append(pos[j] + 1j * eps)
                own.append(j)
        if not cols:
            continue
        pts = reverse_batch_fast(path, t, np.array(w0), cfg, own_driver=np.array(own))
        for v, p in zip(cols, pts):
            results[v][0].append(t)
            results[v][1].append(complex(p))

    # branch images: tips of dying vertices at their death times
    branch_images = {}
    for ev in path.events:
        if ev.kind != "branch":
            continue
        t = ev.time
        verts, pos = None, None
        # the dying vertex occupies its column in the segment ENDING at t
        seg = next(s for s in path.segments if abs(s.t1 - t) < 1e-15)
        j = seg.vertices.index(ev.vertex)
        w0 = np.array([seg.positions[-1, j] + 1j * eps])
        img = reverse_batch_fast(path, t, w0, cfg, own_driver=np.array([j]))
        branch_images[ev.vertex] = complex(img[0])

    # assemble curves with anchors
    parent_of = {}
    for ev in path.events:
        if ev.kind == "branch":
            k, v = ev.vertex
            # children appear in the next segment at the branch position
            for seg in path.segments:
                if seg.t0 == ev.time:
                    for w in seg.vertices:
                        if w not in spans or first_seen[w] != ev.time or w[0] != k:
                            continue
                        parent_of.setdefault(w, ev.vertex)
    base_points = {}
    curves = {}
    for v, (ts, ps) in sorted(results.items(), key=lambda kv: kv[0]):
        if not ts:
            continue
        if v in parent_of and parent_of[v] in branch_images:
            anchor = branch_images[parent_of[v]]
        else:
            t0 = first_seen[v]
            verts0, pos0 = path.drivers_at(t0)
            anchor = complex(pos0[verts0.index(v)])
            base_points[v] = float(anchor.real)
        curves[v] = TracedCurve(vertex=v, times=np.array(ts),
                                points=np.array(ps), anchor=anchor)

    cap_ts = np.linspace(0.0, path.t_end, capacity_samples + 1)[1:]
    cap_vals = np.array([hcap(path, float(t), cfg) for t in cap_ts])
    return TracedHull(
        curves=curves, base_points=base_points, branch_images=branch_images,
        capacity_times=cap_ts, capacity_values=cap_vals, eps=eps,
        meta={"dt": cfg.dt, "mass_per_atom": path.mass_per_atom},
    )


# ---------------------------------------------------------------------------
# angle measurement

def _ray_fit(points: np.ndarray, origin: complex) -> float:
    """Least-squares ray through the origin; angle in (0, pi)."""
    v = np.asarray(points) - origin
    x, y = v.real, v.imag
    th = 0.5 * math.atan2(2.0 * float((x * y).sum()), float((x * x - y * y).sum()))
    # the principal axis is defined mod pi; place it in (0, pi]
    if th <= 0:
        th += math.pi
    return th


def base_angles(hull: TracedHull, base_point: float,
                fit_fraction: float | None = None) -> tuple[list[float], list[float]]:
    """Axis angles of the curves rooted at a base point, plus the gap sequence.

    Fits a ray through the base over curve points with distance in
    [2*eps, fit_fraction * curve extent]; returns angles sorted
    counterclockwise and gaps (axis, between curves, axis) summing to pi.
    """
    frac = fit_fraction if fit_fraction is not None else 0.10
    angles = []
    for v, curve in hull.curves.items():
        if v not in hull.base_points:
            continue
        if abs(hull.base_points[v] - base_point) > 1e-9:
            continue
        r = np.abs(curve.points - curve.anchor)
        r_hi = max(frac * r.max(), 4 * hull.eps)
        sel = (r >= 2 * hull.eps) & (r <= r_hi)
        if sel.sum() < 2:
            raise ValueError(
                f"insufficient points near the base for vertex {v}: "
                f"{int(sel.sum())} in window [{2*hull.eps}, {r_hi}]"
            )
        angles.append(_ray_fit(curve.points[sel], curve.anchor))
    if not angles:
        raise ValueError(f"no curves rooted at base point {base_point}")
    angles.sort()
    gaps = [angles[0]]
    gaps += [b - a for a, b in zip(angles, angles[1:])]
    gaps.append(math.pi - angles[-1])
    return angles, gaps


def branch_vertex_angles(hull: TracedHull, vertex: tuple[int, int],
                         fit_fraction: float = 0.25) -> tuple[float, float, float]:
    """Angle gaps between the three edges at a branch vertex's image.

    Returns (parent-to-first-child, child-to-child, second-child-to-parent)
    going counterclockwise; the gaps sum to 2 pi exactly.
    """
    if vertex not in hull.branch_images:
        raise ValueError(f"vertex {vertex} has no recorded branch image")
    w = hull.branch_images[vertex]
    parent_curve = hull.curves[vertex]
    kids = [v for v, c in hull.curves.items()
            if isinstance(c.anchor, complex) and c.anchor == w and v != vertex]
    if len(kids) != 2:
        raise ValueError(f"expected two child curves at {vertex}, found {len(kids)}")

    def direction(curve, from_end):
        r = np.abs(curve.points - w)
        r_max = r.max()
        r_hi = max(fit_fraction * r_max, 6 * hull.eps)
        sel = (r > 2 * hull.eps) & (r <= r_hi)
        if sel.sum() < 2:
            raise ValueError(
                f"insufficient resolution near the branch image of {vertex}"
            )
        pts = curve.points[sel] - w
        # rays from the vertex: average unit direction is stable for short arcs
        units = pts / np.abs(pts)
        mean = units.mean()
        return math.atan2(mean.imag, mean.real)

    d_par = direction(parent_curve, from_end=True)
    d_k = sorted(direction(hull.curves[k], from_end=False) for k in kids)

    def ccw_gap(a, b):
        g = (b - a) % (2 * math.pi)
        return g

    # order children counterclockwise starting from the parent direction
    g1 = ccw_gap(d_par, d_k[0])
    g1b = ccw_gap(d_par, d_k[1])
    if g1b < g1:
        d_k = [d_k[1], d_k[0]]
        g1 = g1b
    g2 = ccw_gap(d_k[0], d_k[1])
    g3 = 2 * math.pi - g1 - g2
    return g1, g2, g3


# ---------------------------------------------------------------------------
# embedding verification

def _seg_seg_dist(p1, p2, q1, q2):
    """Vectorized min distance between segment sets [p1,p2] and [q1,q2]."""
    def pts_to_segs(pts, a, b):
        ab = b - a
        denom = (ab.real ** 2 + ab.imag ** 2)
        denom = np.where(denom == 0, 1.0, denom)
        ap = pts[:, None] - a[None, :]
        t = (ap.real * ab.real[None, :] + ap.imag * ab.imag[None, :]) / denom[None, :]
        t = np.clip(t, 0.0, 1.0)
        proj = a[None, :] + t * ab[None, :]
        return np.abs(pts[:, None] - proj)

    d = min(
        pts_to_segs(p1, q1, q2).min(initial=np.inf),
        pts_to_segs(p2, q1, q2).min(initial=np.inf),
        pts_to_segs(q1, p1, p2).min(initial=np.inf),
        pts_to_segs(q2, p1, p2).min(initial=np.inf),
    )
    return float(d)


def _segments_cross(a1, a2, b1, b2):
    """Proper intersection test for two segment batches (boolean any)."""
    def orient(p, q, r):
        return np.sign((q.real - p.real) * (r.imag - p.imag)
                       - (q.imag - p.imag) * (r.real - p.real))

    o1 = orient(a1[:, None], a2[:, None], b1[None, :])
    o2 = orient(a1[:, None], a2[:, None], b2[None, :])
    o3 = orient(b1[None, :], b2[None, :], a1[:, None])
    o4 = orient(b1[None, :], b2[None, :], a2[:, None])
    return ((o1 * o2 < 0) & (o3 * o4 < 0))


@dataclass
class EmbeddingReport:
    simple: bool
    disjoint: bool
    adjacent: bool
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.simple and self.disjoint and self.adjacent

    def as_dict(self) -> dict:
        return {"passed": self.passed, "simple": self.simple,
                "disjoint": self.disjoint, "adjacent": self.adjacent,
                "failures": self.failures}


def verify_embedding(tree: MarkedPlaneTree, hull: TracedHull,
                     *, resolution: float | None = None) -> EmbeddingReport:
    """Check that the traced hull is a graph embedding of the tree.

    Curves must be simple, pairwise disjoint away from shared branch images,
    and each child curve must emanate from its parent's image.  Failures are
    reported with locations, not raised.
    """
    res = resolution if resolution is not None else 6 * hull.eps
    rep = EmbeddingReport(simple=True, disjoint=True, adjacent=True)

    if tree is not None:
        expected = {(0, v) for v in range(tree.n_vertices)}
        got = {v for v in hull.curves}
        if expected != got:
            rep.adjacent = False
            rep.failures.append({
                "kind": "vertex-set-mismatch",
                "missing": sorted(list(expected - got)),
                "extra": sorted(list(got - expected)),
            })

    full = {}
    for v, c in hull.curves.items():
        pts = np.concatenate([[c.anchor], c.points])
        full[v] = pts

    # self-intersection: non-adjacent polyline segments must not cross
    for v, pts in full.items():
        a1, a2 = pts[:-1], pts[1:]
        cross = _segments_cross(a1, a2, a1, a2)
        n = len(a1)
        idx = np.arange(n)
        adjacent = np.abs(idx[:, None] - idx[None, :]) <= 1
        if (cross & ~adjacent).any():
            rep.simple = False
            where = np.argwhere(cross & ~adjacent)[0]
            rep.failures.append({
                "kind": "self-intersection", "vertex": list(v),
                "at": [int(where[0]), int(where[1])],
            })

    # pairwise separation away from shared endpoints
    verts = list(full)
    shared = {}
    for v in verts:
        for w in verts:
            if v >= w:
                continue
            pv, pw = full[v], full[w]
            common = None
            for cand in (hull.curves[v].anchor, hull.curves[w].anchor):
                if any(abs(cand - q) < 1e-12 for q in (pv[0], pv[-1])) and \
                   any(abs(cand - q) < 1e-12 for q in (pw[0], pw[-1])):
                    common = cand
            tip_v = hull.branch_images.get(v)
            if tip_v is not None and abs(complex(pw[0]) - tip_v) < 1e-12:
                common = tip_v
            excl = 3 * res
            def away(pts):
                if common is None:
                    return pts
                keep = np.abs(pts - common) > excl
                return pts[keep]
            av, aw = away(pv), away(pw)
            if len(av) < 2 or len(aw) < 2:
                continue
            d = _seg_seg_dist(av[:-1], av[1:], aw[:-1], aw[1:])
            if d < res:
                rep.disjoint = False
                rep.failures.append({
                    "kind": "curves-too-close", "pair": [list(v), list(w)],
                    "distance": d, "floor": res,
                })

    # adjacency: child curves start at the parent's branch image
    for v, c in hull.curves.items():
        if isinstance(c.anchor, complex) and c.anchor.imag > 0:
            d0 = abs(c.points[0] - c.anchor)
            scale = max(np.abs(c.points - c.anchor).max(), res)
            if d0 > max(0.25 * scale, 10 * res):
                rep.adjacent = False
                rep.failures.append({
                    "kind": "child-detached", "vertex": list(v),
                    "first-point-distance": float(d0),
                })
    return rep


# ---------------------------------------------------------------------------
# local growth diagnostic

@dataclass
class GrowthReport:
    c_t: float
    n_used: int
    max_excursion: float
    passed: bool
    offenders: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"c_t": self.c_t, "n": self.n_used, "passed": self.passed,
                "max_excursion": self.max_excursion, "offenders": self.offenders}


def local_growth_check(path: DrivingPath, t: float,
                       hull: TracedHull | None = None,
                       cfg: SolverConfig | None = None,
                       extra_points: np.ndarray | None = None) -> GrowthReport:
    """Every hull point up to time t must lie within 3*C_t of a root start,
    where C_t = sup |U(s) - U(0)| over ancestral driver paths, or sqrt(n t)
    if larger (n = maximum alive count up to t)."""
    if hull is None:
        hull = trace_hull(path, cfg or SolverConfig(), capacity_samples=2)
    sup_dev = 0.0
    n_max = 0
    for seg in path.segments:
        if seg.t0 >= t:
            break
        n_max = max(n_max, len(seg.vertices))
    # each vertex's extended driver path starts at its root's initial position
    # (children are continuous continuations of their parents)
    lineage = {}
    for j, v in enumerate(path.segments[0].vertices):
        lineage[v] = float(path.segments[0].positions[0, j])
    for ev in path.events:
        if ev.kind == "branch":
            base = lineage.get(ev.vertex)
            if base is None:
                continue
            for seg in path.segments:
                if seg.t0 == ev.time:
                    for v in seg.vertices:
                        if v not in lineage:
                            lineage[v] = base
    for seg in path.segments:
        if seg.t0 >= t:
            break
        sel = seg.times <= t + 1e-15
        for j, v in enumerate(seg.vertices):
            base = lineage.get(v)
            if base is None:
                continue
            dev = np.abs(seg.positions[sel, j] - base).max(initial=0.0)
            sup_dev = max(sup_dev, float(dev))
    c_t = max(sup_dev, math.sqrt(max(n_max, 1) * t))
    starts = sorted(set(
        lineage[v] for v in path.segments[0].vertices if v in lineage
    ))
    pts = [p for c in hull.curves.values() for tt, p in zip(c.times, c.points) if tt <= t]
    if extra_points is not None:
        pts = pts + list(extra_points)
    offenders = []
    max_exc = 0.0
    for p in pts:
        d = min(abs(p - s) for s in starts)
        max_exc = max(max_exc, d)
        if d > 3 * c_t:
            offenders.append({"point": [p.real, p.imag], "distance": d})
    return GrowthReport(c_t=c_t, n_used=n_max, max_excursion=max_exc,
                        passed=not offenders, offenders=offenders)


# ---------------------------------------------------------------------------
# wedge-constant calibration

def measure_wedge_angles(zeta1: float, zeta2: float, *, mass: float,
                         t_end: float = 1.0, dt: float = 1e-3,
                         eps: float = 1e-3) -> list[float]:
    """Trace the two sqrt-drivers and measure their base angles."""
    from .driver import wedge_path

    wp = wedge_path(zeta1, zeta2, t_end, dt, mass_per_atom=mass)
    cfg = SolverConfig(dt=dt, eps=eps, max_points=100)
    hull = trace_hull(wp, cfg, capacity_samples=2)
    angles, _ = base_angles(hull, 0.0)
    return angles


def psi_calibration_report(theta1: float, theta2: float, *, dt: float = 1e-3,
                           eps: float = 1e-3) -> dict:
    """Decide which normalization of the wedge constants reproduces the
    requested slit angles under the embedding atom mass (1/2 per atom).

    Both candidates are traced: the raw ratio values (zeta1, zeta2) and the
    same divided by sqrt(2).  The raw values are exact for unit-mass atoms;
    at embedding mass they open a wider wedge, so the sqrt(2)-reduced pair is
    the expected winner.  The report keeps both measurements.
    """
    from .loewner import EMBEDDING_ATOM_MASS
    from .wedge import wedge_spec

    spec = wedge_spec(theta1, theta2)
    target = [theta1, theta2]
    out = {"theta1": theta1, "theta2": theta2, "spec": spec.as_dict(),
           "embedding_mass": EMBEDDING_ATOM_MASS, "candidates": {}}
    best, best_err = None, np.inf
    for name, pair in (("raw", (spec.zeta1, spec.zeta2)),
                       ("raw/sqrt2", (spec.zeta1_embedding, spec.zeta2_embedding))):
        angles = measure_wedge_angles(pair[0], pair[1],
                                      mass=EMBEDDING_ATOM_MASS, dt=dt, eps=eps)
        err = float(max(abs(a - b) for a, b in zip(sorted(angles), target)))
        out["candidates"][name] = {
            "zeta": list(pair), "measured_angles": [float(a) for a in angles],
            "max_angle_error": err,
        }
        if err < best_err:
            best, best_err = name, err
    out["winner"] = best
    out["winner_error"] = best_err
    return out
