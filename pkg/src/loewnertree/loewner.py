"""Forward and reverse integration of the multislit Loewner equation.

The chordal equation dg/dt = sum_j m/(g - U_j(t)) is integrated with RK4 on
proximity-capped steps; the reverse flow dh/ds = -sum_j m/(h - U_j(t-s))
starts tips at U + i*eps with an exact own-driver square-root phase before
switching to RK4.  Atom mass m comes from the driving path.

Mass normalization: a single unit-mass driver at c grows the vertical slit
g_t(z) = c + sqrt((z-c)^2 + 2t).  Genealogy embeddings are traced with
EMBEDDING_ATOM_MASS = 1/2 per atom, the normalization under which a strength
alpha pair of drivers (-+ sqrt(alpha t)) opens a wedge at angle
theta = pi/(alpha + 2); with unit atoms the same drivers open at
2 pi/(alpha + 4) instead.  (Checked against the exact folding map; see the
calibration helpers in `hulls`.)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .driver import DrivingPath

EMBEDDING_ATOM_MASS = 0.5


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-3            # cap on integration substeps
    eps: float | None = None    # tip approach height, default sqrt(dt)/10
    swallow_tol: float = 1e-6
    max_points: int = 400       # curve samples per vertex in tracing
    proximity_safety: float = 0.05
    fit_fraction: float = 0.10

    def __post_init__(self):
        if self.eps is None:
            object.__setattr__(self, "eps", math.sqrt(self.dt) / 10.0)
        for name in ("dt", "eps", "swallow_tol", "proximity_safety", "fit_fraction"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_points <= 1:
            raise ValueError("max_points must exceed 1")

    def with_dt(self, dt: float) -> "SolverConfig":
        return replace(self, dt=dt, eps=None)


@dataclass(frozen=True)
class Swallowed:
    """Marker for points absorbed by the hull before the target time."""

    time: float


class _DriverTable:
    """Flattened piecewise-linear driver storage for fast interpolation."""

    def __init__(self, path: DrivingPath):
        self.path = path
        segs = path.segments
        self.seg_t0 = np.array([s.t0 for s in segs])
        self.seg_t1 = np.array([s.t1 for s in segs])
        self.n_cols = np.array([len(s.vertices) for s in segs], dtype=np.int64)
        self.time_ptr = np.zeros(len(segs) + 1, dtype=np.int64)
        self.pos_ptr = np.zeros(len(segs) + 1, dtype=np.int64)
        for i, s in enumerate(segs):
            self.time_ptr[i + 1] = self.time_ptr[i] + len(s.times)
            self.pos_ptr[i + 1] = self.pos_ptr[i] + s.positions.size
        self.times_flat = (np.concatenate([s.times for s in segs])
                           if segs else np.zeros(0))
        self.pos_flat = (np.concatenate([s.positions.ravel() for s in segs])
                         if segs else np.zeros(0))

    def segment_index(self, tau: float) -> int:
        i = int(np.searchsorted(self.seg_t1, tau, side="left"))
        return min(i, len(self.path.segments) - 1)

    def positions(self, tau: float, seg_idx: int | None = None) -> np.ndarray:
        if seg_idx is None:
            seg_idx = self.segment_index(tau)
        seg = self.path.segments[seg_idx]
        ts = seg.times
        if len(ts) == 1:
            return seg.positions[0]
        j = int(np.searchsorted(ts, tau, side="right") - 1)
        j = min(max(j, 0), len(ts) - 2)
        t0, t1 = ts[j], ts[j + 1]
        w = 0.0 if t1 == t0 else (tau - t0) / (t1 - t0)
        return (1 - w) * seg.positions[j] + w * seg.positions[j + 1]


def _forward_batch(path: DrivingPath, t: float, zs: np.ndarray, cfg: SolverConfig):
    """Integrate the forward equation for a batch of starting points.

    The difference phi = g - z is integrated (phi_0 = 0); this avoids
    catastrophic cancellation when capacities are extracted at |z| >> 1.
    Returns (g, swallow_time) with nan swallow times for surviving points.
    """
    table = _DriverTable(path)
    m = path.mass_per_atom
    z0 = np.asarray(zs, dtype=complex)
    phi = np.zeros_like(z0)
    swal = np.full(len(z0), np.nan)
    active = np.ones(len(z0), dtype=bool)
    s = 0.0
    seg_idx = 0
    nseg = len(path.segments)
    tol = 1e-14 * max(1.0, t)
    while s < t - tol and active.any():
        while seg_idx < nseg - 1 and s >= table.seg_t1[seg_idx] - 1e-18:
            seg_idx += 1
        seg_end = min(float(table.seg_t1[seg_idx]), t)
        if seg_end - s < tol and seg_end < t:
            s = seg_end
            continue
        u = table.positions(s, seg_idx)
        n = len(u)
        if n == 0:
            s = seg_end
            continue
        g_act = z0[active] + phi[active]
        d = np.abs(g_act[:, None] - u[None, :])
        dmin_pt = d.min(axis=1)
        hit = dmin_pt < cfg.swallow_tol
        if hit.any():
            idx = np.nonzero(active)[0][hit]
            swal[idx] = s
            active[idx] = False
            if not active.any():
                break
            dmin_pt = dmin_pt[~hit]
        dmin = float(dmin_pt.min())
        h = min(cfg.dt, seg_end - s,
                cfg.proximity_safety * dmin * dmin / (m * max(n, 1)))
        h = max(h, 1e-15)
        za = z0[active]
        pa = phi[active]

        def rhs(tau, p):
            uu = table.positions(min(tau, seg_end), seg_idx)
            return (m / (p[:, None] + (za[:, None] - uu[None, :]))).sum(axis=1)

        k1 = rhs(s, pa)
        k2 = rhs(s + h / 2, pa + h / 2 * k1)
        k3 = rhs(s + h / 2, pa + h / 2 * k2)
        k4 = rhs(s + h, pa + h * k3)
        phi[active] = pa + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        s += h
    return z0 + phi, swal


def forward_map(path: DrivingPath, t: float, z: complex, cfg: SolverConfig | None = None):
    """g_t(z) for Im z > 0, or Swallowed(T_z) if z is absorbed before t."""
    cfg = cfg or SolverConfig()
    if np.imag(z) <= 0:
        raise ValueError("forward_map requires Im z > 0")
    g, sw = _forward_batch(path, t, np.array([z]), cfg)
    if np.isfinite(sw[0]):
        return Swallowed(time=float(sw[0]))
    return complex(g[0])


def _reverse_batch(
    path: DrivingPath,
    t: float,
    w0: np.ndarray,
    cfg: SolverConfig,
    own_driver: np.ndarray | None = None,
):
    """Integrate the reverse equation from s=0 to s=t for a batch of points.

    ``own_driver`` gives, per point, the column of its own driver in the
    segment containing time t; those points start with the square-root phase
    (exact for a static isolated driver) before the RK4 phase.
    """
    table = _DriverTable(path)
    m = path.mass_per_atom
    h_pts = np.asarray(w0, dtype=complex).copy()
    npts = len(h_pts)
    s = 0.0
    seg_idx = table.segment_index(t) if path.segments else 0

    def drivers(s_now):
        tau = t - s_now
        nonlocal seg_idx
        while seg_idx > 0 and tau < table.seg_t0[seg_idx] - 1e-18:
            seg_idx -= 1
        return table.positions(tau, seg_idx)

    if own_driver is not None and npts:
        eps2 = cfg.eps * cfg.eps
        seg0 = table.seg_t0[seg_idx]
        s_cap = min(25.0 * eps2, t, max(t - seg0, 0.0))
        ds = eps2 / 4.0
        while s < s_cap:
            step = min(ds, s_cap - s)
            u_now = drivers(s)
            u_next = drivers(s + step)
            for i in range(npts):
                j = own_driver[i]
                if j < 0 or j >= len(u_now):
                    continue
                wrel = h_pts[i] - u_now[j]
                other = 0.0
                for k in range(len(u_now)):
                    if k != j:
                        other += -m / (h_pts[i] - u_now[k])
                w2 = wrel * wrel - 2.0 * m * step
                wnew = np.sqrt(w2)
                if wnew.imag < 0:
                    wnew = -wnew
                h_pts[i] = u_next[j] + wnew + step * other
            s += step
            ds *= 2.0

    tol = 1e-14 * max(1.0, t)
    while s < t - tol:
        tau = t - s
        while seg_idx > 0 and tau <= table.seg_t0[seg_idx] + 1e-18:
            seg_idx -= 1
        seg_start = float(table.seg_t0[seg_idx])
        s_seg_end = min(t, t - seg_start)  # s value at which this segment ends
        if s_seg_end - s < tol and s_seg_end < t:
            s = s_seg_end
            continue
        u = table.positions(tau, seg_idx)
        n = len(u)
        if n == 0:
            s = s_seg_end
            continue
        d = np.abs(h_pts[:, None] - u[None, :])
        dmin = float(d.min())
        hstep = min(cfg.dt, max(s_seg_end - s, tol), t - s,
                    cfg.proximity_safety * dmin * dmin / (m * n))
        hstep = max(hstep, 1e-16)
        si = seg_idx

        def rhs(s_now, w):
            uu = table.positions(max(t - s_now, seg_start), si)
            if len(uu) == 0:
                return np.zeros_like(w)
            return (-m / (w[:, None] - uu[None, :])).sum(axis=1)

        k1 = rhs(s, h_pts)
        k2 = rhs(s + hstep / 2, h_pts + hstep / 2 * k1)
        k3 = rhs(s + hstep / 2, h_pts + hstep / 2 * k2)
        k4 = rhs(s + hstep, h_pts + hstep * k3)
        h_pts = h_pts + hstep / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        s += hstep
    return h_pts


def reverse_map(path: DrivingPath, t: float, w: complex, cfg: SolverConfig | None = None) -> complex:
    """h_t(w) = g_t^{-1}(w), by integrating the reverse Loewner equation."""
    cfg = cfg or SolverConfig()
    if np.imag(w) <= 0:
        raise ValueError("reverse_map requires Im w > 0 (tips are handled by trace_hull)")
    out = _reverse_batch(path, t, np.array([w]), cfg)
    return complex(out[0])


def hcap(path: DrivingPath, t: float, cfg: SolverConfig | None = None) -> float:
    """Half-plane capacity b_t from the hydrodynamic expansion at large |z|.

    g_t(z) = z + b_t/z + O(|z|^-2); (g-z)z is fitted as a quadratic in 1/z at
    three probe heights and extrapolated to infinity.
    """
    cfg = cfg or SolverConfig()
    if t < 0 or t > path.t_end + 1e-12:
        raise ValueError("t out of range")
    if t == 0:
        return 0.0
    span = 1.0
    if path.segments:
        span = max(
            span,
            max(abs(float(seg.positions.max(initial=0.0))) for seg in path.segments),
            max(abs(float(seg.positions.min(initial=0.0))) for seg in path.segments),
        )
    r0 = max(4000.0, 200.0 * span)
    zs = np.array([1j * r0, 2j * r0, 4j * r0])
    g, sw = _forward_batch(path, t, zs, cfg)
    if np.isfinite(sw).any():
        raise ArithmeticError("capacity probe was swallowed; hull larger than probe radius")
    y = (g - zs) * zs
    w = 1.0 / zs
    vand = np.vander(w, 3, increasing=True)
    coef = np.linalg.solve(vand, y)
    b = coef[0]
    if abs(b.imag) > 1e-6 * (1 + abs(b.real)):
        raise ArithmeticError(f"capacity fit failed: imaginary part {b.imag}")
    return float(b.real)


def capacity_oracle(path: DrivingPath, t: float) -> float:
    """Independent capacity value: b_t = int_0^t <1, mu_s> ds, exactly summed
    over the inter-event intervals on which the atom count is constant."""
    total = 0.0
    for seg in path.segments:
        if seg.t0 >= t:
            break
        total += (min(seg.t1, t) - seg.t0) * len(seg.vertices) * path.mass_per_atom
    return total


# ---------------------------------------------------------------------------
# numba fast path for the reverse solver (the quadratic tracing kernel)

try:
    import numba as _nb

    HAVE_NUMBA = True
except Exception:  # pragma: no cover
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @_nb.njit(cache=True, fastmath=False)
    def _interp_cols_nb(times_flat, pos_flat, time_ptr, pos_ptr, ncols, seg, tau, out):  # pragma: no cover
        lo = time_ptr[seg]
        hi = time_ptr[seg + 1]
        nc = ncols[seg]
        nt = hi - lo
        base = pos_ptr[seg]
        if nt == 1:
            for c in range(nc):
                out[c] = pos_flat[base + c]
            return nc
        j = np.searchsorted(times_flat[lo:hi], tau) - 1
        if j < 0:
            j = 0
        if j > nt - 2:
            j = nt - 2
        t0 = times_flat[lo + j]
        t1 = times_flat[lo + j + 1]
        w = 0.0 if t1 == t0 else (tau - t0) / (t1 - t0)
        row0 = base + j * nc
        row1 = row0 + nc
        for c in range(nc):
            out[c] = (1.0 - w) * pos_flat[row0 + c] + w * pos_flat[row1 + c]
        return nc

    @_nb.njit(cache=True, fastmath=False)
    def _reverse_batch_nb(times_flat, pos_flat, time_ptr, pos_ptr, ncols,
                          seg_t0, seg_t1, nseg, mass, t, w0, own, eps, dt,
                          prox, max_cols):  # pragma: no cover
        npts = w0.shape[0]
        h_pts = w0.copy()
        u_now = np.empty(max_cols)
        u_next = np.empty(max_cols)
        u1 = np.empty(max_cols)
        u2 = np.empty(max_cols)
        k1 = np.empty(npts, dtype=np.complex128)
        k2 = np.empty(npts, dtype=np.complex128)
        k3 = np.empty(npts, dtype=np.complex128)
        k4 = np.empty(npts, dtype=np.complex128)
        s = 0.0
        # segment containing time t
        seg = 0
        for i in range(nseg):
            seg = i
            if t <= seg_t1[i] + 1e-18:
                break
        # startup phase: own-driver sqrt steps with frozen others
        has_own = False
        for i in range(npts):
            if own[i] >= 0:
                has_own = True
        if has_own:
            if True:
                eps2 = eps * eps
                s_cap = 25.0 * eps2
                if t < s_cap:
                    s_cap = t
                rem = t - seg_t0[seg]
                if rem < s_cap:
                    s_cap = rem
                ds = eps2 / 4.0
                while s < s_cap - 1e-18:
                    step = ds
                    if s_cap - s < step:
                        step = s_cap - s
                    nc = _interp_cols_nb(times_flat, pos_flat, time_ptr, pos_ptr,
                                         ncols, seg, t - s, u_now)
                    _interp_cols_nb(times_flat, pos_flat, time_ptr, pos_ptr,
                                    ncols, seg, t - s - step, u_next)
                    for i in range(npts):
                        j = own[i]
                        if j < 0 or j >= nc:
                            continue
                        wrel = h_pts[i] - u_now[j]
                        other = 0.0 + 0.0j
                        for c in range(nc):
                            if c != j:
                                other += -mass / (h_pts[i] - u_now[c])
                        w2 = wrel * wrel - 2.0 * mass * step
                        wn = np.sqrt(w2)
                        if wn.imag < 0:
                            wn = -wn
                        h_pts[i] = u_next[j] + wn + step * other
                    s += step
                    ds *= 2.0
        tol = 1e-14 * (1.0 if t < 1.0 else t)
        while s < t - tol:
            tau = t - s
            while seg > 0 and tau <= seg_t0[seg] + 1e-18:
                seg -= 1
            s_end = t - seg_t0[seg]
            if t < s_end:
                s_end = t
            if s_end - s < tol and s_end < t:
                s = s_end
                continue
            nc = _interp_cols_nb(times_flat, pos_flat, time_ptr, pos_ptr,
                                 ncols, seg, tau, u_now)
            if nc == 0:
                s = s_end
                continue
            dmin = 1.0e300
            for i in range(npts):
                for c in range(nc):
                    d = abs(h_pts[i] - u_now[c])
                    if d < dmin:
                        dmin = d
            hstep = dt
            if s_end - s > tol and s_end - s < hstep:
                hstep = s_end - s
            if t - s < hstep:
                hstep = t - s
            pcap = prox * dmin * dmin / (mass * nc)
            if pcap < hstep:
                hstep = pcap
            if hstep < 1e-16:
                hstep = 1e-16
            # RK4 stages
            for i in range(npts):
                acc = 0.0 + 0.0j
                for c in range(nc):
                    acc += -mass / (h_pts[i] - u_now[c])
                k1[i] = acc
            tau_m = tau - 0.5 * hstep
            if tau_m < seg_t0[seg]:
                tau_m = seg_t0[seg]
            nc1 = _interp_cols_nb(times_flat, pos_flat, time_ptr, pos_ptr,
                                  ncols, seg, tau_m, u1)
            for i in range(npts):
                acc = 0.0 + 0.0j
                w = h_pts[i] + 0.5 * hstep * k1[i]
                for c in range(nc1):
                    acc += -mass / (w - u1[c])
                k2[i] = acc
            for i in range(npts):
                acc = 0.0 + 0.0j
                w = h_pts[i] + 0.5 * hstep * k2[i]
                for c in range(nc1):
                    acc += -mass / (w - u1[c])
                k3[i] = acc
            tau_e = tau - hstep
            if tau_e < seg_t0[seg]:
                tau_e = seg_t0[seg]
            nc2 = _interp_cols_nb(times_flat, pos_flat, time_ptr, pos_ptr,
                                  ncols, seg, tau_e, u2)
            for i in range(npts):
                acc = 0.0 + 0.0j
                w = h_pts[i] + hstep * k3[i]
                for c in range(nc2):
                    acc += -mass / (w - u2[c])
                k4[i] = acc
            for i in range(npts):
                h_pts[i] = h_pts[i] + hstep / 6.0 * (k1[i] + 2.0 * k2[i]
                                                     + 2.0 * k3[i] + k4[i])
            s += hstep
        return h_pts


def reverse_batch_fast(path, t, w0, cfg, own_driver=None):
    """Reverse solve using the numba kernel when available."""
    if not HAVE_NUMBA or not path.segments:
        return _reverse_batch(path, t, w0, cfg, own_driver=own_driver)
    table = _DriverTable(path)
    own = (np.asarray(own_driver, dtype=np.int64) if own_driver is not None
           else np.full(len(w0), -1, dtype=np.int64))
    max_cols = int(table.n_cols.max()) if len(table.n_cols) else 1
    return _reverse_batch_nb(
        table.times_flat, table.pos_flat, table.time_ptr, table.pos_ptr,
        table.n_cols, table.seg_t0, table.seg_t1, len(path.segments),
        path.mass_per_atom, float(t), np.asarray(w0, dtype=np.complex128),
        own, cfg.eps, cfg.dt, cfg.proximity_safety, max(max_cols, 1),
    )
