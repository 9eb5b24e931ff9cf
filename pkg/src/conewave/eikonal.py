"""Optical functions built by backward null-ray shooting from axis vertices.

The level set {u = v} of the optical function is the backward characteristic
cone with vertex (v, 0).  Rays are launched from a ladder of vertices on the
time axis and marched down in coordinate time; on every grid time slice each
cone contributes a ring of samples carrying the exact value (the vertex time)
and the exact gradient (minus the ray momentum).  Grid nodes are then filled
by cubic interpolation in the cone family: angular interpolation over the
launch grid of each cone followed by radial interpolation across nested cones.
A small ball around the spatial origin, where the ray chart degenerates, is
filled with t + d_g(x) using the chordal metric distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import metric as metric_mod
from ._util import inv3x3_sym, lagrange_nonuniform
from .errors import (AccuracyError, CausticError, CoverageError, DomainError,
                     ValidationError)

__all__ = [
    "GridSpec",
    "NullGeodesic",
    "shoot_null_geodesic",
    "OpticalField",
    "MantleBundle",
    "MantleQuadrature",
    "build_optical_function",
    "eikonal_residual",
    "cone_membership",
    "mantle_sample",
    "cone_bounds",
    "export_residual_csv",
]


@dataclass(frozen=True)
class GridSpec:
    """Uniform spacetime grid over [t_min, 0) x [-half_width, half_width]^3."""

    t_min: float
    n_t: int
    half_width: float
    n: int

    def __post_init__(self):
        if self.t_min >= 0:
            raise ValidationError("grid requires t_min < 0")
        if self.n_t < 2 or self.n < 8:
            raise ValidationError("grid too coarse")

    @property
    def dt(self) -> float:
        return -self.t_min / self.n_t

    @property
    def h(self) -> float:
        return 2 * self.half_width / (self.n - 1)

    @property
    def slice_times(self) -> np.ndarray:
        return self.t_min + self.dt * np.arange(self.n_t)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.n)

    def refine(self, factor: int = 2) -> "GridSpec":
        return GridSpec(self.t_min, self.n_t * factor, self.half_width,
                        (self.n - 1) * factor + 1)


# ---------------------------------------------------------------------------
# single-ray shooting (affine parameter)
# ---------------------------------------------------------------------------

@dataclass
class NullGeodesic:
    """Backward null ray from an axis vertex, sampled at uniform affine steps."""

    s: np.ndarray          # (n,)
    points: np.ndarray     # (n, 4) (t, x)
    momenta: np.ndarray    # (n, 4) (p_t, p_i)
    hamiltonian_drift: float
    vertex_time: float
    direction: np.ndarray
    step: float


def _inv_derivs(metric, t, x):
    g = metric.spatial(t, x)
    ginv = inv3x3_sym(g)
    dtg = metric.spatial_dt(t, x)
    dxg = metric.spatial_dx(t, x)
    tmp = np.einsum("...kl,...lj->...kj", dtg, ginv)
    dginv_t = -np.einsum("...ik,...kj->...ij", ginv, tmp)
    tmp2 = np.einsum("...mkl,...lj->...mkj", dxg, ginv)
    dginv_x = -np.einsum("...ik,...mkj->...mij", ginv, tmp2)
    return ginv, dginv_t, dginv_x


def _affine_rhs(metric, y):
    """d/ds of (t, x, p_t, p) for the past-directed affine flow xdot = -g^{ab} p_b."""
    t = y[..., 0]
    x = y[..., 1:4]
    pt = y[..., 4]
    p = y[..., 5:8]
    ginv, dginv_t, dginv_x = _inv_derivs(metric, t, x)
    out = np.empty_like(y)
    out[..., 0] = pt
    out[..., 1:4] = -np.einsum("...ij,...j->...i", ginv, p)
    out[..., 4] = 0.5 * np.einsum("...ij,...i,...j->...", dginv_t, p, p)
    out[..., 5:8] = 0.5 * np.einsum("...mij,...i,...j->...m", dginv_x, p, p)
    return out


def _hamiltonian(metric, y):
    t = y[..., 0]
    x = y[..., 1:4]
    pt = y[..., 4]
    p = y[..., 5:8]
    ginv = np.linalg.inv(metric.spatial(t, x))
    return 0.5 * (-pt**2 + np.einsum("...ij,...i,...j->...", ginv, p, p))


def shoot_null_geodesic(metric, vertex, direction, s_span=1.0, step=1e-3,
                        drift_tol=1e-9) -> NullGeodesic:
    """Integrate one backward null ray with RK4 in the affine parameter.

    ``vertex`` is a time (axis point) or a (t, x) pair with x on the axis;
    ``direction`` must be unit with respect to the spatial metric at the
    vertex.  The momentum is normalized so p_t = -1 there, which makes the
    vertex labeling of the optical function consistent with u(t, 0) = t.
    """
    if np.ndim(vertex) == 0:
        t0 = float(vertex)
    else:
        t0 = float(vertex[0])
        if np.linalg.norm(np.asarray(vertex[1], dtype=float)) > 1e-12:
            raise ValidationError("vertex must lie on the time axis")
    d = np.asarray(direction, dtype=float)
    g0 = metric.spatial(t0, np.zeros(3))
    norm = float(d @ g0 @ d)
    if abs(norm - 1.0) > 1e-6:
        raise ValidationError("direction must be unit with respect to the metric at the vertex")
    n_steps = int(np.ceil(s_span / step))
    y = np.empty(8)
    y[0] = t0
    y[1:4] = 0.0
    y[4] = -1.0
    y[5:8] = g0 @ d
    ys = np.empty((n_steps + 1, 8))
    ys[0] = y
    for k in range(n_steps):
        ds = min(step, s_span - k * step)
        k1 = _affine_rhs(metric, y)
        k2 = _affine_rhs(metric, y + 0.5 * ds * k1)
        k3 = _affine_rhs(metric, y + 0.5 * ds * k2)
        k4 = _affine_rhs(metric, y + ds * k3)
        y = y + ds / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(metric.in_domain(y[0], y[1:4])):
            raise DomainError(f"null ray left the metric domain at s={(k + 1) * step:.4g}")
        ys[k + 1] = y
    s = np.minimum(step * np.arange(n_steps + 1), s_span)
    drift = float(np.abs(_hamiltonian(metric, ys)).max())
    if drift > drift_tol:
        raise AccuracyError(
            f"null-constraint drift {drift:.3e} exceeds tolerance {drift_tol:.1e}; reduce step")
    if np.any(np.diff(ys[:, 0]) >= 0):
        raise AccuracyError("time failed to decrease monotonically along the backward ray")
    return NullGeodesic(s=s, points=ys[:, :4].copy(), momenta=ys[:, 4:].copy(),
                        hamiltonian_drift=drift, vertex_time=t0, direction=d, step=step)


# ---------------------------------------------------------------------------
# optical field container
# ---------------------------------------------------------------------------

@dataclass
class MantleBundle:
    """Vertex-0 cone rays recorded on every grid slice (the {u = 0} mantle)."""

    times: np.ndarray      # (ns,)
    x: np.ndarray          # (ns, n_theta, n_phi, 3)
    p: np.ndarray          # (ns, n_theta, n_phi, 4)


class OpticalField:
    """Gridded optical function with exact-ray gradients and the mantle bundle."""

    def __init__(self, grid: GridSpec, u, grad, mantle: MantleBundle,
                 axis_radius: float, stats: dict):
        self.grid = grid
        self.u = u                      # (n_t, n, n, n)
        self.grad = grad                # (n_t, n, n, n, 4); grad[..., 0] = d_t u
        self.mantle = mantle
        self.axis_radius = axis_radius
        self.stats = dict(stats)
        self.vertex = (0.0, np.zeros(3))

    # -- interpolation -----------------------------------------------------

    @property
    def m(self):
        return 1.0 / self.grad[..., 0]

    def _locate(self, t, x):
        g = self.grid
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        shp = np.broadcast(t, x[..., 0]).shape
        tt = np.broadcast_to(t, shp)
        ft = (tt - g.t_min) / g.dt
        it = np.clip(np.floor(ft).astype(np.int64), 0, g.n_t - 2)
        wt = np.clip(ft - it, 0.0, 1.0)
        fx = (x + g.half_width) / g.h
        ix = np.clip(np.floor(fx).astype(np.int64), 0, g.n - 2)
        wx = np.clip(fx - ix, 0.0, 1.0)
        return shp, it, wt, ix, wx

    def _interp(self, arr, t, x):
        """Linear in t, trilinear in space; arr has shape (n_t, n, n, n[, m])."""
        shp, it, wt, ix, wx = self._locate(t, x)
        vec = arr.ndim == 5
        out = 0.0
        for dt_ in (0, 1):
            w_t = (1 - wt) if dt_ == 0 else wt
            for dx_ in (0, 1):
                w_0 = (1 - wx[..., 0]) if dx_ == 0 else wx[..., 0]
                for dy_ in (0, 1):
                    w_1 = (1 - wx[..., 1]) if dy_ == 0 else wx[..., 1]
                    for dz_ in (0, 1):
                        w_2 = (1 - wx[..., 2]) if dz_ == 0 else wx[..., 2]
                        w = w_t * w_0 * w_1 * w_2
                        vals = arr[it + dt_, ix[..., 0] + dx_, ix[..., 1] + dy_, ix[..., 2] + dz_]
                        out = out + (w[..., None] * vals if vec else w * vals)
        return out

    def interp_u(self, t, x):
        return self._interp(self.u, t, x)

    def interp_grad(self, t, x):
        return self._interp(self.grad, t, x)

    def interp_m(self, t, x):
        return 1.0 / self.interp_grad(t, x)[..., 0]

    def sample(self, t, x):
        """(u, grad, m) at arbitrary points inside the grid."""
        u = self.interp_u(t, x)
        grad = self.interp_grad(t, x)
        return u, grad, 1.0 / grad[..., 0]

    def hessian(self, t, x, t_step=None, x_step=None):
        """Symmetrized 4x4 Hessian of u via central differences of the gradient field."""
        g = self.grid
        ht = t_step if t_step is not None else g.dt
        hx = x_step if x_step is not None else g.h
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        shp = np.broadcast(t, x[..., 0]).shape
        H = np.empty(shp + (4, 4))
        tt = np.broadcast_to(t, shp)
        # keep the time stencil inside [t_min, t_max]
        t_lo, t_hi = g.t_min, g.t_min + (g.n_t - 1) * g.dt
        tp = np.minimum(tt + ht, t_hi)
        tm = np.maximum(tt - ht, t_lo)
        H[..., 0, :] = (self.interp_grad(tp, x) - self.interp_grad(tm, x)) / (tp - tm)[..., None]
        for k in range(3):
            e = np.zeros(3)
            e[k] = hx
            xp = np.clip(x + e, -g.half_width, g.half_width)
            xm = np.clip(x - e, -g.half_width, g.half_width)
            span = (xp[..., k] - xm[..., k])[..., None]
            H[..., 1 + k, :] = (self.interp_grad(tt, xp) - self.interp_grad(tt, xm)) / span
        return 0.5 * (H + np.swapaxes(H, -1, -2))

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        header = json.dumps({
            "grid": [self.grid.t_min, self.grid.n_t, self.grid.half_width, self.grid.n],
            "axis_radius": self.axis_radius,
            "stats": self.stats,
            "mantle_shape": list(self.mantle.x.shape),
        }).encode() + b"\n"
        with open(path, "wb") as fh:
            fh.write(b"CWOF1\n")
            fh.write(header)
            for arr in (self.u, self.grad, self.mantle.times, self.mantle.x, self.mantle.p):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "OpticalField":
        with open(path, "rb") as fh:
            if fh.read(6) != b"CWOF1\n":
                raise ValidationError("not a conewave optical-field file")
            header = json.loads(fh.readline().decode())
            t_min, n_t, W, n = header["grid"]
            grid = GridSpec(t_min, int(n_t), W, int(n))
            buf = np.frombuffer(fh.read(), dtype="<f8")
        nt, nn = grid.n_t, grid.n
        sz_u = nt * nn**3
        u = buf[:sz_u].reshape(nt, nn, nn, nn).copy()
        grad = buf[sz_u:sz_u * 5].reshape(nt, nn, nn, nn, 4).copy()
        off = sz_u * 5
        ms = header["mantle_shape"]
        ns = ms[0]
        times = buf[off:off + ns].copy()
        off += ns
        nx = ns * ms[1] * ms[2] * 3
        x = buf[off:off + nx].reshape(ms[0], ms[1], ms[2], 3).copy()
        off += nx
        p = buf[off:off + ns * ms[1] * ms[2] * 4].reshape(ms[0], ms[1], ms[2], 4).copy()
        mantle = MantleBundle(times=times, x=x, p=p)
        return cls(grid, u, grad, mantle, header["axis_radius"], header["stats"])


# ---------------------------------------------------------------------------
# field construction
# ---------------------------------------------------------------------------

def _directions(n_theta, n_phi):
    theta = (np.arange(n_theta) + 0.5) * np.pi / n_theta
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    v = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)
    return theta, phi, v


def _antipodal(tab):
    """Re-index (..., n_theta, n_phi, m) tables from launch to crossing direction.

    Backward rays cross a slice on the opposite side of the vertex, so the ray
    launched at (pi - theta, phi + pi) is the one seen at node direction
    (theta, phi).  The cell-centered grid maps onto itself exactly.
    """
    return np.roll(np.flip(tab, axis=-3), tab.shape[-2] // 2, axis=-2)


def _pad_sphere(tab):
    """Pad (..., n_theta, n_phi, m) tables for cubic stencils: two pole-reflection
    rows in theta (the direction at (-theta, phi) equals (theta, phi + pi)) and
    two periodic columns in phi."""
    nphi = tab.shape[-2]
    half = nphi // 2
    rolled = np.roll(tab, half, axis=-2)       # phi -> phi + pi (nphi is even)
    top = np.flip(rolled[..., :2, :, :], axis=-3)
    bot = np.flip(rolled[..., -2:, :, :], axis=-3)
    t = np.concatenate([top, tab, bot], axis=-3)
    return np.concatenate([t[..., -2:, :], t, t[..., :2, :]], axis=-2)


class _RK4Marcher:
    """Batched RK4 in coordinate time for the t-parameterized ray equations."""

    def __init__(self, metric, pace):
        self.metric = metric
        self.pace = pace          # target RK4 step size in t

    def rhs(self, t, y):
        m = self.metric
        x = y[..., 0:3]
        pt = y[..., 3]
        p = y[..., 4:7]
        g = m.spatial(t, x)
        ginv = inv3x3_sym(g)
        out = np.empty_like(y)
        gp = np.einsum("...ij,...j->...i", ginv, p)
        out[..., 0:3] = -gp / pt[..., None]
        if m.time_dependent:
            dtg = m.spatial_dt(t, x)
            # d_t g^{ij} p_i p_j = -(g^-1 dt_g g^-1)_{ij} p_i p_j = -(gp)^T dt_g (gp)
            out[..., 3] = -0.5 * np.einsum("...i,...ij,...j->...", gp, dtg, gp) / pt
        else:
            out[..., 3] = 0.0
        dxg = m.spatial_dx(t, x)
        # d_k g^{ij} p_i p_j = -(gp)^T (d_k g) (gp)
        tmp = np.einsum("...kij,...j->...ki", dxg, gp)
        out[..., 4:7] = -0.5 * np.einsum("...ki,...i->...k", tmp, gp) / pt[..., None]
        return out

    def advance(self, t0, t1, y):
        n = max(1, int(np.ceil(abs(t1 - t0) / self.pace - 1e-12)))
        dt = (t1 - t0) / n
        t = t0
        for _ in range(n):
            k1 = self.rhs(t, y)
            k2 = self.rhs(t + dt / 2, y + dt / 2 * k1)
            k3 = self.rhs(t + dt / 2, y + dt / 2 * k2)
            k4 = self.rhs(t + dt, y + dt * k3)
            y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += dt
        return y


def _chord_distance(metric, t, X, n_quad=5):
    """Length of the straight segment 0 -> X in the slice metric g(t, .)."""
    nodes, weights = np.polynomial.legendre.leggauss(n_quad)
    s = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    acc = 0.0
    for sq, wq in zip(s, w):
        g = metric.spatial(t, sq * X)
        acc = acc + wq * np.sqrt(np.einsum("...ij,...i,...j->...", g, X, X))
    return acc


def _axis_fill(metric, t, X, ht, hx):
    """u = t + d_g(x) near the axis; gradient by central differences of the chord."""
    d0 = _chord_distance(metric, t, X)
    u = t + d0
    grad = np.empty(X.shape[:-1] + (4,))
    grad[..., 0] = 1.0 + (_chord_distance(metric, t + ht, X)
                          - _chord_distance(metric, t - ht, X)) / (2 * ht)
    for k in range(3):
        e = np.zeros(3)
        e[k] = hx
        grad[..., 1 + k] = (_chord_distance(metric, t, X + e)
                            - _chord_distance(metric, t, X - e)) / (2 * hx)
    return u, grad


class _SliceAssembler:
    """Fills one time slice of the grid from the active cone tables."""

    def __init__(self, grid: GridSpec, axis_radius: float):
        self.grid = grid
        self.axis_radius = axis_radius
        ax = grid.axis
        X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
        self.nodes = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
        self.r = np.linalg.norm(self.nodes, axis=-1)
        safe = np.where(self.r > 0, self.r, 1.0)
        self.theta = np.arccos(np.clip(self.nodes[:, 2] / safe, -1, 1))
        self.phi = np.mod(np.arctan2(self.nodes[:, 1], self.nodes[:, 0]), 2 * np.pi)
        self.axis_mask = self.r <= axis_radius
        self.far = ~self.axis_mask

    def angular_index(self, n_theta, n_phi, theta, phi):
        dth = np.pi / n_theta
        dph = 2 * np.pi / n_phi
        ft = theta / dth - 0.5 + 2.0   # +2 for padding offset
        fp = phi / dph + 2.0
        it = np.floor(ft).astype(np.int32)
        ip = np.floor(fp).astype(np.int32)
        return it, ft - it, ip, fp - ip

    @staticmethod
    def _bilinear_flat(flat_r, ThPh, Ph, vsel, it, wt, ip, wp):
        """Bilinear gather from a flattened (nv*Th*Ph,) radius table."""
        base = vsel * ThPh + it.astype(np.int64) * Ph + ip
        v00 = flat_r[base]
        v01 = flat_r[base + 1]
        v10 = flat_r[base + Ph]
        v11 = flat_r[base + Ph + 1]
        return (v00 * (1 - wt) * (1 - wp) + v01 * (1 - wt) * wp
                + v10 * wt * (1 - wp) + v11 * wt * wp)

    @staticmethod
    def _cubic_weights(frac):
        f = frac
        out = np.empty(f.shape + (4,))
        out[..., 0] = -f * (f - 1) * (f - 2) / 6
        out[..., 1] = (f * f - 1) * (f - 2) / 2
        out[..., 2] = -f * (f + 1) * (f - 2) / 2
        out[..., 3] = f * (f * f - 1) / 6
        return out

    def fill(self, metric, t, v_values, fields_pad, v_offset, warm):
        """Fill one slice; returns flat (u, grad, bracket) arrays.

        ``fields_pad`` is a padded cone table of shape (N, Th, Ph, 5) holding
        (radius, p_t, p_x, p_y, p_z) per launch direction, indexed on its first
        axis by local cone index + ``v_offset``; ``v_values`` are the optical
        values (vertex times) of the local cones, ascending.
        """
        grid = self.grid
        n3 = self.nodes.shape[0]
        u_out = np.empty(n3)
        grad_out = np.empty((n3, 4))

        # axis ball: chordal asymptote
        if np.any(self.axis_mask):
            Xa = self.nodes[self.axis_mask]
            ua, ga = _axis_fill(metric, t, Xa, ht=0.25 * grid.dt, hx=0.25 * grid.h)
            u_out[self.axis_mask] = ua
            grad_out[self.axis_mask] = ga

        far = self.far
        r = self.r[far]
        nv = len(v_values)
        _, Th, Ph, nf = fields_pad.shape
        n_theta, n_phi = Th - 4, Ph - 4
        it, wt, ip, wp = self.angular_index(n_theta, n_phi, self.theta[far], self.phi[far])
        r_flat = np.ascontiguousarray(fields_pad[..., 0]).ravel()
        ThPh = Th * Ph

        def radius_at(vsel):
            return self._bilinear_flat(r_flat, ThPh, Ph, vsel + v_offset, it, wt, ip, wp)

        r_bot = radius_at(np.zeros(r.shape[0], dtype=np.int64))
        r_top = radius_at(np.full(r.shape[0], nv - 1, dtype=np.int64))
        uncov_low = r_bot > r
        uncov_high = r_top <= r
        if np.any(uncov_low):
            idxs = np.where(far)[0][uncov_low][:5]
            raise CoverageError(
                f"{int(uncov_low.sum())} nodes at t={t:.4f} lie below the innermost cone "
                f"(first flat indices {idxs.tolist()}); increase vertices_per_unit_time")
        if np.any(uncov_high):
            idxs = np.where(far)[0][uncov_high][:5]
            raise CoverageError(
                f"{int(uncov_high.sum())} nodes at t={t:.4f} lie beyond the outermost cone "
                f"(first flat indices {idxs.tolist()}); extend the vertex ladder")
        lo = np.zeros(r.shape[0], dtype=np.int64)
        hi = np.full(r.shape[0], nv - 1, dtype=np.int64)
        if warm is not None:
            cand = np.clip(warm, 0, nv - 1)
            lo_c = np.clip(cand - 2, 0, nv - 1)
            hi_c = np.clip(cand + 3, 0, nv - 1)
            ok = (radius_at(lo_c) <= r) & (radius_at(hi_c) > r)
            lo = np.where(ok, lo_c, lo)
            hi = np.where(ok, hi_c, hi)
        # bisection on the shrinking unconverged subset
        max_iter = int(np.ceil(np.log2(max(nv, 2)))) + 2
        for _ in range(max_iter):
            act = np.where(hi - lo > 1)[0]
            if act.size == 0:
                break
            mid = (lo[act] + hi[act]) // 2
            rm = self._bilinear_flat(r_flat, ThPh, Ph, mid + v_offset,
                                     it[act], wt[act], ip[act], wp[act])
            take = rm <= r[act]
            lo[act] = np.where(take, mid, lo[act])
            hi[act] = np.where(take, hi[act], mid)

        base = np.clip(lo - 1, 0, nv - 4)
        n_far = r.shape[0]
        rs = np.empty((n_far, 4))
        us = np.empty((n_far, 4))
        ps = np.empty((n_far, 4, 4))
        # one flat-index gather of all five fields per stencil cone
        wth = self._cubic_weights(wt)
        wph = self._cubic_weights(wp)
        w16 = (wth[:, :, None] * wph[:, None, :]).reshape(n_far, 16).astype(np.float32)
        offs = (np.arange(4, dtype=np.int64)[:, None] * Ph
                + np.arange(4, dtype=np.int64)[None, :]).reshape(16)
        flat = fields_pad.reshape(-1, nf)
        angular = (it.astype(np.int64) - 1) * Ph + (ip - 1)
        for a in range(4):
            vsel = base + a
            corner = (vsel + v_offset) * (Th * Ph) + angular
            vals = flat[corner[:, None] + offs[None, :]]       # (n_far, 16, 5) float32
            out5 = np.einsum("nk,nkc->nc", w16, vals)
            rs[:, a] = out5[:, 0]
            ps[:, a, :] = out5[:, 1:]
            us[:, a] = v_values[vsel]
        if np.any(np.diff(rs, axis=1) <= 0):
            nbad = int(np.sum(np.any(np.diff(rs, axis=1) <= 0, axis=1)))
            raise CausticError(
                f"cone radii are not nested at t={t:.4f} for {nbad} nodes: "
                "crossing characteristics (caustic) detected")
        u_far = lagrange_nonuniform(rs, us, r)
        p_far = lagrange_nonuniform(rs, ps, r)
        u_out[far] = u_far
        grad_out[far] = -p_far
        return u_out, grad_out, (base + 1)


def _vertex_momenta(metric, t_v, dirs_flat):
    """Initial spatial momenta p_i = g_ij d^j with d metric-normalized at the vertex."""
    g0 = metric.spatial(t_v, np.zeros(3))
    nrm = np.sqrt(np.einsum("ni,ij,nj->n", dirs_flat, g0, dirs_flat))
    d = dirs_flat / nrm[:, None]
    return d @ g0.T


def _march_master(metric, dirs_flat, n_theta, n_phi, dv, n_elapsed, pace):
    """Single cone bundle for time-independent metrics.

    Cones from all vertices are time translates of one another, so one bundle
    launched at t = 0 and recorded at every elapsed multiple of dv supplies the
    full cone family.  Returns (x, p) records of shape (n_elapsed+1, nt, np, .).
    """
    ndir = dirs_flat.shape[0]
    y = np.empty((ndir, 7))
    y[:, 0:3] = 0.0
    y[:, 3] = -1.0
    y[:, 4:7] = _vertex_momenta(metric, 0.0, dirs_flat)
    marcher = _RK4Marcher(metric, pace)
    rec_x = np.empty((n_elapsed + 1, n_theta, n_phi, 3))
    rec_p = np.empty((n_elapsed + 1, n_theta, n_phi, 4))

    def record(e, ys):
        rec_x[e] = ys[:, 0:3].reshape(n_theta, n_phi, 3)
        rec_p[e] = np.concatenate([ys[:, 3:4], ys[:, 4:7]], axis=-1).reshape(n_theta, n_phi, 4)

    record(0, y)
    for e in range(1, n_elapsed + 1):
        y = marcher.advance(-(e - 1) * dv, -e * dv, y)
        if not np.all(metric.in_domain(-e * dv, y[:, 0:3])):
            raise DomainError("cone bundle left the metric domain during construction")
        record(e, y)
    ginv = inv3x3_sym(metric.spatial(0.0, rec_x.reshape(-1, 3)))
    pf = rec_p.reshape(-1, 4)
    drift = float(np.abs(0.5 * (-pf[:, 0] ** 2 + np.einsum(
        "...ij,...i,...j->...", ginv, pf[:, 1:], pf[:, 1:]))).max())
    return rec_x, rec_p, drift


def build_optical_function(metric, grid: GridSpec, rays_per_vertex: int = 1152,
                           vertices_per_unit_time: int = 64, substeps: int = 2,
                           tol_eik: float = 5e-3, axis_cells: float = 2.0,
                           drift_tol: float = 1e-5, validate: bool = True) -> OpticalField:
    """Construct the optical field on the grid by marching cone bundles in time.

    For time-independent metrics a single master cone is integrated once (all
    cones are its time translates); otherwise every vertex bundle is marched
    down across the slices, dropping cones once they leave the box.  Raises
    CoverageError, CausticError or AccuracyError when construction contracts
    cannot be met.
    """
    n_theta = max(6, int(round(np.sqrt(rays_per_vertex / 2))))
    n_phi = 2 * n_theta
    _, _, dirs = _directions(n_theta, n_phi)
    dirs_flat = dirs.reshape(-1, 3)
    ndir = dirs_flat.shape[0]

    r_max = np.sqrt(3) * grid.half_width
    region = metric_mod.Region(grid.t_min, 2.5 * r_max, grid.half_width)
    c_low, c_high = metric_mod.ellipticity_bounds(metric, region, 200, seed=7)
    # vertex spacing divides the slice spacing so that elapsed times stay on
    # one ladder for the master-cone path
    q = max(1, int(np.ceil(vertices_per_unit_time * grid.dt)))
    dv = grid.dt / q
    axis_radius = axis_cells * grid.h
    if dv * np.sqrt(c_high) > 0.9 * axis_radius:
        raise ValidationError(
            "vertex ladder too sparse for the axis fill radius: increase "
            "vertices_per_unit_time or coarsen the grid")
    span_max = 1.05 * r_max / np.sqrt(c_low) + 3 * dv
    # the master ladder must also reach the vertex-0 cone at the bottom slice
    n_elapsed = int(np.ceil(max(span_max, -grid.t_min) / dv)) + 1
    pace = grid.dt / substeps

    assembler = _SliceAssembler(grid, axis_radius)
    U = np.empty((grid.n_t, grid.n, grid.n, grid.n))
    GRAD = np.empty((grid.n_t, grid.n, grid.n, grid.n, 4))
    mantle_x = np.empty((grid.n_t, n_theta, n_phi, 3))
    mantle_p = np.empty((grid.n_t, n_theta, n_phi, 4))
    warm = None

    if not metric.time_dependent:
        rec_x, rec_p, max_drift = _march_master(
            metric, dirs_flat, n_theta, n_phi, dv, n_elapsed, pace)
        rec_x = _antipodal(rec_x)
        rec_p = _antipodal(rec_p)
        fields_pad = _pad_sphere(np.concatenate(
            [np.linalg.norm(rec_x, axis=-1)[..., None], rec_p],
            axis=-1).astype(np.float32))
        # slice k uses cones at elapsed indices 1..n_elapsed (local i -> i+1)
        for k in range(grid.n_t - 1, -1, -1):
            t_k = grid.slice_times[k]
            v_values = t_k + dv * np.arange(1, n_elapsed + 1)
            u_flat, grad_flat, bracket = assembler.fill(
                metric, t_k, v_values, fields_pad, 1, warm)
            warm = bracket + q       # same optical value sits q cones higher one slice down
            U[k] = u_flat.reshape(grid.n, grid.n, grid.n)
            GRAD[k] = grad_flat.reshape(grid.n, grid.n, grid.n, 4)
            e0 = (grid.n_t - k) * q  # elapsed index of the vertex-0 cone at t_k
            mantle_x[k] = rec_x[e0]
            mantle_p[k] = rec_p[e0]
    else:
        max_drift = 0.0
        t_top = grid.slice_times[-1]
        j_max = int(np.ceil((t_top + span_max) / dv))
        j_min = int(np.floor(grid.t_min / dv)) + 1
        n_above = max(1, int(np.ceil((j_max * dv - t_top) / grid.dt)))
        checkpoints = np.concatenate([
            t_top + grid.dt * np.arange(n_above, 0, -1), grid.slice_times[::-1]])
        state = np.empty(((j_max - j_min + 1) * ndir, 7))
        j_hi = None          # highest live vertex index (in units of dv)
        j_lo = None

        def row_of(j):
            return (j_max - j) * ndir

        marcher = _RK4Marcher(metric, pace)

        def activate(j, t_to):
            rows = slice(row_of(j), row_of(j) + ndir)
            state[rows, 0:3] = 0.0
            state[rows, 3] = -1.0
            state[rows, 4:7] = _vertex_momenta(metric, j * dv, dirs_flat)
            if j * dv > t_to + 1e-14:
                state[rows] = marcher.advance(j * dv, t_to, state[rows])

        prev = checkpoints[0]
        for pos in range(1, len(checkpoints)):
            c = checkpoints[pos]
            if j_hi is not None:
                rows = slice(row_of(j_hi), row_of(j_lo) + ndir)
                state[rows] = marcher.advance(prev, c, state[rows])
            new_hi = min(j_max, int(np.floor(prev / dv + 1e-9)))
            new_lo = max(j_min, int(np.floor(c / dv + 1e-9)) + 1)
            for j in range(new_hi, new_lo - 1, -1):
                if j_hi is None:
                    j_hi = j
                activate(j, c)
                j_lo = j
            prev = c
            k = pos - n_above
            if k < 0:
                continue
            k = grid.n_t - 1 - k
            nv = j_hi - j_lo + 1
            rows = slice(row_of(j_hi), row_of(j_lo) + ndir)
            ys = state[rows].reshape(nv, n_theta, n_phi, 7)[::-1]  # ascending vertex
            xs = _antipodal(np.ascontiguousarray(ys[..., 0:3]))
            ps = _antipodal(np.concatenate([ys[..., 3:4], ys[..., 4:7]], axis=-1))
            rtab = np.linalg.norm(xs, axis=-1)
            ginv = inv3x3_sym(metric.spatial(c, xs))
            drift = np.abs(0.5 * (-ps[..., 0] ** 2 + np.einsum(
                "...ij,...i,...j->...", ginv, ps[..., 1:], ps[..., 1:]))).max()
            max_drift = max(max_drift, float(drift))
            # drop cones that have fully left the box (keep stencil headroom
            # and never drop the mantle cone at vertex 0)
            min_r = rtab.reshape(nv, -1).min(axis=1)
            keep = nv
            while keep > 8 and min_r[keep - 1] > 1.15 * r_max and j_lo + keep - 1 > 0:
                keep -= 1
            if keep < nv:
                j_hi = j_lo + keep - 1
                xs, ps, rtab = xs[:keep], ps[:keep], rtab[:keep]
            v_values = dv * np.arange(j_lo, j_hi + 1)
            fields_pad = _pad_sphere(
                np.concatenate([rtab[..., None], ps], axis=-1).astype(np.float32))
            warm_local = None if warm is None else warm - j_lo
            u_flat, grad_flat, bracket = assembler.fill(
                metric, c, v_values, fields_pad, 0, warm_local)
            warm = bracket + j_lo
            U[k] = u_flat.reshape(grid.n, grid.n, grid.n)
            GRAD[k] = grad_flat.reshape(grid.n, grid.n, grid.n, 4)
            rows0 = slice(row_of(0), row_of(0) + ndir)
            mantle_x[k] = state[rows0, 0:3].reshape(n_theta, n_phi, 3)
            mantle_p[k] = np.concatenate(
                [state[rows0, 3:4], state[rows0, 4:7]], axis=-1).reshape(n_theta, n_phi, 4)

    if max_drift > drift_tol:
        raise AccuracyError(
            f"ray-bundle null drift {max_drift:.3e} exceeds {drift_tol:.1e}; increase substeps")

    mantle = MantleBundle(times=grid.slice_times.copy(), x=mantle_x, p=mantle_p)
    stats = {
        "n_theta": n_theta, "n_phi": n_phi, "vertex_spacing": dv,
        "max_drift": max_drift, "c_low": c_low, "c_high": c_high,
        "sup_grad": float(np.abs(GRAD).max()),
    }
    fld = OpticalField(grid, U, GRAD, mantle, axis_radius, stats)
    bounds = cone_bounds(fld)
    fld.stats.update(bounds)
    if validate:
        _, sup = eikonal_residual(metric, fld)
        fld.stats["residual_sup"] = sup
        if sup > tol_eik:
            raise AccuracyError(
                f"eikonal residual {sup:.3e} exceeds tol_eik={tol_eik:.1e} "
                "(increase rays_per_vertex or vertices_per_unit_time)")
        if bounds["delta_fit"] <= 0:
            raise AccuracyError("fitted inner-cone slope delta is not positive")
    return fld


# ---------------------------------------------------------------------------
# diagnostics on a built field
# ---------------------------------------------------------------------------

def _interior_mask(field: OpticalField):
    """Cone-interior nodes excluding the axis ball, per slice: (n_t, n, n, n)."""
    g = field.grid
    ax = g.axis
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    r = np.sqrt(X**2 + Y**2 + Z**2)
    inside = field.u <= 0.0
    return inside & (r > field.axis_radius), r


def eikonal_residual(metric, field: OpticalField):
    """|g^{ij} d_i u d_j u - (d_t u)^2| per node, and its sup over the cone interior."""
    g = field.grid
    res = np.empty_like(field.u)
    nodes = _SliceAssembler(g, field.axis_radius).nodes
    for k, t in enumerate(g.slice_times):
        ginv = np.linalg.inv(metric.spatial(t, nodes))
        gr = field.grad[k].reshape(-1, 4)
        quad = np.einsum("...ij,...i,...j->...", ginv, gr[:, 1:], gr[:, 1:])
        res[k] = np.abs(quad - gr[:, 0] ** 2).reshape(g.n, g.n, g.n)
    mask, _ = _interior_mask(field)
    sup = float(res[mask].max()) if np.any(mask) else 0.0
    return res, sup


def cone_membership(field: OpticalField, t, x, tol_band=None):
    """Classify points as 'inside' / 'boundary' / 'outside' by the sign of u."""
    if tol_band is None:
        tol_band = np.sqrt(3) * field.grid.h
    u = field.interp_u(t, x)
    out = np.where(np.abs(u) <= tol_band, "boundary",
                   np.where(u < 0, "inside", "outside"))
    return out if out.ndim else str(out)


def cone_bounds(field: OpticalField) -> dict:
    """Fitted inner-slope delta and the |u| <= C|t|, |2t-u| <= C|t| constants."""
    mask, r = _interior_mask(field)
    g = field.grid
    tgrid = g.slice_times[:, None, None, None]
    tb = np.broadcast_to(tgrid, field.u.shape)
    u = field.u[mask]
    t = tb[mask]
    rr = np.broadcast_to(r, mask.shape)[mask]
    delta = float(((u - t) / rr).min()) if u.size else np.nan
    c_u = float((np.abs(u) / np.abs(t)).max()) if u.size else np.nan
    c_conj = float((np.abs(2 * t - u) / np.abs(t)).max()) if u.size else np.nan
    return {"delta_fit": delta, "c_u": c_u, "c_uconj": c_conj}


@dataclass
class MantleQuadrature:
    """Quadrature on the {u = 0} mantle between two times.

    ``w_nu`` are weights for the induced Lebesgue measure of the 3-surface;
    multiply by ``sqrt_g`` for the metric surface element.  ``norm_metric`` and
    ``norm_sum`` are the two readings of the gradient normalization factor.
    """

    t: np.ndarray          # (nq,)
    x: np.ndarray          # (nq, 3)
    w_nu: np.ndarray       # (nq,)
    grad_u: np.ndarray     # (nq, 4)
    m: np.ndarray          # (nq,)
    sqrt_g: np.ndarray     # (nq,)
    norm_metric: np.ndarray
    norm_sum: np.ndarray


def mantle_sample(field: OpticalField, metric, s: float, t_upper: float) -> MantleQuadrature:
    """Build mantle quadrature nodes/weights from the vertex-0 ray bundle.

    Trapezoid in time over the recorded slices in [s, t_upper]; angular weights
    come from the Gram determinant of the ray parameterization (midpoint in the
    polar angle, periodic trapezoid in azimuth).
    """
    if not s < t_upper <= 0:
        raise ValidationError("mantle span requires s < t_upper <= 0")
    mb = field.mantle
    sel = np.where((mb.times >= s - 1e-12) & (mb.times <= t_upper + 1e-12))[0]
    if sel.size < 2:
        raise ValidationError("mantle span contains fewer than two recorded slices")
    times = mb.times[sel]
    nt_, n_theta, n_phi, _ = mb.x[sel].shape
    X = mb.x[sel]
    P = mb.p[sel]
    dth = np.pi / n_theta
    dph = 2 * np.pi / n_phi
    # surface tangents of (t, x(t, theta, phi))
    dxdt = np.gradient(X, mb.times[sel], axis=0)
    Xp = _pad_sphere(X.reshape(nt_, n_theta, n_phi, 3))
    dxdth = (Xp[:, 3:-1, 2:-2, :] - Xp[:, 1:-3, 2:-2, :]) / (2 * dth)
    dxdph = (Xp[:, 2:-2, 3:-1, :] - Xp[:, 2:-2, 1:-3, :]) / (2 * dph)
    e_t = np.concatenate([np.ones(X.shape[:-1] + (1,)), dxdt], axis=-1)
    e_a = np.concatenate([np.zeros(X.shape[:-1] + (1,)), dxdth], axis=-1)
    e_b = np.concatenate([np.zeros(X.shape[:-1] + (1,)), dxdph], axis=-1)
    G = np.empty(X.shape[:-1] + (3, 3))
    for i, u_ in enumerate((e_t, e_a, e_b)):
        for j, v_ in enumerate((e_t, e_a, e_b)):
            G[..., i, j] = np.einsum("...k,...k->...", u_, v_)
    gram = np.sqrt(np.maximum(np.linalg.det(G), 0.0))
    w_t = np.full(nt_, 1.0)
    w_t[0] = w_t[-1] = 0.5
    w = gram * w_t[:, None, None] * dth * dph * (times[1] - times[0])
    tq = np.broadcast_to(times[:, None, None], X.shape[:-1])
    g = metric.spatial(tq.ravel(), X.reshape(-1, 3))
    sqrt_g = np.sqrt(np.linalg.det(g))
    ginv = np.linalg.inv(g)
    grad = -P.reshape(-1, 4)
    quad_metric = np.einsum("...ij,...i,...j->...", ginv, grad[:, 1:], grad[:, 1:])
    norm_metric = np.sqrt(grad[:, 0] ** 2 + quad_metric)
    norm_sum = np.sqrt(grad[:, 0] ** 2 + np.sum(grad[:, 1:] ** 2, axis=-1))
    if np.any(w < -1e-12):
        raise ValidationError("negative mantle quadrature weight")
    return MantleQuadrature(
        t=np.asarray(tq).ravel().copy(), x=X.reshape(-1, 3).copy(), w_nu=w.ravel(),
        grad_u=grad, m=1.0 / grad[:, 0], sqrt_g=sqrt_g,
        norm_metric=norm_metric, norm_sum=norm_sum)


def export_residual_csv(metric, field: OpticalField, path):
    """Per-slice residual statistics (schema-tagged CSV)."""
    res, sup = eikonal_residual(metric, field)
    mask, _ = _interior_mask(field)
    with open(path, "w") as fh:
        fh.write("# schema=conewave.eikonal_residual.v1\n")
        fh.write("t,residual_max,residual_mean,n_interior\n")
        for k, t in enumerate(field.grid.slice_times):
            mk = mask[k]
            if np.any(mk):
                fh.write(f"{t:.17g},{res[k][mk].max():.17g},{res[k][mk].mean():.17g},{int(mk.sum())}\n")
            else:
                fh.write(f"{t:.17g},nan,nan,0\n")
    return sup
