"""Evaluable split spacetime metrics g = -dt^2 + g_ij(t,x) dx^i dx^j.

Built-in families (flat, constant-curvature spatial slices, conformally
time-scaled slices, compactly supported perturbations, exterior radial
black-hole slice) plus gridded user metrics.  Every family is vectorized:
spatial points have shape (..., 3) and results broadcast accordingly.

Index convention for 4-dimensional objects: index 0 is time, 1..3 spatial.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import brentq

from .errors import DegeneracyError, DomainError, ValidationError

__all__ = [
    "Region",
    "SplitMetric",
    "MetricSample",
    "CurvatureSample",
    "minkowski",
    "space_form",
    "conformal_space_form",
    "compact_perturbation",
    "schwarzschild_radial",
    "metric_from_grid",
    "metric_from_csv",
    "metric_from_binary",
    "save_grid_metric",
    "evaluate",
    "ellipticity_bounds",
    "curvature",
    "christoffel",
    "riemann",
    "sectional_curvature",
    "tidal_matrix",
    "tortoise",
    "inverse_tortoise",
    "schwarzschild_line_element",
    "eliminate_cross_terms",
    "CrossTermTransform",
]


@dataclass(frozen=True)
class Region:
    """Space-time box: t in [t_min, t_max], x in the cube [-half_width, half_width]^3."""

    t_min: float
    t_max: float
    half_width: float

    def contains(self, t, x):
        t = np.asarray(t)
        x = np.asarray(x)
        inside_t = (t >= self.t_min) & (t <= self.t_max)
        inside_x = np.all(np.abs(x) <= self.half_width, axis=-1)
        return inside_t & inside_x


@dataclass(frozen=True)
class SplitMetric:
    """Spatial block of a split Lorentzian metric with optional analytic derivatives.

    ``g`` maps (t, x) -> (..., 3, 3); ``dt_g`` and ``dx_g`` (shape (..., 3, 3, 3),
    leading derivative index) may be None, in which case central differences
    with step ``fd_step`` are used.
    """

    family: str
    params: dict
    g: Callable
    dt_g: Callable | None = None
    dx_g: Callable | None = None
    domain: Callable | None = None
    fd_step: float = 1e-4
    time_dependent: bool = True

    @property
    def analytic_derivatives(self) -> bool:
        return self.dt_g is not None and self.dx_g is not None

    def in_domain(self, t, x):
        if self.domain is None:
            return np.ones(np.broadcast(np.asarray(t), np.asarray(x)[..., 0]).shape, dtype=bool)
        return self.domain(t, x)

    def check_domain(self, t, x):
        ok = self.in_domain(t, x)
        if not np.all(ok):
            bad = np.argwhere(~np.atleast_1d(ok))
            xa = np.broadcast_to(np.asarray(x, dtype=float), np.shape(ok) + (3,))
            pt = xa[tuple(bad[0])] if bad.size else None
            raise DomainError(
                f"point outside domain of metric family '{self.family}' (first offender x={pt}, t={t})"
            )

    def spatial(self, t, x):
        return self.g(t, np.asarray(x, dtype=float))

    def spatial_dt(self, t, x):
        x = np.asarray(x, dtype=float)
        if not self.time_dependent:
            return np.zeros(np.shape(self.g(t, x)))
        if self.dt_g is not None:
            return self.dt_g(t, x)
        h = self.fd_step
        return (-self.g(t + 2 * h, x) + 8 * self.g(t + h, x)
                - 8 * self.g(t - h, x) + self.g(t - 2 * h, x)) / (12 * h)

    def spatial_dx(self, t, x):
        x = np.asarray(x, dtype=float)
        if self.dx_g is not None:
            return self.dx_g(t, x)
        h = self.fd_step
        out = np.empty(x.shape[:-1] + (3, 3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            out[..., k, :, :] = (-self.g(t, x + 2 * e) + 8 * self.g(t, x + e)
                                 - 8 * self.g(t, x - e) + self.g(t, x - 2 * e)) / (12 * h)
        return out

    def inverse(self, t, x):
        return np.linalg.inv(self.spatial(t, x))


@dataclass
class MetricSample:
    """Pointwise metric data: spatial block, inverse, first derivatives, extrinsic curvature."""

    t: np.ndarray
    x: np.ndarray
    g: np.ndarray
    g_inv: np.ndarray
    dt_g: np.ndarray
    dx_g: np.ndarray
    det_abs: np.ndarray
    k: np.ndarray  # second fundamental form of the time slice, -1/2 dt_g

    @property
    def sqrt_det(self):
        return np.sqrt(self.det_abs)

    def validate(self, inverse_tol=1e-12):
        if not np.allclose(self.g, np.swapaxes(self.g, -1, -2), rtol=0, atol=1e-14):
            raise ValidationError("metric sample is not symmetric")
        if np.any(self.det_abs <= 0):
            raise ValidationError("metric sample has non-positive determinant")
        eye = np.eye(3)
        resid = np.abs(self.g_inv @ self.g - eye).max()
        scale = max(1.0, float(np.abs(self.g_inv).max()))
        if resid > inverse_tol * scale:
            raise ValidationError(f"inverse verification failed: residual {resid:.3e}")


def evaluate(metric: SplitMetric, t, x) -> MetricSample:
    """Sample the metric at (t, x); raises DomainError outside the declared domain."""
    x = np.asarray(x, dtype=float)
    metric.check_domain(t, x)
    g = metric.spatial(t, x)
    dt_g = metric.spatial_dt(t, x)
    dx_g = metric.spatial_dx(t, x)
    g_inv = np.linalg.inv(g)
    det = np.linalg.det(g)
    sample = MetricSample(t=np.asarray(t, dtype=float), x=x, g=g, g_inv=g_inv,
                          dt_g=dt_g, dx_g=dx_g, det_abs=np.abs(det), k=-0.5 * dt_g)
    sample.validate()
    return sample


def ellipticity_bounds(metric: SplitMetric, region: Region, n_samples: int, seed: int = 0):
    """(C_low, C_high): extreme eigenvalues of the inverse spatial block over sampled points.

    Sampling is uniform (seeded) over the region; a non-positive eigenvalue
    raises ValidationError naming the offending point.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    ts = rng.uniform(region.t_min, region.t_max, size=n_samples)
    xs = rng.uniform(-region.half_width, region.half_width, size=(n_samples, 3))
    ok = metric.in_domain(ts, xs)
    ts, xs = ts[ok], xs[ok]
    if ts.size == 0:
        raise DomainError("no sample points fall inside the metric domain")
    ginv = np.linalg.inv(metric.spatial(ts, xs))
    ev = np.linalg.eigvalsh(ginv)
    lo = ev[..., 0]
    i = int(np.argmin(lo))
    if lo[i] <= 0:
        raise ValidationError(
            f"inverse metric not positive definite at t={ts[i]:.6g}, x={xs[i]} "
            f"(eigenvalue {lo[i]:.3e})")
    return float(lo.min()), float(ev[..., 1:].max())


# ---------------------------------------------------------------------------
# built-in families
# ---------------------------------------------------------------------------

def minkowski() -> SplitMetric:
    def g(t, x):
        shp = np.shape(x)[:-1]
        return np.broadcast_to(np.eye(3), shp + (3, 3)).copy()

    def zero3(t, x):
        return np.zeros(np.shape(x)[:-1] + (3, 3))

    def zero33(t, x):
        return np.zeros(np.shape(x)[:-1] + (3, 3, 3))

    return SplitMetric("minkowski", {}, g, zero3, zero33, time_dependent=False)


def _radial_profile(c: float, sign: int, rho: np.ndarray):
    """w = f(rho)^2/rho^2 and dw/drho for the constant-curvature radial chart.

    f = sin(a rho)/a (sign +) or sinh(a rho)/a (sign -), a = sqrt(c).  Series
    fallback near the axis avoids cancellation.
    """
    a = np.sqrt(c)
    u = a * rho
    small = u < 1e-3
    us = np.where(small, u, 1.0)
    if sign > 0:
        w_closed = np.sinc(u / np.pi) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            dw_closed = a * np.where(
                small, 0.0,
                (u * np.sin(2 * u) - 2 * np.sin(u) ** 2) / np.where(small, 1.0, u) ** 3)
        w_series = 1 - us**2 / 3 + 2 * us**4 / 45
        dw_series = a * (-2 * us / 3 + 8 * us**3 / 45)
    else:
        with np.errstate(over="ignore"):
            sh = np.sinh(np.where(small, 0.5, u))
        w_closed = np.where(small, 1.0, (sh / np.where(small, 1.0, u)) ** 2)
        with np.errstate(over="ignore"):
            dw_closed = a * np.where(
                small, 0.0,
                (u * np.sinh(2 * np.where(small, 0.5, u)) - 2 * sh**2)
                / np.where(small, 1.0, u) ** 3)
        w_series = 1 + us**2 / 3 + 2 * us**4 / 45
        dw_series = a * (2 * us / 3 + 8 * us**3 / 45)
    w = np.where(small, w_series, w_closed)
    dw = np.where(small, dw_series, dw_closed)
    return w, dw


def space_form(c: float = 1.0, sign: int = +1) -> SplitMetric:
    """Time-independent metric with constant spatial sectional curvature sign*c.

    Cartesian chart of d rho^2 + (f(rho)^2) d omega^2; the positive-curvature
    chart is restricted to rho < pi/(2 sqrt(c)) to stay away from the conjugate
    locus of the radial chart.
    """
    if c <= 0:
        raise ValidationError("space_form requires c > 0")
    a = np.sqrt(c)

    def _nP(x):
        rho = np.linalg.norm(x, axis=-1)
        safe = np.where(rho > 0, rho, 1.0)
        n = x / safe[..., None]
        nn = n[..., :, None] * n[..., None, :]
        P = np.eye(3) - nn
        return rho, n, nn, P

    def g(t, x):
        rho, n, nn, P = _nP(x)
        w, _ = _radial_profile(c, sign, rho)
        return w[..., None, None] * P + nn

    def dt_g(t, x):
        return np.zeros(np.shape(x)[:-1] + (3, 3))

    def dx_g(t, x):
        rho, n, nn, P = _nP(x)
        w, dw = _radial_profile(c, sign, rho)
        # q = (1 - w)/rho is regular at the axis; series for small a*rho
        u = a * rho
        small = u < 1e-3
        with np.errstate(divide="ignore", invalid="ignore"):
            q_closed = np.where(small, 0.0, (1.0 - w) / np.where(rho > 0, rho, 1.0))
        if sign > 0:
            q_series = (c * rho / 3) * (1 - 2 * u**2 / 15)
        else:
            q_series = -(c * rho / 3) * (1 + 2 * u**2 / 15)
        q = np.where(small, q_series, q_closed)
        # d_k g_ij = w' n_k P_ij + q (P_ik n_j + n_i P_kj)
        out = (np.einsum("...,...k,...ij->...kij", dw, n, P)
               + np.einsum("...,...ik,...j->...kij", q, P, n)
               + np.einsum("...,...i,...kj->...kij", q, n, P))
        return out

    def dom(t, x):
        rho = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
        if sign > 0:
            return rho < 0.999 * np.pi / (2 * a)
        return np.ones_like(rho, dtype=bool)

    return SplitMetric(f"space_form({c:+g},{'+' if sign > 0 else '-'})",
                       {"c": c, "sign": sign}, g, dt_g, dx_g, domain=dom,
                       time_dependent=False)


def conformal_space_form(c: float = 1.0, sign: int = +1) -> SplitMetric:
    """Space form spatial block scaled by exp(sign*c*t^2); time-dependent."""
    base = space_form(c, sign)
    s = 1.0 if sign > 0 else -1.0

    def fac(t):
        return np.exp(s * c * np.asarray(t, dtype=float) ** 2)

    def g(t, x):
        f = fac(t)
        return np.asarray(f)[..., None, None] * base.g(t, x) if np.ndim(f) else f * base.g(t, x)

    def dt_g(t, x):
        f = fac(t)
        df = 2 * s * c * np.asarray(t, dtype=float) * f
        gs = base.g(t, x)
        return (np.asarray(df)[..., None, None] * gs) if np.ndim(df) else df * gs

    def dx_g(t, x):
        f = fac(t)
        d = base.dx_g(t, x)
        return (np.asarray(f)[..., None, None, None] * d) if np.ndim(f) else f * d

    return SplitMetric(f"conformal_space_form({c:+g},{'+' if sign > 0 else '-'})",
                       {"c": c, "sign": sign}, g, dt_g, dx_g, domain=base.domain,
                       time_dependent=True)


def _bump(q):
    """C-infinity bump supported in |q| < 1, normalized to 1 at the origin."""
    q = np.asarray(q, dtype=float)
    inside = np.abs(q) < 1.0
    qq = np.where(inside, q, 0.0)
    with np.errstate(divide="ignore", over="ignore"):
        val = np.exp(1.0 - 1.0 / (1.0 - qq * qq))
    return np.where(inside, val, 0.0)


def _bump_prime(q):
    q = np.asarray(q, dtype=float)
    inside = np.abs(q) < 1.0
    qq = np.where(inside, q, 0.0)
    b = _bump(qq)
    return np.where(inside, b * (-2.0 * qq) / (1.0 - qq * qq) ** 2, 0.0)


_PERT_DIAG = 0.55
_PERT_OFF = 0.17


def _pert_shape(x):
    """Fixed smooth symmetric direction field with spectral norm <= 0.89 (Gershgorin)."""
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    s = np.zeros(x.shape[:-1] + (3, 3))
    s[..., 0, 0] = _PERT_DIAG * np.sin(x1) * np.cos(x2)
    s[..., 1, 1] = _PERT_DIAG * np.sin(x2) * np.cos(x3)
    s[..., 2, 2] = _PERT_DIAG * np.sin(x3) * np.cos(x1)
    s[..., 0, 1] = s[..., 1, 0] = _PERT_OFF * np.cos(x1 + x2)
    s[..., 0, 2] = s[..., 2, 0] = _PERT_OFF * np.sin(x1 - x3)
    s[..., 1, 2] = s[..., 2, 1] = _PERT_OFF * np.cos(x2 + x3)
    return s


def _pert_shape_dx(x):
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    d = np.zeros(x.shape[:-1] + (3, 3, 3))
    c, sn = np.cos, np.sin
    # k = 0
    d[..., 0, 0, 0] = _PERT_DIAG * c(x1) * c(x2)
    d[..., 0, 2, 2] = -_PERT_DIAG * sn(x3) * sn(x1)
    d[..., 0, 0, 1] = d[..., 0, 1, 0] = -_PERT_OFF * sn(x1 + x2)
    d[..., 0, 0, 2] = d[..., 0, 2, 0] = _PERT_OFF * c(x1 - x3)
    # k = 1
    d[..., 1, 0, 0] = -_PERT_DIAG * sn(x1) * sn(x2)
    d[..., 1, 1, 1] = _PERT_DIAG * c(x2) * c(x3)
    d[..., 1, 0, 1] = d[..., 1, 1, 0] = -_PERT_OFF * sn(x1 + x2)
    d[..., 1, 1, 2] = d[..., 1, 2, 1] = -_PERT_OFF * sn(x2 + x3)
    # k = 2
    d[..., 2, 1, 1] = -_PERT_DIAG * sn(x2) * sn(x3)
    d[..., 2, 2, 2] = _PERT_DIAG * c(x3) * c(x1)
    d[..., 2, 0, 2] = d[..., 2, 2, 0] = -_PERT_OFF * c(x1 - x3)
    d[..., 2, 1, 2] = d[..., 2, 2, 1] = -_PERT_OFF * sn(x2 + x3)
    return d


def compact_perturbation(eps: float = 0.05, radius: float = 1.0, omega: float = 3.0,
                         phase: float = 0.0, static: bool = False) -> SplitMetric:
    """delta_ij plus a compactly supported smooth perturbation.

    g = I + eps * bump(|x|/radius) * tau(t) * s(x) with tau = sin(omega t + phase)
    (or 1 when static).  With phase = 0 the slice at t = 0 is exactly flat, so
    near-vertex equivalences degrade linearly in |t|.  eps <= 0.11 keeps the
    inverse-metric eigenvalues inside [0.9, 1.1].
    """
    if eps < 0 or eps * 0.9 >= 1.0:
        raise ValidationError("perturbation amplitude too large for uniform ellipticity")

    def tau(t):
        if static:
            return np.ones(np.shape(t)) if np.ndim(t) else 1.0
        return np.sin(omega * np.asarray(t, dtype=float) + phase)

    def dtau(t):
        if static:
            return np.zeros(np.shape(t)) if np.ndim(t) else 0.0
        return omega * np.cos(omega * np.asarray(t, dtype=float) + phase)

    def g(t, x):
        r = np.linalg.norm(x, axis=-1)
        amp = eps * _bump(r / radius) * tau(t)
        return np.eye(3) + np.asarray(amp)[..., None, None] * _pert_shape(x)

    def dt_g(t, x):
        r = np.linalg.norm(x, axis=-1)
        amp = eps * _bump(r / radius) * dtau(t)
        return np.asarray(amp)[..., None, None] * _pert_shape(x)

    def dx_g(t, x):
        r = np.linalg.norm(x, axis=-1)
        safe = np.where(r > 0, r, 1.0)
        n = x / safe[..., None]
        b = _bump(r / radius)
        db = np.where(r > 0, _bump_prime(r / radius) / radius, 0.0)
        tt = np.asarray(tau(t))
        s = _pert_shape(x)
        ds = _pert_shape_dx(x)
        term1 = (eps * db * tt)[..., None, None, None] * n[..., :, None, None] * s[..., None, :, :]
        term2 = (eps * b * tt)[..., None, None, None] * ds
        return term1 + term2

    return SplitMetric("compact_perturbation",
                       {"eps": eps, "radius": radius, "omega": omega,
                        "phase": phase, "static": static},
                       g, dt_g, dx_g, time_dependent=not static)


def schwarzschild_radial(mass: float = 1.0) -> SplitMetric:
    """Exterior constant-time slice delta_ij + (2M/(r-2M)) n_i n_j with unit lapse.

    Used for geometry studies and the radial 1+1 reduction; valid for r > 2M.
    """
    M = float(mass)

    def _nr(x):
        r = np.linalg.norm(x, axis=-1)
        safe = np.where(r > 0, r, 1.0)
        n = x / safe[..., None]
        return r, n

    def g(t, x):
        r, n = _nr(x)
        b = 2 * M / (r - 2 * M)
        return np.eye(3) + np.asarray(b)[..., None, None] * n[..., :, None] * n[..., None, :]

    def dt_g(t, x):
        return np.zeros(np.shape(x)[:-1] + (3, 3))

    def dx_g(t, x):
        r, n = _nr(x)
        b = 2 * M / (r - 2 * M)
        db = -2 * M / (r - 2 * M) ** 2
        nn = n[..., :, None] * n[..., None, :]
        P = np.eye(3) - nn
        q = b / np.where(r > 0, r, 1.0)
        # d_k g_ij = b' n_k n_i n_j + q (P_ik n_j + n_i P_kj)
        return (np.einsum("...,...k,...ij->...kij", db, n, nn)
                + np.einsum("...,...ik,...j->...kij", q, P, n)
                + np.einsum("...,...i,...kj->...kij", q, n, P))

    def dom(t, x):
        r = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
        return r > 2 * M

    return SplitMetric(f"schwarzschild_radial(M={M:g})", {"mass": M}, g, dt_g, dx_g,
                       domain=dom, time_dependent=False)


# ---------------------------------------------------------------------------
# gridded user metrics
# ---------------------------------------------------------------------------

_SYM6 = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def metric_from_grid(t_axis, x_axis, y_axis, z_axis, values) -> SplitMetric:
    """User metric from gridded samples, trilinear in space and linear in t.

    ``values`` has shape (nt, nx, ny, nz, 6) holding (g11, g12, g13, g22, g23, g33).
    """
    values = np.asarray(values, dtype=float)
    axes = (np.asarray(t_axis, dtype=float), np.asarray(x_axis, dtype=float),
            np.asarray(y_axis, dtype=float), np.asarray(z_axis, dtype=float))
    if values.shape != tuple(len(a) for a in axes) + (6,):
        raise ValidationError("grid metric values shape does not match axes")
    interp = RegularGridInterpolator(axes, values, method="linear",
                                     bounds_error=True)

    def g(t, x):
        x = np.asarray(x, dtype=float)
        shp = x.shape[:-1]
        tt = np.broadcast_to(np.asarray(t, dtype=float), shp)
        pts = np.concatenate([tt[..., None], x], axis=-1).reshape(-1, 4)
        try:
            v6 = interp(pts).reshape(shp + (6,))
        except ValueError as exc:
            raise DomainError(f"point outside gridded metric domain: {exc}") from exc
        out = np.empty(shp + (3, 3))
        for m, (i, j) in enumerate(_SYM6):
            out[..., i, j] = v6[..., m]
            out[..., j, i] = v6[..., m]
        return out

    def dom(t, x):
        x = np.asarray(x, dtype=float)
        tt = np.asarray(t, dtype=float)
        ok = (tt >= axes[0][0]) & (tt <= axes[0][-1])
        for d in range(3):
            ok = ok & (x[..., d] >= axes[1 + d][0]) & (x[..., d] <= axes[1 + d][-1])
        return ok

    step = min(float(np.diff(a).min()) for a in axes if len(a) > 1)
    return SplitMetric("user", {"shape": values.shape}, g, domain=dom,
                       fd_step=0.25 * step, time_dependent=len(axes[0]) > 1)


def metric_from_csv(path) -> SplitMetric:
    """CSV columns t,x1,x2,x3,g11,g12,g13,g22,g23,g33 on a full regular lattice."""
    raw = np.loadtxt(path, delimiter=",", comments="#")
    raw = np.atleast_2d(raw)
    if raw.shape[1] != 10:
        raise ValidationError("metric CSV must have 10 columns")
    axes = [np.unique(raw[:, i]) for i in range(4)]
    shape = tuple(len(a) for a in axes)
    if int(np.prod(shape)) != raw.shape[0]:
        raise ValidationError("metric CSV does not cover a full regular lattice")
    idx = [np.searchsorted(axes[i], raw[:, i]) for i in range(4)]
    values = np.empty(shape + (6,))
    values[idx[0], idx[1], idx[2], idx[3], :] = raw[:, 4:]
    return metric_from_grid(*axes, values)


_GRID_MAGIC = b"CWGM1\n"


def save_grid_metric(path, t_axis, x_axis, y_axis, z_axis, values):
    values = np.ascontiguousarray(values, dtype="<f8")
    header = json.dumps({
        "t": list(map(float, t_axis)), "x": list(map(float, x_axis)),
        "y": list(map(float, y_axis)), "z": list(map(float, z_axis)),
        "shape": list(values.shape),
    }).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC)
        fh.write(header)
        fh.write(values.tobytes())


def metric_from_binary(path) -> SplitMetric:
    with open(path, "rb") as fh:
        magic = fh.read(len(_GRID_MAGIC))
        if magic != _GRID_MAGIC:
            raise ValidationError("not a conewave grid-metric file")
        header = json.loads(fh.readline().decode())
        values = np.frombuffer(fh.read(), dtype="<f8").reshape(header["shape"])
    return metric_from_grid(header["t"], header["x"], header["y"], header["z"], values)


# ---------------------------------------------------------------------------
# 4D connection and curvature
# ---------------------------------------------------------------------------

def four_metric(sample: MetricSample):
    shp = sample.g.shape[:-2]
    g4 = np.zeros(shp + (4, 4))
    g4[..., 0, 0] = -1.0
    g4[..., 1:, 1:] = sample.g
    g4i = np.zeros_like(g4)
    g4i[..., 0, 0] = -1.0
    g4i[..., 1:, 1:] = sample.g_inv
    return g4, g4i


def christoffel(metric: SplitMetric, t, x) -> np.ndarray:
    """Gamma^a_{bc} of -dt^2 + g_ij, shape (..., 4, 4, 4)."""
    s = evaluate(metric, t, x)
    shp = s.g.shape[:-2]
    gam = np.zeros(shp + (4, 4, 4))
    # Gamma^t_ij = 1/2 dt_g_ij
    gam[..., 0, 1:, 1:] = 0.5 * s.dt_g
    # Gamma^k_{ti} = 1/2 g^{kl} dt_g_{li}
    mixed = 0.5 * np.einsum("...kl,...li->...ki", s.g_inv, s.dt_g)
    gam[..., 1:, 0, 1:] = mixed
    gam[..., 1:, 1:, 0] = mixed
    # Gamma^k_{ij} from spatial derivatives; dx_g index order is (deriv, i, j):
    # T_{lij} = d_i g_{jl} + d_j g_{il} - d_l g_{ij}
    d = s.dx_g
    T = (np.einsum("...ijl->...lij", d)
         + np.einsum("...jil->...lij", d)
         - d)
    gam[..., 1:, 1:, 1:] = 0.5 * np.einsum("...kl,...lij->...kij", s.g_inv, T)
    return gam


@dataclass
class CurvatureSample:
    """4D Christoffel symbols and lowered Riemann tensor at a point batch."""

    t: np.ndarray
    x: np.ndarray
    christoffel: np.ndarray   # (..., 4, 4, 4)
    riemann: np.ndarray       # (..., 4, 4, 4, 4), fully lowered
    symmetry_violation: float

    def sectional(self, X, Y, g4):
        R = self.riemann
        num = np.einsum("...abcd,...a,...b,...c,...d->...", R, X, Y, X, Y)
        gXX = np.einsum("...ab,...a,...b->...", g4, X, X)
        gYY = np.einsum("...ab,...a,...b->...", g4, Y, Y)
        gXY = np.einsum("...ab,...a,...b->...", g4, X, Y)
        return num / (gXX * gYY - gXY**2)


def riemann(metric: SplitMetric, t, x, h=None) -> CurvatureSample:
    """Lowered Riemann tensor via 4th-order differencing of the Christoffel field.

    Sign convention fixed so that a spatial slice of constant curvature c has
    sectional curvature +c: R_{abcd} X^a Y^b X^c Y^d = c (|X|^2 |Y|^2 - <X,Y>^2)
    for spatial X, Y.
    """
    x = np.asarray(x, dtype=float)
    if h is None:
        h = metric.fd_step
    t = np.asarray(t, dtype=float)

    def gam_at(dt, dxv):
        return christoffel(metric, t + dt, x + dxv)

    shp = np.broadcast(t, x[..., 0]).shape
    dgam = np.zeros(shp + (4, 4, 4, 4))  # (mu, a, b, c) = d_mu Gamma^a_bc
    for mu in range(4):
        if mu == 0:
            f = lambda s: gam_at(s, 0.0)
        else:
            e = np.zeros(3)
            e[mu - 1] = 1.0
            f = lambda s: gam_at(0.0, s * e)
        dgam[..., mu, :, :, :] = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)
    gam = christoffel(metric, t, x)
    # R^a_{bcd} = d_c Gamma^a_{db} - d_d Gamma^a_{cb} + G^a_{ce} G^e_{db} - G^a_{de} G^e_{cb}
    Rup = (np.einsum("...cadb->...abcd", dgam)
           - np.einsum("...dacb->...abcd", dgam)
           + np.einsum("...ace,...edb->...abcd", gam, gam)
           - np.einsum("...ade,...ecb->...abcd", gam, gam))
    s = evaluate(metric, t, x)
    g4, _ = four_metric(s)
    Rlow = np.einsum("...ae,...ebcd->...abcd", g4, Rup)
    viol = _riemann_symmetry_violation(Rlow)
    return CurvatureSample(t=t, x=x, christoffel=gam, riemann=Rlow, symmetry_violation=viol)


def _riemann_symmetry_violation(R):
    scale = max(float(np.abs(R).max()), 1e-30)
    v1 = np.abs(R + np.einsum("...abcd->...bacd", R)).max()
    v2 = np.abs(R + np.einsum("...abcd->...abdc", R)).max()
    v3 = np.abs(R - np.einsum("...abcd->...cdab", R)).max()
    return float(max(v1, v2, v3) / scale)


def curvature(metric: SplitMetric, t, x, h=None) -> CurvatureSample:
    """Alias of :func:`riemann` matching the operation vocabulary."""
    return riemann(metric, t, x, h=h)


def sectional_curvature(metric: SplitMetric, t, x, X, Y, h=None):
    cs = riemann(metric, t, x, h=h)
    s = evaluate(metric, t, x)
    g4, _ = four_metric(s)
    return cs.sectional(np.asarray(X, dtype=float), np.asarray(Y, dtype=float), g4)


def tidal_matrix(curv: CurvatureSample, gamma_dot, frame_vectors) -> np.ndarray:
    """K_ij = Riem(gdot, e_i, gdot, e_j) for the Jacobi system along a null ray.

    ``frame_vectors`` is a sequence of 4-vectors (batched); the result is
    symmetric and equals diag(c, c, 0) on a constant-curvature-c spatial slice
    with gdot the static null direction.
    """
    gd = np.asarray(gamma_dot, dtype=float)
    es = [np.asarray(e, dtype=float) for e in frame_vectors]
    n = len(es)
    shp = np.broadcast(gd[..., 0], es[0][..., 0]).shape
    K = np.zeros(shp + (n, n))
    R = curv.riemann
    for i in range(n):
        for j in range(i, n):
            val = np.einsum("...abcd,...a,...b,...c,...d->...", R, gd, es[i], gd, es[j])
            K[..., i, j] = val
            K[..., j, i] = val
    return K


# ---------------------------------------------------------------------------
# black-hole radial coordinates
# ---------------------------------------------------------------------------

def tortoise(r, M):
    """r* = r + 2M log(r - 2M) - 3M - 2M log M for r > 2M."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 2 * M):
        raise DomainError("tortoise coordinate requires r > 2M")
    return r + 2 * M * np.log(r - 2 * M) - 3 * M - 2 * M * np.log(M)


def inverse_tortoise(r_star, M):
    """Invert the tortoise map by bracketed root finding on (2M, inf)."""
    scalar = np.ndim(r_star) == 0
    vals = np.atleast_1d(np.asarray(r_star, dtype=float))
    out = np.empty_like(vals)
    for i, rs in enumerate(vals):
        lo = 2 * M * (1 + 1e-14)
        hi = max(4 * M, rs + 4 * M)
        while tortoise(hi, M) < rs:
            hi *= 2
        out[i] = brentq(lambda r: tortoise(r, M) - rs, lo, hi, xtol=1e-15, rtol=1e-15)
    return float(out[0]) if scalar else out


def schwarzschild_line_element(coords: str, r, M):
    """Component table of the black-hole line element in the (t,r) or (v,r) chart.

    Returns a dict of nonzero components; angular entries use the unit-sphere
    measure, so g_{omega omega} = r^2.
    """
    r = float(r)
    if coords == "tr":
        if r == 2 * M:
            raise DomainError("r = 2M is a coordinate singularity of the (t, r) chart")
        if r < 2 * M:
            raise DomainError("the (t, r) chart requires r > 2M")
        f = 1 - 2 * M / r
        return {"g_tt": -f, "g_rr": 1 / f, "g_omega_omega": r * r}
    if coords == "vr":
        if r <= 0:
            raise DomainError("the (v, r) chart requires r > 0")
        f = 1 - 2 * M / r
        return {"g_vv": -f, "g_vr": 1.0, "g_rv": 1.0, "g_omega_omega": r * r}
    raise ValidationError(f"unknown chart '{coords}' (use 'tr' or 'vr')")


# ---------------------------------------------------------------------------
# cross-term elimination preprocessor
# ---------------------------------------------------------------------------

@dataclass
class CrossTermTransform:
    """Output of the drift-removing change of variables.

    ``X[n, i, j, k]`` is the new spatial coordinate of old grid node (i, j, k)
    at time ``times[n]`` (characteristics traced back to ``t_ref``), and
    ``abar`` the transformed second-order coefficients sampled at the same
    nodes.
    """

    times: np.ndarray
    axes: tuple
    t_ref: float
    X: np.ndarray        # (nt, nx, ny, nz, 3)
    jacobian: np.ndarray  # (nt, nx, ny, nz, 3, 3)
    abar: np.ndarray     # (nt, nx, ny, nz, 3, 3)


def eliminate_cross_terms(b: Callable, a: Callable, region: Region, t_ref: float,
                          n_times: int = 9, n_space: int = 17,
                          step: float = 0.02) -> CrossTermTransform:
    """Remove first-order drift b^i from (d_t + b^i d_i)^2 - (a+bb^T)^{ij} d_ij.

    Characteristics of d_t phi + b . grad phi = 0 are integrated backward to
    ``t_ref`` with RK4; the returned coefficients are
    abar = J (a + b b^T) J^T with J the Jacobian of the map, so that d_T in the
    new coordinates equals d_t + b^i d_i in the old ones up to O(step^2).
    """
    times = np.linspace(region.t_min, region.t_max, n_times)
    ax = np.linspace(-region.half_width, region.half_width, n_space)
    axes = (ax, ax, ax)
    Xg, Yg, Zg = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([Xg, Yg, Zg], axis=-1)
    h = ax[1] - ax[0]
    Xout = np.empty((n_times,) + pts.shape)
    Jout = np.empty((n_times,) + pts.shape + (3,))
    Aout = np.empty((n_times,) + pts.shape + (3,))

    def rhs(s, y):
        return np.asarray(b(s, y), dtype=float)

    for n, t in enumerate(times):
        span = t_ref - t
        nstep = max(1, int(np.ceil(abs(span) / step)))
        ds = span / nstep
        y = pts.copy()
        s = t
        for _ in range(nstep):
            k1 = rhs(s, y)
            k2 = rhs(s + ds / 2, y + ds / 2 * k1)
            k3 = rhs(s + ds / 2, y + ds / 2 * k2)
            k4 = rhs(s + ds, y + ds * k3)
            y = y + ds / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            s += ds
            if np.any(np.abs(y) > region.half_width * 1.5 + 10 * step):
                raise DomainError("characteristic left the region during cross-term elimination")
        Xout[n] = y
        J = np.stack([np.gradient(y[..., i], h, axis=k, edge_order=2)
                      for i in range(3) for k in range(3)], axis=-1)
        J = J.reshape(y.shape[:-1] + (3, 3))  # J[i, k] = dX_i/dx_k
        det = np.linalg.det(J)
        if np.any(np.abs(det) < 1e-8):
            raise DegeneracyError("cross-term elimination produced a non-invertible Jacobian")
        av = np.asarray(a(t, pts), dtype=float)
        bv = rhs(t, pts)
        ab = av + bv[..., :, None] * bv[..., None, :]
        Aout[n] = np.einsum("...ik,...kl,...jl->...ij", J, ab, J)
        Jout[n] = J
    return CrossTermTransform(times=times, axes=axes, t_ref=t_ref, X=Xout,
                              jacobian=Jout, abar=Aout)
