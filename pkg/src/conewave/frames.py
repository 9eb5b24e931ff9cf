"""Null frames adapted to the cone foliation and their connection coefficients.

Every function is batched: points may carry arbitrary leading dimensions.
4-vectors use index 0 for the time component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metric as metric_mod
from ._util import inv3x3_sym
from .errors import AccuracyError, DegeneracyError, ValidationError

__all__ = [
    "NullFrame",
    "FrameCoefficients",
    "inner4",
    "build_frame",
    "frame_from_grad",
    "coefficients_geometric",
    "coefficients_from_relations",
    "near_vertex_margins",
    "export_margins_csv",
]

_MARGIN_NAMES = [
    "eta_bound",              # |eta_a| <= C
    "omegabar_band",          # |omegabar| <= c|t|/2
    "chibar_trace_band",      # |chibar_aa - 1/(t-u)| <= c|t|
    "etabar_bound",           # |etabar_a| <= C|t|
    "xi_bound",               # |xi_a| <= C(1+|t|)
    "one_minus_m_chibar",     # |1-m| |chibar_aa| <= C
    "multiplier_trace_band",  # |tr(chi) u + tr(chibar) u_conj - 4| <= C|t|
    "multiplier_form_band",   # quadratic-form sandwich around 2|w|^2, width C|t|
]


def inner4(g, X, Y):
    """Lorentzian inner product -X^0 Y^0 + g_ij X^i Y^j with spatial block g."""
    return (-X[..., 0] * Y[..., 0]
            + np.einsum("...ij,...i,...j->...", g, X[..., 1:], Y[..., 1:]))


@dataclass
class NullFrame:
    """Tetrad (e1, e2, L, Lbar) with horizontal unit normal N and lapse factor m."""

    t: np.ndarray
    x: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    L: np.ndarray
    Lbar: np.ndarray
    N: np.ndarray
    m: np.ndarray
    table_residual: float = 0.0

    def inner_table(self, g):
        """Max deviation of the frame inner products from their exact values."""
        vals = [
            inner4(g, self.e1, self.e1) - 1.0,
            inner4(g, self.e2, self.e2) - 1.0,
            inner4(g, self.e1, self.e2),
            inner4(g, self.e1, self.L),
            inner4(g, self.e1, self.Lbar),
            inner4(g, self.e2, self.L),
            inner4(g, self.e2, self.Lbar),
            inner4(g, self.L, self.L),
            inner4(g, self.Lbar, self.Lbar),
            inner4(g, self.L, self.Lbar) + 2.0,
            inner4(g, self.N, self.N) - 1.0,
        ]
        return float(max(np.abs(v).max() for v in vals))


def frame_from_grad(g, grad, t=None, x=None, check=False):
    """Construct the null frame from the spatial metric and the optical gradient.

    The horizontal pair (e1, e2) comes from Gram-Schmidt of the two coordinate
    directions most orthogonal to N, which makes the gauge deterministic in
    the point alone.
    """
    grad = np.asarray(grad, dtype=float)
    ut = grad[..., 0]
    if np.any(np.abs(ut) < 1e-6):
        raise DegeneracyError("time derivative of the optical function is degenerate")
    m = 1.0 / ut
    ginv = inv3x3_sym(g)
    w = np.einsum("...ij,...j->...i", ginv, grad[..., 1:])    # raised spatial gradient
    # project onto the null constraint |grad u|_g = d_t u so the frame table is
    # exact; the unprojected defect is tracked by the eikonal residual instead
    norm_w = np.sqrt(np.einsum("...ij,...i,...j->...", g, w, w))
    if np.any(norm_w < 1e-12):
        raise DegeneracyError("spatial optical gradient vanished; frame undefined")
    w = w * (np.abs(ut) / norm_w)[..., None]
    shp = ut.shape
    Lbar = np.empty(shp + (4,))
    Lbar[..., 0] = ut
    Lbar[..., 1:] = -w
    L = np.empty(shp + (4,))
    L[..., 0] = m
    L[..., 1:] = (m**2)[..., None] * w
    N = np.empty(shp + (4,))
    N[..., 0] = 0.0
    N[..., 1:] = -m[..., None] * w

    # covariant components of N pick the two most orthogonal coordinate axes
    Ncov = np.einsum("...ij,...j->...i", g, N[..., 1:])
    order = np.argsort(np.abs(Ncov), axis=-1, kind="stable")
    e_axes = []
    for which in range(2):
        idx = order[..., which]
        v = np.zeros(shp + (4,))
        np.put_along_axis(v[..., 1:], idx[..., None], 1.0, axis=-1)
        e_axes.append(v)

    def spat(a, b):
        return np.einsum("...ij,...i,...j->...", g, a[..., 1:], b[..., 1:])

    v1 = e_axes[0] - spat(e_axes[0], N)[..., None] * N
    e1 = v1 / np.sqrt(spat(v1, v1))[..., None]
    v2 = (e_axes[1] - spat(e_axes[1], N)[..., None] * N
          - spat(e_axes[1], e1)[..., None] * e1)
    e2 = v2 / np.sqrt(spat(v2, v2))[..., None]
    fr = NullFrame(t=t, x=x, e1=e1, e2=e2, L=L, Lbar=Lbar, N=N, m=m)
    if check:
        fr.table_residual = fr.inner_table(g)
        if fr.table_residual > 1e-8:
            raise AccuracyError(
                f"frame inner-product table off by {fr.table_residual:.2e} (> 1e-8)")
    return fr


def build_frame(metric, field, t, x, check=True) -> NullFrame:
    """Null frame at (t, x) from the interpolated optical gradient."""
    x = np.asarray(x, dtype=float)
    grad = field.interp_grad(t, x)
    g = metric.spatial(t, x)
    fr = frame_from_grad(g, grad, t=np.asarray(t, dtype=float), x=x, check=check)
    return fr


@dataclass
class FrameCoefficients:
    """Connection coefficients of the tetrad in the cone gauge.

    chibar/chi are the null second fundamental forms, eta/etabar/xi the
    torsion vectors, omegabar the lapse expansion; the remaining fields are
    the slice data entering the algebraic relations among them.
    """

    chibar: np.ndarray    # (..., 2, 2)
    chi: np.ndarray       # (..., 2, 2)
    eta: np.ndarray       # (..., 2)
    etabar: np.ndarray    # (..., 2)
    xi: np.ndarray        # (..., 2)
    omegabar: np.ndarray  # (...,)
    k_Na: np.ndarray      # (..., 2)
    k_ab: np.ndarray      # (..., 2, 2)
    ea_ut: np.ndarray     # (..., 2)
    dt_m: np.ndarray      # (...,)


def _covariant_hessian(H, gam, grad):
    return H - np.einsum("...lmn,...l->...mn", gam, grad)


def coefficients_geometric(metric, field, frame: NullFrame) -> FrameCoefficients:
    """Coefficients from covariant derivatives of the optical gradient and L.

    chibar, etabar and omegabar come from the covariant Hessian of the optical
    function (Lbar is minus its gradient); chi, eta, xi from differentiating
    the L field directly.  Entirely independent of the algebraic relations in
    :func:`coefficients_from_relations`.
    """
    t, x = frame.t, frame.x
    grad = field.interp_grad(t, x)
    H = field.hessian(t, x)
    s = metric_mod.evaluate(metric, t, x)
    gam = metric_mod.christoffel(metric, t, x)
    Hc = _covariant_hessian(H, gam, grad)
    g = s.g
    es = (frame.e1, frame.e2)

    def hc(X, Y):
        return np.einsum("...mn,...m,...n->...", Hc, X, Y)

    chibar = np.empty(frame.m.shape + (2, 2))
    for a in range(2):
        for b in range(2):
            chibar[..., a, b] = -hc(es[a], es[b])
    chibar = 0.5 * (chibar + np.swapaxes(chibar, -1, -2))
    etabar = np.stack([-0.5 * hc(frame.L, es[a]) for a in range(2)], axis=-1)
    omegabar = 0.25 * hc(frame.L, frame.L)

    # partial derivatives of the L field: L^0 = m, L^j = m^2 g^{jk} d_k u
    m = frame.m
    ginv = s.g_inv
    dginv_t = -np.einsum("...ik,...kl,...lj->...ij", ginv, s.dt_g, ginv)
    dginv_x = -np.einsum("...ik,...mkl,...lj->...mij", ginv, s.dx_g, ginv)
    dginv = np.concatenate([dginv_t[..., None, :, :], dginv_x], axis=-3)  # (..., 4, 3, 3)
    w = np.einsum("...ij,...j->...i", ginv, grad[..., 1:])
    dm = -(m**2)[..., None] * H[..., :, 0]                      # (..., 4)
    dL = np.empty(m.shape + (4, 4))                             # (..., mu, alpha)
    dL[..., :, 0] = dm
    dL[..., :, 1:] = (2 * (m[..., None] * dm)[..., None] * w[..., None, :]
                      + (m**2)[..., None, None]
                      * np.einsum("...mij,...j->...mi", dginv, grad[..., 1:])
                      + (m**2)[..., None, None]
                      * np.einsum("...ij,...mj->...mi", ginv, H[..., :, 1:]))

    def DX(X):
        """Covariant derivative of L along X (4-vector field value at the point)."""
        partial = np.einsum("...m,...ma->...a", X, dL)
        conn = np.einsum("...amn,...m,...n->...a", gam, X, frame.L)
        return partial + conn

    DLL = DX(frame.L)
    DLbarL = DX(frame.Lbar)
    chi = np.empty_like(chibar)
    for a in range(2):
        DeaL = DX(es[a])
        for b in range(2):
            chi[..., a, b] = inner4(g, DeaL, es[b])
    chi = 0.5 * (chi + np.swapaxes(chi, -1, -2))
    eta = np.stack([0.5 * inner4(g, DLbarL, es[a]) for a in range(2)], axis=-1)
    xi = np.stack([0.5 * inner4(g, DLL, es[a]) for a in range(2)], axis=-1)

    k = s.k
    kN = np.einsum("...ij,...i->...j", k, frame.N[..., 1:])
    k_Na = np.stack([np.einsum("...j,...j->...", kN, es[a][..., 1:]) for a in range(2)], axis=-1)
    k_ab = np.empty_like(chibar)
    for a in range(2):
        for b in range(2):
            k_ab[..., a, b] = np.einsum("...ij,...i,...j->...", k, es[a][..., 1:], es[b][..., 1:])
    ea_ut = np.stack([np.einsum("...i,...i->...", es[a][..., 1:], H[..., 0, 1:])
                      for a in range(2)], axis=-1)
    dt_m = -(m**2) * H[..., 0, 0]
    return FrameCoefficients(chibar=chibar, chi=chi, eta=eta, etabar=etabar, xi=xi,
                             omegabar=omegabar, k_Na=k_Na, k_ab=k_ab,
                             ea_ut=ea_ut, dt_m=dt_m)


def coefficients_from_relations(chibar, k_Na, k_ab, m, ea_ut, dt_m) -> FrameCoefficients:
    """Algebraic map from (chibar, slice data) to the remaining coefficients.

    eta = -k_N, etabar = -m e_a(u_t) + k_N, xi = -m^2 etabar + m^2 k_N,
    chi = -m^2 chibar - 2 m k, omegabar = -dt m; exact arithmetic on inputs.
    """
    chibar = np.asarray(chibar, dtype=float)
    k_Na = np.asarray(k_Na, dtype=float)
    k_ab = np.asarray(k_ab, dtype=float)
    m = np.asarray(m, dtype=float)
    ea_ut = np.asarray(ea_ut, dtype=float)
    dt_m = np.asarray(dt_m, dtype=float)
    eta = -k_Na
    etabar = -m[..., None] * ea_ut + k_Na
    xi = -(m**2)[..., None] * etabar + (m**2)[..., None] * k_Na
    chi = -(m**2)[..., None, None] * chibar - 2 * m[..., None, None] * k_ab
    omegabar = -dt_m
    return FrameCoefficients(chibar=chibar, chi=chi, eta=eta, etabar=etabar, xi=xi,
                             omegabar=omegabar, k_Na=k_Na, k_ab=k_ab,
                             ea_ut=ea_ut, dt_m=dt_m)


def near_vertex_margins(coeffs: FrameCoefficients, t, u, phi_grad_pairs=None,
                        seed: int = 0, n_vectors: int = 8) -> dict:
    """Fitted constants for the near-vertex coefficient bounds.

    Each bound has the form |q| <= C * w(t); the minimizing constant over the
    sample set is sup |q| / w, i.e. the exact solution of the one-constant
    linear program.  ``u`` are optical values at the samples (t < 0 inside the
    cone); the conjugate value 2t - u is formed internally.
    """
    t = np.asarray(t, dtype=float)
    u = np.asarray(u, dtype=float)
    if t.size == 0:
        raise ValidationError("empty sample set")
    if np.any(t >= 0):
        raise ValidationError("samples must lie at t < 0")
    uc = 2 * t - u
    at = np.abs(t)
    out = {}

    def fit(name, q, w):
        c = float(np.max(np.abs(q) / w))
        out[name] = {"constant": c, "sup": float(np.abs(q).max()),
                     "worst_margin": 0.0}

    fit("eta_bound", coeffs.eta, np.ones_like(coeffs.eta))
    fit("omegabar_band", coeffs.omegabar, 0.5 * at)
    tr_chibar = coeffs.chibar[..., 0, 0] + coeffs.chibar[..., 1, 1]
    pole = 1.0 / (t - u)
    dev = np.stack([coeffs.chibar[..., 0, 0] - pole,
                    coeffs.chibar[..., 1, 1] - pole], axis=-1)
    fit("chibar_trace_band", dev, at[..., None] * np.ones((1, 2)))
    fit("etabar_bound", coeffs.etabar, at[..., None] * np.ones((1, 2)))
    fit("xi_bound", coeffs.xi, (1.0 + at)[..., None] * np.ones((1, 2)))
    tr_chi = coeffs.chi[..., 0, 0] + coeffs.chi[..., 1, 1]
    combo = tr_chi * u + tr_chibar * uc
    fit("multiplier_trace_band", combo - 4.0, at)
    rng = np.random.default_rng(seed)
    vs = rng.normal(size=(n_vectors, 2))
    vs /= np.linalg.norm(vs, axis=1, keepdims=True)
    mix = coeffs.chi * u[..., None, None] + coeffs.chibar * uc[..., None, None]
    qs = np.stack([np.einsum("...ab,a,b->...", mix, v, v) for v in vs], axis=-1)
    fit("multiplier_form_band", qs - 2.0, at[..., None] * np.ones((1, n_vectors)))
    return out


def margins_with_m(coeffs: FrameCoefficients, m, t, u, seed: int = 0,
                   n_vectors: int = 8) -> dict:
    """near_vertex_margins plus the |1-m| |chibar_aa| bound, which needs m."""
    out = near_vertex_margins(coeffs, t, u, seed=seed, n_vectors=n_vectors)
    m = np.asarray(m, dtype=float)
    q = np.abs(1.0 - m)[..., None] * np.abs(
        np.stack([coeffs.chibar[..., 0, 0], coeffs.chibar[..., 1, 1]], axis=-1))
    out["one_minus_m_chibar"] = {"constant": float(q.max()), "sup": float(q.max()),
                                 "worst_margin": 0.0}
    return out


def export_margins_csv(path, margins: dict):
    with open(path, "w") as fh:
        fh.write("# schema=conewave.margins.v1\n")
        fh.write("bound,constant,sup\n")
        for name in sorted(margins):
            rec = margins[name]
            fh.write(f"{name},{rec['constant']:.17g},{rec['sup']:.17g}\n")


def export_coefficients_csv(path, t, x, u, coeffs: FrameCoefficients, margins=None):
    """Per-point coefficient table (one row per sample)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    with open(path, "w") as fh:
        fh.write("# schema=conewave.coefficients.v1\n")
        fh.write("t,absx,u,chibar11,chibar22,chibar12,chi11,chi22,chi12,"
                 "eta1,eta2,etabar1,etabar2,xi1,xi2,omegabar\n")
        for i in range(t.shape[0]):
            row = [t[i], np.linalg.norm(x[i]), u[i],
                   coeffs.chibar[i, 0, 0], coeffs.chibar[i, 1, 1], coeffs.chibar[i, 0, 1],
                   coeffs.chi[i, 0, 0], coeffs.chi[i, 1, 1], coeffs.chi[i, 0, 1],
                   coeffs.eta[i, 0], coeffs.eta[i, 1],
                   coeffs.etabar[i, 0], coeffs.etabar[i, 1],
                   coeffs.xi[i, 0], coeffs.xi[i, 1], coeffs.omegabar[i]]
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
