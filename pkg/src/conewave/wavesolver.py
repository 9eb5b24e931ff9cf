"""Divergence-form leapfrog solver for the quintic wave equation on a slice metric.

d_tt phi = d_i ( g^{ij}(t,x) d_j phi ) - phi^5 + F(t, x)

The spatial operator is the conservative face-flux stencil with arithmetically
face-averaged coefficients; time stepping is velocity Verlet (algebraically the
classic leapfrog with the nonlinearity at the centered level).  Fields carry
compact support inside a zero shell; reaching the shell is a domain-sizing
error, not a boundary condition.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np

from . import metric as metric_mod
from ._util import inv3x3_sym, tree_sum
from .errors import CFLError, NumericsError, ValidationError

__all__ = [
    "BoxGrid",
    "WaveState",
    "SolverConfig",
    "Trajectory",
    "cfl_bound",
    "step",
    "evolve",
    "linear_evolve",
    "solver_energy",
    "gaussian_bump",
    "annulus_pulse",
    "ingoing_pulse",
    "save_snapshot",
    "load_snapshot",
    "radial_grid",
    "evolve_radial",
    "dalembert_radial_reference",
]

_SHELL = 3  # cells of enforced zero at the outer boundary


@dataclass(frozen=True)
class BoxGrid:
    """Uniform cube [-half_width, half_width]^3 with n nodes per axis."""

    half_width: float
    n: int

    @property
    def h(self) -> float:
        return 2 * self.half_width / (self.n - 1)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.n)

    def nodes(self) -> np.ndarray:
        ax = self.axis
        X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
        return np.stack([X, Y, Z], axis=-1)

    def refine(self, factor: int = 2) -> "BoxGrid":
        return BoxGrid(self.half_width, (self.n - 1) * factor + 1)


@dataclass
class WaveState:
    t: float
    phi: np.ndarray
    phi_t: np.ndarray
    grid: BoxGrid

    def validate(self, abs_tol: float = None):
        """Finiteness plus a support margin: the two node layers just inside the
        enforced zero shell must stay essentially zero."""
        if not (np.all(np.isfinite(self.phi)) and np.all(np.isfinite(self.phi_t))):
            raise NumericsError("non-finite field values", t=self.t)
        if abs_tol is None:
            abs_tol = 3e-6 * max(float(np.abs(self.phi).max()),
                                 float(np.abs(self.phi_t).max()), 1e-300)
        s, w = _SHELL, _SHELL + 2
        for arr in (self.phi, self.phi_t):
            margin = max(np.abs(arr[s:w]).max(), np.abs(arr[-w:-s]).max(),
                         np.abs(arr[:, s:w]).max(), np.abs(arr[:, -w:-s]).max(),
                         np.abs(arr[:, :, s:w]).max(), np.abs(arr[:, :, -w:-s]).max())
            if margin > abs_tol:
                raise ValidationError(
                    f"field support reached the boundary shell at t={self.t:.4f} "
                    f"(margin {margin:.2e} vs tolerance {abs_tol:.2e}); enlarge the box")

    def copy(self) -> "WaveState":
        return WaveState(self.t, self.phi.copy(), self.phi_t.copy(), self.grid)


@dataclass
class SolverConfig:
    t0: float
    t_end: float
    cfl_safety: float = 0.5
    snapshot_stride: int = 1
    nonlinear: bool = True
    forcing: object = None            # callable F(t, nodes)->array or None
    partitions: int = 1
    support_check_stride: int = 8
    shell_tol: float = 1e-5


@dataclass
class Trajectory:
    """Snapshot sequence plus the data that produced it."""

    times: list
    snapshots: list
    grid: BoxGrid
    config: SolverConfig
    f1: np.ndarray = None
    f2: np.ndarray = None
    dt: float = None

    def state_at(self, t: float) -> WaveState:
        """Linear-in-time interpolation between bracketing snapshots."""
        ts = np.asarray(self.times)
        if t <= ts[0]:
            return self.snapshots[0]
        if t >= ts[-1]:
            return self.snapshots[-1]
        k = int(np.searchsorted(ts, t) - 1)
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        a, b = self.snapshots[k], self.snapshots[k + 1]
        return WaveState(t, (1 - w) * a.phi + w * b.phi,
                         (1 - w) * a.phi_t + w * b.phi_t, self.grid)

    def nearest_index(self, t: float) -> int:
        return int(np.argmin(np.abs(np.asarray(self.times) - t)))


def cfl_bound(metric, grid: BoxGrid, t_range=(-1.0, 0.0), n_samples=200) -> float:
    """dt_max = h / sqrt(C_high) with C_high sampled over the box and time range."""
    region = metric_mod.Region(t_range[0], t_range[1], grid.half_width)
    _, c_high = metric_mod.ellipticity_bounds(metric, region, n_samples, seed=11)
    return grid.h / np.sqrt(c_high)


class _Stencil:
    """Face-flux divergence operator with cached per-time face coefficients."""

    def __init__(self, metric, grid: BoxGrid, partitions: int = 1):
        self.metric = metric
        self.grid = grid
        self.partitions = max(1, int(partitions))
        self.nodes = grid.nodes()
        self._cache_t = None
        self._cache = None

    def face_coeffs(self, t):
        if self._cache is not None and (not self.metric.time_dependent
                                        or self._cache_t == t):
            return self._cache
        ginv = inv3x3_sym(self.metric.spatial(t, self.nodes))
        faces = []
        for i in range(3):
            sl_lo = [slice(None)] * 3
            sl_hi = [slice(None)] * 3
            sl_lo[i] = slice(0, -1)
            sl_hi[i] = slice(1, None)
            gf = 0.5 * (ginv[tuple(sl_lo)] + ginv[tuple(sl_hi)])
            faces.append([np.ascontiguousarray(gf[..., i, j]) for j in range(3)])
        self._cache = faces
        self._cache_t = t
        return faces

    def divergence(self, phi, t):
        if self.partitions == 1:
            return self._divergence_block(phi, t, None)
        # disjoint z-slabs with one-cell halo; identical arithmetic per block
        n = self.grid.n
        out = np.zeros_like(phi)
        bounds = np.linspace(0, n, self.partitions + 1).astype(int)
        for b0, b1 in zip(bounds[:-1], bounds[1:]):
            lo = max(0, b0 - 1)
            hi = min(n, b1 + 1)
            blk = self._divergence_block(phi[:, :, lo:hi], t, (lo, hi))
            out[:, :, b0:b1] = blk[:, :, b0 - lo: blk.shape[2] - (hi - b1)]
        return out

    def _divergence_block(self, phi, t, zwin):
        faces = self.face_coeffs(t)
        if zwin is not None:
            faces = [[c[:, :, zwin[0]:zwin[1] - (1 if i == 2 else 0)] for c in faces[i]]
                     for i in range(3)]
        h = self.grid.h
        grads = [np.gradient(phi, h, axis=j, edge_order=2) for j in range(3)]
        out = np.zeros_like(phi)
        for i in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[i] = slice(0, -1)
            hi[i] = slice(1, None)
            lo, hi = tuple(lo), tuple(hi)
            # flux through face k+1/2 along axis i
            flux = faces[i][i] * (phi[hi] - phi[lo]) / h
            for j in range(3):
                if j != i:
                    flux = flux + faces[i][j] * 0.5 * (grads[j][lo] + grads[j][hi])
            # (flux_{k+1/2} - flux_{k-1/2}) / h lands on interior nodes 1..n-2
            interior = [slice(None)] * 3
            interior[i] = slice(1, -1)
            out[tuple(interior)] = out[tuple(interior)] + (flux[hi] - flux[lo]) / h
        return out


def _acceleration(stencil: _Stencil, state_phi, t, nonlinear, forcing):
    acc = stencil.divergence(state_phi, t)
    if nonlinear:
        acc = acc - state_phi**5
    if forcing is not None:
        acc = acc + forcing(t, stencil.nodes)
    return acc


def step(state: WaveState, metric, dt, nonlinear=True, forcing=None,
         dt_max=None, cfl_safety=0.5, _stencil=None, _acc0=None) -> WaveState:
    """One velocity-Verlet step (leapfrog with the quintic term at the centered level)."""
    if dt_max is None:
        dt_max = cfl_bound(metric, state.grid, (state.t, state.t + dt))
    if dt > cfl_safety * dt_max * (1 + 1e-12):
        raise CFLError(f"dt={dt:.3e} exceeds cfl_safety*dt_max={cfl_safety * dt_max:.3e}")
    st = _stencil if _stencil is not None else _Stencil(metric, state.grid)
    a0 = _acc0 if _acc0 is not None else _acceleration(st, state.phi, state.t, nonlinear, forcing)
    phi1 = state.phi + dt * state.phi_t + 0.5 * dt * dt * a0
    _zero_shell(phi1)
    a1 = _acceleration(st, phi1, state.t + dt, nonlinear, forcing)
    phi_t1 = state.phi_t + 0.5 * dt * (a0 + a1)
    _zero_shell(phi_t1)
    out = WaveState(state.t + dt, phi1, phi_t1, state.grid)
    if not np.all(np.isfinite(phi1)):
        raise NumericsError("NaN/Inf detected during step", t=out.t)
    return out


def _zero_shell(arr):
    s = _SHELL
    arr[:s] = 0.0
    arr[-s:] = 0.0
    arr[:, :s] = 0.0
    arr[:, -s:] = 0.0
    arr[:, :, :s] = 0.0
    arr[:, :, -s:] = 0.0


def evolve(f1, f2, metric, grid: BoxGrid, config: SolverConfig, callback=None) -> Trajectory:
    """March the Cauchy data across [t0, t_end], collecting snapshots every stride."""
    nodes = grid.nodes()
    phi = np.asarray(f1(nodes) if callable(f1) else f1, dtype=float).copy()
    phi_t = np.asarray(f2(nodes) if callable(f2) else f2, dtype=float).copy()
    _zero_shell(phi)
    _zero_shell(phi_t)
    state = WaveState(config.t0, phi, phi_t, grid)
    scale0 = max(float(np.abs(phi).max()), float(np.abs(phi_t).max()), 1e-300)
    state.validate(config.shell_tol * scale0)
    span = config.t_end - config.t0
    if span <= 0:
        raise ValidationError("t_end must exceed t0")
    dt_max = cfl_bound(metric, grid, (config.t0, config.t_end))
    n_steps = int(np.ceil(span / (config.cfl_safety * dt_max) - 1e-12))
    dt = span / n_steps
    st = _Stencil(metric, grid, config.partitions)
    times = [state.t]
    snaps = [state.copy()]
    if callback is not None:
        callback(state)
    acc = _acceleration(st, state.phi, state.t, config.nonlinear, config.forcing)
    for k in range(n_steps):
        # reuse the end acceleration of the previous step (velocity Verlet)
        phi1 = state.phi + dt * state.phi_t + 0.5 * dt * dt * acc
        _zero_shell(phi1)
        a1 = _acceleration(st, phi1, state.t + dt, config.nonlinear, config.forcing)
        phi_t1 = state.phi_t + 0.5 * dt * (acc + a1)
        _zero_shell(phi_t1)
        state = WaveState(config.t0 + (k + 1) * dt, phi1, phi_t1, grid)
        acc = a1
        if not np.all(np.isfinite(phi1)):
            raise NumericsError("NaN/Inf detected during evolution", t=state.t)
        if (k + 1) % config.support_check_stride == 0 or k + 1 == n_steps:
            state.validate(config.shell_tol * scale0)
        if (k + 1) % config.snapshot_stride == 0 or k + 1 == n_steps:
            times.append(state.t)
            snaps.append(state.copy())
            if callback is not None:
                callback(state)
    return Trajectory(times=times, snapshots=snaps, grid=grid, config=config,
                      f1=phi.copy(), f2=phi_t.copy(), dt=dt)


def linear_evolve(f1, f2, forcing, metric, grid: BoxGrid, config: SolverConfig,
                  callback=None) -> Trajectory:
    """The linear forced problem: quintic term off, source F(t, x) on."""
    cfg = replace(config, nonlinear=False, forcing=forcing)
    return evolve(f1, f2, metric, grid, cfg, callback=callback)


def solver_energy(state: WaveState, metric, partitions: int = 1) -> float:
    """Discrete energy 1/2 sum (phi_t^2 + g^{ij} D_i phi D_j phi + phi^6/3) h^3."""
    g = state.grid
    ginv = inv3x3_sym(metric.spatial(state.t, g.nodes()))
    grads = [np.gradient(state.phi, g.h, axis=i, edge_order=2) for i in range(3)]
    dens = state.phi_t**2 + state.phi**6 / 3.0
    for i in range(3):
        for j in range(3):
            dens = dens + ginv[..., i, j] * grads[i] * grads[j]
    return 0.5 * tree_sum(dens, partitions) * g.h**3


# ---------------------------------------------------------------------------
# initial data families
# ---------------------------------------------------------------------------

def gaussian_bump(amplitude=1.0, width=0.25, center=(0.0, 0.0, 0.0), cutoff=None):
    """Gaussian profile times a smooth bump, so the support is exactly compact."""
    from .metric import _bump
    c = np.asarray(center, dtype=float)
    r_cut = 4.0 * width if cutoff is None else cutoff

    def f(nodes):
        r2 = np.sum((nodes - c) ** 2, axis=-1)
        return amplitude * np.exp(-r2 / width**2) * _bump(np.sqrt(r2) / r_cut)

    return f


def annulus_pulse(amplitude=1.0, radius=0.5, width=0.1, cutoff=None):
    from .metric import _bump
    r_cut = 4.0 * width if cutoff is None else cutoff

    def f(nodes):
        r = np.linalg.norm(nodes, axis=-1)
        return amplitude * np.exp(-((r - radius) / width) ** 2) * _bump((r - radius) / r_cut)

    return f


def ingoing_pulse(amplitude=1.0, radius=0.5, width=0.1, cutoff=None):
    """(f1, f2) pair approximating an ingoing spherical pulse phi = psi(r+t)/r."""
    from .metric import _bump, _bump_prime
    r_cut = 4.0 * width if cutoff is None else cutoff

    def profile(r):
        return (amplitude * np.exp(-((r - radius) / width) ** 2)
                * _bump((r - radius) / r_cut))

    def dprofile(r):
        base = amplitude * np.exp(-((r - radius) / width) ** 2)
        return (base * (-2.0 * (r - radius) / width**2) * _bump((r - radius) / r_cut)
                + base * _bump_prime((r - radius) / r_cut) / r_cut)

    def f1(nodes):
        r = np.linalg.norm(nodes, axis=-1)
        return profile(r)

    def f2(nodes):
        r = np.linalg.norm(nodes, axis=-1)
        safe = np.where(r > 1e-9, r, 1e-9)
        return dprofile(r) + profile(r) / safe

    return f1, f2


# ---------------------------------------------------------------------------
# snapshot files
# ---------------------------------------------------------------------------

def save_snapshot(state: WaveState, path):
    import json
    header = json.dumps({"t": state.t, "half_width": state.grid.half_width,
                         "n": state.grid.n}).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(b"CWSN1\n")
        fh.write(header)
        fh.write(np.ascontiguousarray(state.phi, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.phi_t, dtype="<f8").tobytes())


def load_snapshot(path) -> WaveState:
    import json
    with open(path, "rb") as fh:
        if fh.read(6) != b"CWSN1\n":
            raise ValidationError("not a conewave snapshot file")
        header = json.loads(fh.readline().decode())
        n = int(header["n"])
        buf = np.frombuffer(fh.read(), dtype="<f8")
    phi = buf[:n**3].reshape(n, n, n).copy()
    phi_t = buf[n**3:].reshape(n, n, n).copy()
    return WaveState(header["t"], phi, phi_t, BoxGrid(header["half_width"], n))


# ---------------------------------------------------------------------------
# radial 1+1 reduction (flat or exterior black-hole background)
# ---------------------------------------------------------------------------

def radial_grid(r_min, r_max, n):
    return np.linspace(r_min, r_max, n)


def _radial_potential(rs, mass):
    """V(r(r*)) for the psi = r phi reduction; zero when mass is None/0."""
    if not mass:
        return np.zeros_like(rs), rs.copy()
    from .metric import inverse_tortoise
    r = inverse_tortoise(rs, mass)
    V = (1 - 2 * mass / r) * (2 * mass / r**3)
    return V, r


def evolve_radial(psi0, psi_t0, rs, t0, t_end, mass=None, nonlinear=False,
                  cfl_safety=0.5, snapshot_stride=4):
    """1+1 evolution of psi_tt = psi_rr - V psi [- (1-2M/r) psi^5 / r^4].

    ``rs`` is the radial (tortoise, when mass is set) grid; fixed zero endpoint
    values stand in for compact support.  Returns (times, snapshots).
    """
    h = rs[1] - rs[0]
    V, r_area = _radial_potential(rs, mass)
    horizon_factor = (1 - 2 * mass / r_area) if mass else np.ones_like(rs)
    dt = cfl_safety * h
    n_steps = int(np.ceil((t_end - t0) / dt - 1e-12))
    dt = (t_end - t0) / n_steps
    psi = np.asarray(psi0, dtype=float).copy()
    psi_t = np.asarray(psi_t0, dtype=float).copy()
    psi[[0, -1]] = 0.0
    psi_t[[0, -1]] = 0.0

    def acc(p):
        a = np.zeros_like(p)
        a[1:-1] = (p[2:] - 2 * p[1:-1] + p[:-2]) / h**2
        a -= V * p
        if nonlinear:
            a -= horizon_factor * p**5 / np.maximum(r_area, 1e-9) ** 4
        a[[0, -1]] = 0.0
        return a

    times = [t0]
    snaps = [(psi.copy(), psi_t.copy())]
    a0 = acc(psi)
    for k in range(n_steps):
        psi = psi + dt * psi_t + 0.5 * dt * dt * a0
        psi[[0, -1]] = 0.0
        a1 = acc(psi)
        psi_t = psi_t + 0.5 * dt * (a0 + a1)
        psi_t[[0, -1]] = 0.0
        a0 = a1
        if not np.all(np.isfinite(psi)):
            raise NumericsError("NaN in radial evolution", t=t0 + (k + 1) * dt)
        if (k + 1) % snapshot_stride == 0 or k + 1 == n_steps:
            times.append(t0 + (k + 1) * dt)
            snaps.append((psi.copy(), psi_t.copy()))
    return np.asarray(times), snaps


def dalembert_radial_reference(psi0_fn, psi_t0_fn, rs, t):
    """Exact linear flat radial solution via d'Alembert with odd extension at r=0."""
    from scipy.integrate import quad

    def odd(f, x):
        return np.where(x >= 0, f(np.abs(x)), -f(np.abs(x)))

    out = np.empty_like(rs)
    for i, r in enumerate(rs):
        a, b = r - t, r + t
        left = 0.5 * (odd(psi0_fn, np.array([a]))[0] + odd(psi0_fn, np.array([b]))[0])
        val, _ = quad(lambda s: odd(psi_t0_fn, np.array([s]))[0], a, b, limit=200)
        out[i] = left + 0.5 * val
    return out
