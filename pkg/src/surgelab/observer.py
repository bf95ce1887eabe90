"""Projected high-gain observer for the MG3 model from pressure measurements.

The system is observable away from phi = -1 (zero mass flow): pressure and
its first two formal derivatives determine the full state once the applied
control z1 and its rate z2 are known. The observer is a copy of the plant
driven by the pressure innovation through gains l1/rho, l2/rho**2,
l3/rho**3; small rho buys speed at the price of peaking transients.

Peaking is suppressed by projecting the estimate's velocity so that the
observable coordinates xi = H(xhat, z) never leave a moving box C(z).
The box is parameterized by direct bounds on the three physical quantities
it constrains:

    xi1 = psi_hat            in [a1, b1]
    phi_hat                  in [a2, b2]   (xi2 = (phi_hat - z1)/beta^2)
    q_hat                    in [a3, b3]   (xi3 = (q_hat  - z2)/beta^2)

with q = -psi - 3/2 phi^2 - 1/2 phi^3 - 3 R phi - 3 R (the state-only part
of the second pressure derivative). The phi bound is the observability
guard: a2 > -1 keeps the inverse map well defined, and the default
a2 = -0.5 is the advertised floor for phi_hat.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .model import PlantParams, ShiftedState

EPS_SING_DEFAULT = 1e-6
EPS_FACE_DEFAULT = 1e-9

FACES = ("xi1-", "xi1+", "xi2-", "xi2+", "xi3-", "xi3+")


class ObservabilityError(RuntimeError):
    """Raised when phi_hat is too close to -1 (no mass flow: H singular)."""


@dataclass(frozen=True)
class CubeBounds:
    """Per-axis bounds of the projection box, in the physical convention
    (a1, b1) on psi_hat, (a2, b2) on phi_hat, (a3, b3) on q_hat."""

    a1: float = -2.0
    b1: float = 1.0
    a2: float = -0.5
    b2: float = 1.0
    a3: float = -0.5
    b3: float = 0.3

    def __post_init__(self):
        for lo, hi, ax in ((self.a1, self.b1, "psi"), (self.a2, self.b2, "phi"),
                           (self.a3, self.b3, "q")):
            if lo >= hi:
                raise ValueError(f"empty cube interval on {ax}: [{lo}, {hi}]")
        if self.a2 <= -1.0:
            raise ValueError(
                f"a2 = {self.a2} <= -1 would let phi_hat reach the observability"
                " singularity")

    @classmethod
    def from_xi_convention(cls, a1, b1, a2, b2, a3, b3) -> "CubeBounds":
        """Alternate constructor for bounds quoted with the xi-interval sign
        convention, where the lower endpoints enter negated:
        xi2 >= -(z1 + a2)/beta^2 means phi_hat >= -a2."""
        return cls(a1, b1, -a2, b2, -a3, b3)

    def xi_intervals(self, z, params: PlantParams):
        """(lo, hi) arrays of the box in xi space at integrator state z."""
        b2s = params.beta_sq
        z1, z2 = z
        lo = np.array([self.a1, (self.a2 - z1) / b2s, (self.a3 - z2) / b2s])
        hi = np.array([self.b1, (self.b2 - z1) / b2s, (self.b3 - z2) / b2s])
        return lo, hi

    def state_norm_bound(self, params: PlantParams) -> float:
        """Upper bound on ||xhat|| over the box image (z-independent).

        Used to check that projection prevents peaking escape.
        """
        num = max(abs(-self.b1 - 1.5 * p * p - 0.5 * p ** 3 - q)
                  for p in (self.a2, self.b2) for q in (self.a3, self.b3))
        num = max(num, max(abs(-self.a1 - 1.5 * p * p - 0.5 * p ** 3 - q)
                           for p in (self.a2, self.b2) for q in (self.a3, self.b3)))
        rmax = num / (3.0 * (1.0 + self.a2))
        pmax = max(abs(self.a2), abs(self.b2))
        smax = max(abs(self.a1), abs(self.b1))
        return float(np.sqrt(rmax ** 2 + pmax ** 2 + smax ** 2))


@dataclass(frozen=True)
class ObservableCoords:
    """Pressure and its two formal derivatives, xi = H(x, z)."""

    xi1: float
    xi2: float
    xi3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.xi1, self.xi2, self.xi3])


def _q_of(R, ph, ps):
    return -ps - 1.5 * ph * ph - 0.5 * ph ** 3 - 3.0 * R * ph - 3.0 * R


def observability_map(x: ShiftedState, z, params: PlantParams) -> ObservableCoords:
    b2 = params.beta_sq
    z1, z2 = z
    xi1 = x.psi
    xi2 = -(z1 - x.phi) / b2
    xi3 = (_q_of(x.R, x.phi, x.psi) - z2) / b2
    return ObservableCoords(xi1, xi2, xi3)


def inverse_map(xi: ObservableCoords, z, params: PlantParams,
                eps_sing: float = EPS_SING_DEFAULT) -> ShiftedState:
    """Recover the state from observable coordinates; fails near phi = -1."""
    b2 = params.beta_sq
    z1, z2 = z
    ps = xi.xi1
    ph = z1 + b2 * xi.xi2
    if abs(1.0 + ph) < eps_sing:
        raise ObservabilityError(
            f"inverse_map: recovered phi = {ph} is within {eps_sing} of the"
            " zero-mass-flow singularity")
    R = (-z2 - ps - 1.5 * ph * ph - 0.5 * ph ** 3 - b2 * xi.xi3) / (3.0 * (1.0 + ph))
    return ShiftedState(R, ph, ps)


def jacobian_H_x(x: ShiftedState, z, params: PlantParams) -> np.ndarray:
    """dH/dx; its determinant is 3(1 + phi)/beta^4, vanishing linearly at
    phi = -1."""
    b2 = params.beta_sq
    R, ph = x.R, x.phi
    return np.array([
        [0.0, 0.0, 1.0],
        [0.0, 1.0 / b2, 0.0],
        [-3.0 * (1.0 + ph) / b2, -(3.0 * ph + 1.5 * ph * ph + 3.0 * R) / b2, -1.0 / b2],
    ])


def jacobian_H_z(x: ShiftedState, z, params: PlantParams) -> np.ndarray:
    b2 = params.beta_sq
    return np.array([
        [0.0, 0.0],
        [-1.0 / b2, 0.0],
        [0.0, -1.0 / b2],
    ])


def design_observer_gain(poles, rho: float = 1.0, metric: str = "scaled"):
    """Observer gain vector and projection metric from desired error poles.

    L holds the coefficients of the characteristic polynomial of the poles
    (all of which must lie strictly in the left half plane); P solves the
    observer Lyapunov equation for the canonical observable pair, S is its
    symmetric square root.

    Gamma is the projection metric (S E')^-1 (S E')^-T. metric="scaled"
    uses E' = diag(1, rho, rho^2), matching the coordinates in which the
    high-gain error decay is certified; the resulting face projections are
    nearly axis-decoupled (cross-face leakage O(rho), O(rho^2)).
    metric="identity" uses E' = I, i.e. Gamma = P^-1. The scaled metric is
    the default: with Gamma = P^-1 the face coupling injects the fast
    xi3-face motion into the slow components and can destabilize the
    output-feedback loop.
    """
    poles = np.atleast_1d(np.asarray(poles, dtype=complex))
    if poles.shape != (3,):
        raise ValueError("exactly three observer poles required")
    if np.any(poles.real >= 0):
        raise ValueError(f"observer poles must be strictly stable, got {poles}")
    coeffs = np.poly(poles)
    if np.abs(coeffs.imag).max() > 1e-12:
        raise ValueError("complex poles must come in conjugate pairs")
    L = coeffs.real[1:].copy()

    Ac = np.diag([1.0, 1.0], k=1)
    Cc = np.zeros((1, 3)); Cc[0, 0] = 1.0
    F = Ac - np.outer(L, Cc[0])
    P = solve_continuous_lyapunov(F.T, -np.eye(3))
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if w.min() <= 0:
        raise ValueError("Lyapunov solution not positive definite")
    S = V @ np.diag(np.sqrt(w)) @ V.T
    Pinv = V @ np.diag(1.0 / w) @ V.T
    if metric == "scaled":
        Ei = np.diag([1.0, 1.0 / rho, 1.0 / (rho * rho)])
        Gamma = Ei @ Pinv @ Ei
    elif metric == "identity":
        Gamma = Pinv
    else:
        raise ValueError(f"unknown projection metric {metric!r}")
    return L, P, S, 0.5 * (Gamma + Gamma.T)


@dataclass(frozen=True)
class ObserverConfig:
    rho: float
    L: np.ndarray = field(repr=False)
    P: np.ndarray = field(repr=False)
    S: np.ndarray = field(repr=False)
    Gamma: np.ndarray = field(repr=False)
    cube: CubeBounds = CubeBounds()
    eps_sing: float = EPS_SING_DEFAULT
    eps_face: float = EPS_FACE_DEFAULT

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")

    @classmethod
    def design(cls, rho: float, poles=(-1.0, -2.0, -3.0),
               cube: CubeBounds | None = None,
               metric: str = "scaled") -> "ObserverConfig":
        L, P, S, Gamma = design_observer_gain(poles, rho=rho, metric=metric)
        return cls(rho=rho, L=L, P=P, S=S, Gamma=Gamma,
                   cube=cube if cube is not None else CubeBounds())


def observer_derivative(xhat: ShiftedState, psi_meas: float, z,
                        cfg: ObserverConfig, params: PlantParams) -> np.ndarray:
    """Raw (unprojected) observer velocity: plant copy at the estimate plus
    innovation corrections with gains l1/rho, l2/rho^2, l3/rho^3. The
    R-correction carries the inverse-Jacobian factor 1/(3(1 + phi_hat))."""
    b2 = params.beta_sq
    rho = cfg.rho
    l1, l2, l3 = cfg.L
    R, ph, ps = xhat.R, xhat.phi, xhat.psi
    z1, _ = z
    den = 3.0 * (1.0 + ph)
    if abs(den) < 3.0 * cfg.eps_sing:
        raise ObservabilityError(
            f"observer_derivative: phi_hat = {ph} too close to -1")
    innov = psi_meas - ps
    corrR = (l1 / rho + b2 * (3.0 * ph + 3.0 * R + 1.5 * ph * ph) * (l2 / rho ** 2)
             + b2 * (l3 / rho ** 3)) / den
    dR = -params.sigma * R * R - params.sigma * R * (2.0 * ph + ph * ph) - corrR * innov
    dph = (-ps - 1.5 * ph * ph - 0.5 * ph ** 3 - 3.0 * R * ph - 3.0 * R
           + b2 * (l2 / rho ** 2) * innov)
    dps = -(z1 - ph) / b2 + (l1 / rho) * innov
    return np.array([dR, dph, dps])


@dataclass(frozen=True)
class CubeLocation:
    status: str                      # "inside" | "boundary" | "outside"
    active_faces: tuple[str, ...]    # faces within eps_face (or violated)


def cube_contains(xi: ObservableCoords, z, cube: CubeBounds,
                  params: PlantParams,
                  eps_face: float = EPS_FACE_DEFAULT) -> CubeLocation:
    lo, hi = cube.xi_intervals(z, params)
    v = xi.as_array()
    active = []
    outside = False
    for i in range(3):
        if v[i] > hi[i] + eps_face or v[i] < lo[i] - eps_face:
            outside = True
        if abs(v[i] - hi[i]) <= eps_face or v[i] > hi[i]:
            active.append(f"xi{i + 1}+")
        elif abs(v[i] - lo[i]) <= eps_face or v[i] < lo[i]:
            active.append(f"xi{i + 1}-")
    if outside:
        return CubeLocation("outside", tuple(active))
    if active:
        return CubeLocation("boundary", tuple(active))
    return CubeLocation("inside", ())


def face_normals(face: str, params: PlantParams) -> tuple[np.ndarray, np.ndarray]:
    """(N, N_z) for a named face: N is the outward xi-normal, N_z the
    z-gradient of the face constraint (zero on the xi1 faces, +-1/beta^2 on
    the moving ones)."""
    inv_b2 = 1.0 / params.beta_sq
    table = {
        "xi1+": ([1, 0, 0], [0.0, 0.0]),
        "xi1-": ([-1, 0, 0], [0.0, 0.0]),
        "xi2+": ([0, 1, 0], [inv_b2, 0.0]),
        "xi2-": ([0, -1, 0], [-inv_b2, 0.0]),
        "xi3+": ([0, 0, 1], [0.0, inv_b2]),
        "xi3-": ([0, 0, -1], [0.0, -inv_b2]),
    }
    if face not in table:
        raise ValueError(f"unknown face {face!r}")
    N, Nz = table[face]
    return np.array(N, dtype=float), np.array(Nz)


def normals(xi: ObservableCoords, z, cube: CubeBounds, params: PlantParams,
            eps_face: float = EPS_FACE_DEFAULT) -> tuple[np.ndarray, np.ndarray]:
    """Normals at a point lying on exactly one face. Multi-face contact is
    handled by the sequential projection, not here."""
    loc = cube_contains(xi, z, cube, params, eps_face)
    if len(loc.active_faces) != 1:
        raise ValueError(
            f"normals: expected exactly one active face, found {loc.active_faces}")
    return face_normals(loc.active_faces[0], params)


def project_derivative(xhat: ShiftedState, xhat_dot_raw: np.ndarray, z, z_dot,
                       cfg: ObserverConfig, params: PlantParams) -> np.ndarray:
    """Project the observer velocity so the estimate cannot exit the box.

    Works in xi space: on each active face with outward constraint rate
    N.xid + Nz.zd >= 0, the rate is removed along Gamma*N (oblique in the
    projection metric). Faces are visited in axis order and re-tested, so
    edge/corner contact resolves deterministically. Interior points return
    the raw velocity object unchanged.
    """
    b2 = params.beta_sq
    inv_b2 = 1.0 / b2
    z1, z2 = z
    R, ph = xhat.R, xhat.phi
    den = 1.0 + ph
    if abs(den) < cfg.eps_sing:
        raise ObservabilityError(f"project_derivative: phi_hat = {ph} ~ -1")

    xi = observability_map(xhat, z, params).as_array()
    m31 = -3.0 * den * inv_b2
    m32 = -(3.0 * ph + 1.5 * ph * ph + 3.0 * R) * inv_b2
    dR, dph, dps = xhat_dot_raw
    xid = np.array([
        dps,
        (dph - z_dot[0]) * inv_b2,
        m31 * dR + m32 * dph - inv_b2 * dps - inv_b2 * z_dot[1],
    ])
    lo, hi = cfg.cube.xi_intervals(z, params)
    # N_z . z_dot for the upper faces; lower faces negate.
    nzd = np.array([0.0, inv_b2 * z_dot[0], inv_b2 * z_dot[1]])
    G = cfg.Gamma
    eps = cfg.eps_face

    projected = False
    for _ in range(3):
        changed = False
        for i in range(3):
            if xi[i] >= hi[i] - eps:
                rate = xid[i] + nzd[i]
                if rate >= 0.0:
                    xid -= G[:, i] * (rate / G[i, i])
                    projected = changed = True
            elif xi[i] <= lo[i] + eps:
                rate = -xid[i] - nzd[i]
                if rate >= 0.0:
                    xid += G[:, i] * (rate / G[i, i])
                    projected = changed = True
        if not changed:
            break
    if not projected:
        return xhat_dot_raw

    r2 = xid[1] + inv_b2 * z_dot[0]
    r3 = xid[2] + inv_b2 * z_dot[1]
    wps = xid[0]
    wph = b2 * r2
    wR = (r3 + inv_b2 * wps - m32 * wph) / m31
    return np.array([wR, wph, wps])


def snap_into_cube(xhat: ShiftedState, z, cfg: ObserverConfig,
                   params: PlantParams) -> tuple[ShiftedState, float]:
    """Clamp the estimate back onto the box after a discrete step.

    Returns the (possibly unchanged) estimate and the pre-snap violation in
    the physical (psi, phi, q) coordinates. Discrete stepping can overshoot
    a face within one step; clamping recovers the slid state.
    """
    c = cfg.cube
    R, ph, ps = xhat.R, xhat.phi, xhat.psi
    q = _q_of(R, ph, ps)
    psn = min(max(ps, c.a1), c.b1)
    phn = min(max(ph, c.a2), c.b2)
    qn = min(max(q, c.a3), c.b3)
    viol = max(abs(psn - ps), abs(phn - ph), abs(qn - q))
    if viol == 0.0:
        return xhat, 0.0
    Rn = (-psn - 1.5 * phn * phn - 0.5 * phn ** 3 - qn) / (3.0 * (1.0 + phn))
    return ShiftedState(Rn, phn, psn), viol


def estimate_cube_bounds(scenario_set, gains, params: PlantParams,
                         margin: float = 0.1, t_final: float = 8.0) -> CubeBounds:
    """Estimate projection-box bounds by simulating the state-feedback
    closed loop (extended, backstepping) from each given initial condition
    and recording extrema of psi, phi and q. The box is inflated by
    `margin` of each axis width (plus a hair, so the extrema end up
    strictly inside). Non-convergent runs abort with a diagnostic.
    """
    from . import sim  # local import: sim depends on this module

    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for x0 in scenario_set:
        x0 = np.asarray(x0, dtype=float)
        cfg = sim.SimConfig(mode="extended-sf", t_final=t_final,
                            integrator="lsoda",
                            x0=ShiftedState(*x0), z0=(0.0, 0.0))
        traj = sim.simulate(cfg, gains=gains, params=params)
        xf = np.array([traj.R[-1], traj.phi[-1], traj.psi[-1]])
        if not np.all(np.isfinite(xf)) or np.linalg.norm(xf) > 10.0 * (
                1.0 + np.linalg.norm(x0)):
            raise RuntimeError(
                f"estimate_cube_bounds: run from {x0} did not converge")
        q = _q_of(traj.R, traj.phi, traj.psi)
        quantities = np.vstack([traj.psi, traj.phi, q])
        lo = np.minimum(lo, quantities.min(axis=1))
        hi = np.maximum(hi, quantities.max(axis=1))
    width = hi - lo
    pad = margin * width + 1e-12
    lo, hi = lo - pad, hi + pad
    return CubeBounds(lo[0], hi[0], max(lo[1], -0.999), hi[1], lo[2], hi[2])
