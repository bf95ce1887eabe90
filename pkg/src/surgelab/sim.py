"""Closed-loop simulation harness.

Modes wire the model to a controller (and optionally the projected
observer) into one right-hand side:

    open-loop        3 states, u held constant
    partial-sf       3 states, u = d1*psi - d2*phi
    full-sf          3 states, u = ubar(x)
    extended-sf      5 states, double integrator + backstepping v
    output-feedback  8 states, backstepping v from the projected estimate

Integrators: classical fixed-step RK4, embedded Dormand-Prince 4(5) with
step rejection, and scipy's LSODA. The gain k2 ~ 1e5 makes every loop that
applies ubar stiff (fastest mode ~ -k2), which caps explicit steps at
h ~ 2.8/k2 regardless of accuracy; long-horizon smooth runs therefore use
LSODA, while the projected-observer runs use fixed RK4 (the projection
makes the right-hand side only piecewise smooth, where adaptive error
control chatters and BDF theory does not apply).

The output-feedback stepper is written in plain scalars: at h = 1e-5 a
run takes hundreds of thousands of steps and ndarray overhead dominates
otherwise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import observer as obs
from .control import (ControllerGains, check_gains, full_state_feedback,
                      lyapunov_V)
from .model import PlantParams, ShiftedState

MODES = ("open-loop", "partial-sf", "full-sf", "extended-sf", "output-feedback")
R_CLAMP = 1e-12      # |R| below this is roundoff: clamp to 0
R_ABORT = 1e-9       # R below -this means the integration went wrong
H_MIN = 1e-12


class SimulationError(RuntimeError):
    pass


class GainValidationError(ValueError):
    """Gains failed the certificate and strict checking is on."""


@dataclass(frozen=True)
class SimConfig:
    mode: str
    t_final: float
    x0: ShiftedState = ShiftedState(0.0, 0.0, 0.0)
    z0: tuple[float, float] = (0.0, 0.0)
    xhat0: ShiftedState | None = None
    u0: float = 0.0                      # open-loop constant control
    integrator: str | None = None        # rk4 | rk45 | lsoda (None: per-mode default)
    h: float = 1e-5                      # fixed-step size
    abstol: float = 1e-9
    reltol: float = 1e-9
    h_max: float = math.inf
    record_points: int = 4000
    strict_gains: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.t_final < 0:
            raise ValueError("t_final must be nonnegative")
        if self.h <= 0 or self.abstol <= 0 or self.reltol <= 0:
            raise ValueError("step size and tolerances must be positive")
        if self.mode == "output-feedback" and self.xhat0 is None:
            raise ValueError("output-feedback mode requires xhat0")

    def resolved_integrator(self) -> str:
        if self.integrator is not None:
            if self.integrator not in ("rk4", "rk45", "lsoda"):
                raise ValueError(f"unknown integrator {self.integrator!r}")
            return self.integrator
        return "rk4" if self.mode == "output-feedback" else "rk45"


@dataclass
class Trajectory:
    """Recorded closed-loop run. Plant columns always present; z columns
    for the extended modes; estimate and xi-hat columns for
    output-feedback. meta carries per-step extrema tracked during the run."""

    mode: str
    t: np.ndarray
    R: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    u: np.ndarray
    gamma: np.ndarray
    V: np.ndarray
    z1: np.ndarray | None = None
    z2: np.ndarray | None = None
    Rhat: np.ndarray | None = None
    phihat: np.ndarray | None = None
    psihat: np.ndarray | None = None
    Vbar: np.ndarray | None = None
    xihat: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.t) > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("trajectory time stamps must be strictly increasing")
        if np.any(self.R < -R_CLAMP):
            raise ValueError("trajectory contains R < -1e-12")

    @property
    def has_observer(self) -> bool:
        return self.Rhat is not None

    def plant_states(self) -> np.ndarray:
        return np.column_stack([self.R, self.phi, self.psi])

    def estimate_states(self) -> np.ndarray:
        return np.column_stack([self.Rhat, self.phihat, self.psihat])

    def estimate_error(self) -> np.ndarray:
        return np.linalg.norm(self.plant_states() - self.estimate_states(), axis=1)

    def state_norm(self) -> np.ndarray:
        return np.linalg.norm(self.plant_states(), axis=1)


# ---------------------------------------------------------------------------
# generic integrators


def step_rk4(rhs, state: np.ndarray, t: float, h: float) -> np.ndarray:
    """One classical 4th-order Runge-Kutta step."""
    k1 = rhs(t, state)
    k2 = rhs(t + 0.5 * h, state + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, state + 0.5 * h * k2)
    k4 = rhs(t + h, state + h * k3)
    return state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# Dormand-Prince 5(4) tableau.
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


def integrate_adaptive(rhs, y0: np.ndarray, t_span: tuple[float, float],
                       abstol: float = 1e-9, reltol: float = 1e-9,
                       h_max: float = math.inf, h_init: float | None = None):
    """Embedded Dormand-Prince 4(5) integration with step rejection.

    Returns (t, y, stats) with one row per accepted step. Aborts when the
    controller drives h below 1e-12 (typically a finite-time blowup).
    """
    t0, tf = t_span
    y = np.asarray(y0, dtype=float).copy()
    t = t0
    ts = [t0]
    ys = [y.copy()]
    if tf == t0:
        return np.array(ts), np.array(ys), {"n_accepted": 0, "n_rejected": 0}
    h = h_init if h_init is not None else min((tf - t0) / 100.0, h_max)
    k = [None] * 7
    k[0] = rhs(t, y)
    n_acc = n_rej = 0
    while t < tf:
        h = min(h, tf - t, h_max)
        if h < H_MIN:
            raise SimulationError(
                f"integrate_adaptive: step size underflow (h = {h:.3e}) at t = {t}")
        for i in range(1, 7):
            yi = y.copy()
            for j, a in enumerate(_DP_A[i]):
                if a != 0.0:
                    yi += (h * a) * k[j]
            k[i] = rhs(t + _DP_C[i] * h, yi)
        y5 = y.copy()
        for j, b in enumerate(_DP_A[6]):
            if b != 0.0:
                y5 += (h * b) * k[j]
        err = np.zeros_like(y)
        for j, e in enumerate(_DP_E):
            if e != 0.0:
                err += (h * e) * k[j]
        scale = abstol + reltol * np.maximum(np.abs(y), np.abs(y5))
        enorm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if enorm <= 1.0 or not np.isfinite(enorm):
            if not np.isfinite(enorm) or not np.all(np.isfinite(y5)):
                h *= 0.2
                n_rej += 1
                k[0] = rhs(t, y)
                continue
            t += h
            y = y5
            ts.append(t)
            ys.append(y.copy())
            k[0] = k[6]  # first-same-as-last
            n_acc += 1
            fac = 5.0 if enorm == 0.0 else min(5.0, max(0.2, 0.9 * enorm ** -0.2))
            h *= fac
        else:
            n_rej += 1
            h *= max(0.2, 0.9 * enorm ** -0.2)
    return np.array(ts), np.array(ys), {"n_accepted": n_acc, "n_rejected": n_rej}


# ---------------------------------------------------------------------------
# scalar right-hand sides (tuples in, tuples out: the fixed-step hot path)


def _build_plant3_rhs(mode, gains: ControllerGains, params: PlantParams, u0: float):
    sigma = params.sigma
    inv_b2 = 1.0 / params.beta_sq
    b2 = params.beta_sq
    k1, k2 = gains.k1, gains.k2
    d1, d2 = gains.d1, gains.d2
    K = 1.0 - b2 * k1 * k2
    bk2 = b2 * k2
    hk = 3.0 * b2 * k1

    if mode == "open-loop":
        def control(R, ph, ps):
            return u0
    elif mode == "partial-sf":
        def control(R, ph, ps):
            return d1 * ps - d2 * ph
    else:  # full-sf
        def control(R, ph, ps):
            return (K + hk * R) * ph + bk2 * ps

    def rhs(t, y):
        R, ph, ps = y
        u = control(R, ph, ps)
        return (-sigma * R * (R + 2.0 * ph + ph * ph),
                -ps - ph * ph * (1.5 + 0.5 * ph) - 3.0 * R * (1.0 + ph),
                (ph - u) * inv_b2)
    return rhs, control


def _build_extended_rhs(gains: ControllerGains, params: PlantParams):
    sigma = params.sigma
    b2 = params.beta_sq
    inv_b2 = 1.0 / b2
    k1, k2, k3, k4 = gains.k1, gains.k2, gains.k3, gains.k4
    K = 1.0 - b2 * k1 * k2
    bk2 = b2 * k2
    hk = 3.0 * b2 * k1
    kk = -k3 - k2

    def v_of(R, ph, ps, z1, z2):
        FR = -sigma * R * (R + 2.0 * ph + ph * ph)
        Fph = -ps - ph * ph * (1.5 + 0.5 * ph) - 3.0 * R * (1.0 + ph)
        Fps = (ph - z1) * inv_b2
        guR = hk * ph
        guP = K + hk * R
        ub = guP * ph + bk2 * ps
        zt1 = z1 - ub
        al = -k3 * zt1 + inv_b2 * (ps - k1 * ph) + guR * FR + guP * Fph + bk2 * Fps
        zt2 = z2 - al
        a11 = -sigma * (2.0 * R + 2.0 * ph + ph * ph)
        a12 = -2.0 * sigma * R * (1.0 + ph)
        a21 = -3.0 * (1.0 + ph)
        a22 = -3.0 * ph - 1.5 * ph * ph - 3.0 * R
        dax0 = k3 * guR + hk * Fph + a11 * guR + a21 * guP
        dax1 = k3 * guP - k1 * inv_b2 + hk * FR + a12 * guR + a22 * guP + inv_b2 * bk2
        dax2 = k3 * bk2 + inv_b2 - guP
        adot = dax0 * FR + dax1 * Fph + dax2 * Fps + kk * z2
        return adot - zt1 - k4 * zt2, FR, Fph, Fps

    def rhs(t, y):
        R, ph, ps, z1, z2 = y
        v, FR, Fph, Fps = v_of(R, ph, ps, z1, z2)
        return (FR, Fph, Fps, z2, v)
    return rhs, v_of


def _build_output_feedback_rhs(gains: ControllerGains, ocfg: obs.ObserverConfig,
                               params: PlantParams):
    sigma = params.sigma
    b2 = params.beta_sq
    inv_b2 = 1.0 / b2
    rho = ocfg.rho
    l1, l2, l3 = (float(v) for v in ocfg.L)
    c1 = l1 / rho
    c2b = b2 * l2 / rho ** 2
    c3b = b2 * l3 / rho ** 3
    G = ocfg.Gamma
    g00, g01, g02 = G[0]
    g10, g11, g12 = G[1]
    g20, g21, g22 = G[2]
    A1, B1 = ocfg.cube.a1, ocfg.cube.b1
    A2, B2 = ocfg.cube.a2, ocfg.cube.b2
    A3, B3 = ocfg.cube.a3, ocfg.cube.b3
    epsf = ocfg.eps_face
    sing = 3.0 * ocfg.eps_sing
    _, v_of = _build_extended_rhs(gains, params)

    def rhs(t, y):
        R, ph, ps, z1, z2, Rh, phh, psh = y
        fR = -sigma * R * (R + 2.0 * ph + ph * ph)
        fph = -ps - ph * ph * (1.5 + 0.5 * ph) - 3.0 * R * (1.0 + ph)
        fps = (ph - z1) * inv_b2
        v, FRh, Fphh, Fpsh = v_of(Rh, phh, psh, z1, z2)
        den = 3.0 * (1.0 + phh)
        if abs(den) < sing:
            raise obs.ObservabilityError(
                f"output-feedback: phi_hat = {phh} reached the singular manifold")
        innov = ps - psh
        corrR = (c1 + (3.0 * phh + 3.0 * Rh + 1.5 * phh * phh) * c2b + c3b) / den
        dRh = FRh - corrR * innov
        dphh = Fphh + c2b * innov
        dpsh = Fpsh + c1 * innov
        # projection in observable coordinates
        qh = -psh - phh * phh * (1.5 + 0.5 * phh) - 3.0 * Rh * (1.0 + phh)
        xi1 = psh
        xi2 = (phh - z1) * inv_b2
        xi3 = (qh - z2) * inv_b2
        m31 = -den * inv_b2
        m32 = -(3.0 * phh + 1.5 * phh * phh + 3.0 * Rh) * inv_b2
        x1 = dpsh
        x2 = (dphh - z2) * inv_b2
        x3 = m31 * dRh + m32 * dphh - inv_b2 * dpsh - inv_b2 * v
        lo2 = (A2 - z1) * inv_b2
        hi2 = (B2 - z1) * inv_b2
        lo3 = (A3 - z2) * inv_b2
        hi3 = (B3 - z2) * inv_b2
        nz2 = inv_b2 * z2
        nz3 = inv_b2 * v
        projected = False
        for _ in range(3):
            changed = False
            if xi1 >= B1 - epsf:
                r = x1
                if r >= 0.0:
                    s = r / g00
                    x1 -= g00 * s; x2 -= g10 * s; x3 -= g20 * s
                    projected = changed = True
            elif xi1 <= A1 + epsf:
                r = -x1
                if r >= 0.0:
                    s = r / g00
                    x1 += g00 * s; x2 += g10 * s; x3 += g20 * s
                    projected = changed = True
            if xi2 >= hi2 - epsf:
                r = x2 + nz2
                if r >= 0.0:
                    s = r / g11
                    x1 -= g01 * s; x2 -= g11 * s; x3 -= g21 * s
                    projected = changed = True
            elif xi2 <= lo2 + epsf:
                r = -x2 - nz2
                if r >= 0.0:
                    s = r / g11
                    x1 += g01 * s; x2 += g11 * s; x3 += g21 * s
                    projected = changed = True
            if xi3 >= hi3 - epsf:
                r = x3 + nz3
                if r >= 0.0:
                    s = r / g22
                    x1 -= g02 * s; x2 -= g12 * s; x3 -= g22 * s
                    projected = changed = True
            elif xi3 <= lo3 + epsf:
                r = -x3 - nz3
                if r >= 0.0:
                    s = r / g22
                    x1 += g02 * s; x2 += g12 * s; x3 += g22 * s
                    projected = changed = True
            if not changed:
                break
        if projected:
            wps = x1
            wph = b2 * (x2 + nz2)
            wR = ((x3 + nz3) + inv_b2 * wps - m32 * wph) / m31
            dRh, dphh, dpsh = wR, wph, wps
        return (fR, fph, fps, z2, v, dRh, dphh, dpsh)
    return rhs


def _snap_estimate(y: tuple, cube: obs.CubeBounds) -> tuple[tuple, float]:
    """Clamp the estimate part of the 8-state vector into the cube."""
    Rh, phh, psh = y[5], y[6], y[7]
    qh = -psh - phh * phh * (1.5 + 0.5 * phh) - 3.0 * Rh * (1.0 + phh)
    psn = min(max(psh, cube.a1), cube.b1)
    phn = min(max(phh, cube.a2), cube.b2)
    qn = min(max(qh, cube.a3), cube.b3)
    if psn == psh and phn == phh and qn == qh:
        return y, 0.0
    drift = max(abs(psn - psh), abs(phn - phh), abs(qn - qh))
    Rn = (-psn - phn * phn * (1.5 + 0.5 * phn) - qn) / (3.0 * (1.0 + phn))
    return y[:5] + (Rn, phn, psn), drift


def _fixed_rk4_loop(rhs, y0: tuple, t_final: float, h: float, record_points: int,
                    cube: obs.CubeBounds | None):
    """Scalar fixed-step loop with per-step R clamping, cube snapping and
    extrema tracking."""
    n = int(round(t_final / h))
    nst = len(y0)
    y = y0
    t = 0.0
    stride = max(1, n // max(record_points, 2))
    ts = [0.0]
    ys = [y]
    h2, h6 = 0.5 * h, h / 6.0
    min_R = y[0]
    min_phihat = y[6] if nst == 8 else math.inf
    max_xhat = (y[5] ** 2 + y[6] ** 2 + y[7] ** 2) ** 0.5 if nst == 8 else 0.0
    max_drift = 0.0
    for i in range(n):
        K1 = rhs(t, y)
        K2 = rhs(t + h2, tuple(a + h2 * b for a, b in zip(y, K1)))
        K3 = rhs(t + h2, tuple(a + h2 * b for a, b in zip(y, K2)))
        K4 = rhs(t + h, tuple(a + h * b for a, b in zip(y, K3)))
        y = tuple(a + h6 * (p + 2.0 * q + 2.0 * r + s)
                  for a, p, q, r, s in zip(y, K1, K2, K3, K4))
        t = (i + 1) * h
        R = y[0]
        if R < 0.0:
            if R < -R_ABORT:
                raise SimulationError(f"R = {R} went negative at t = {t}")
            y = (0.0,) + y[1:]
        if not all(math.isfinite(c) for c in y):
            raise SimulationError(f"non-finite state at t = {t}: {y}")
        if cube is not None:
            y, drift = _snap_estimate(y, cube)
            if drift > max_drift:
                max_drift = drift
            if y[6] < min_phihat:
                min_phihat = y[6]
            nx = (y[5] ** 2 + y[6] ** 2 + y[7] ** 2) ** 0.5
            if nx > max_xhat:
                max_xhat = nx
        if y[0] < min_R:
            min_R = y[0]
        if (i + 1) % stride == 0 or i == n - 1:
            ts.append(t)
            ys.append(y)
    meta = {"n_steps": n, "min_R": min_R, "max_face_drift": max_drift}
    if nst == 8:
        meta["min_phihat"] = min_phihat
        meta["max_xhat_norm"] = max_xhat
    return np.array(ts), np.array(ys), meta


# ---------------------------------------------------------------------------
# column assembly


def _ubar_cols(R, ph, ps, gains, params):
    b2 = params.beta_sq
    return ((1.0 - b2 * gains.k1 * gains.k2) * ph + b2 * gains.k2 * ps
            + 3.0 * b2 * gains.k1 * R * ph)


def _alpha_cols(R, ph, ps, z1, gains, params):
    sigma, b2 = params.sigma, params.beta_sq
    inv_b2 = 1.0 / b2
    k1 = gains.k1
    FR = -sigma * R * (R + 2.0 * ph + ph * ph)
    Fph = -ps - ph * ph * (1.5 + 0.5 * ph) - 3.0 * R * (1.0 + ph)
    Fps = (ph - z1) * inv_b2
    guR = 3.0 * b2 * k1 * ph
    guP = 1.0 - b2 * k1 * gains.k2 + 3.0 * b2 * k1 * R
    ub = _ubar_cols(R, ph, ps, gains, params)
    return (-gains.k3 * (z1 - ub) + inv_b2 * (ps - k1 * ph)
            + guR * FR + guP * Fph + b2 * gains.k2 * Fps)


def _V_cols(R, ph, ps, gains):
    pt = ps - gains.k1 * ph
    return gains.C * R + 0.5 * ph ** 2 + gains.k1 / 8.0 * ph ** 4 + 0.5 * pt ** 2


def _assemble(mode, ts, ys, gains, params, ocfg, meta) -> Trajectory:
    ys = np.asarray(ys, dtype=float)
    R, ph, ps = ys[:, 0].copy(), ys[:, 1], ys[:, 2]
    if np.any(R < -R_ABORT):
        raise SimulationError("recorded R below abort threshold -1e-9")
    R[R < 0.0] = 0.0
    kw: dict = {}
    if mode in ("extended-sf", "output-feedback"):
        z1, z2 = ys[:, 3], ys[:, 4]
        u = z1
        kw["z1"], kw["z2"] = z1, z2
        alpha = _alpha_cols(R, ph, ps, z1, gains, params)
        zt1 = z1 - _ubar_cols(R, ph, ps, gains, params)
        zt2 = z2 - alpha
        kw["Vbar"] = _V_cols(R, ph, ps, gains) + 0.5 * zt1 ** 2 + 0.5 * zt2 ** 2
    elif mode == "full-sf":
        u = _ubar_cols(R, ph, ps, gains, params)
    elif mode == "partial-sf":
        u = gains.d1 * ps - gains.d2 * ph
    else:
        u = np.full_like(R, meta.get("u0", 0.0))
    if mode == "output-feedback":
        Rh, phh, psh = ys[:, 5], ys[:, 6], ys[:, 7]
        kw["Rhat"], kw["phihat"], kw["psihat"] = Rh, phh, psh
        b2 = params.beta_sq
        qh = -psh - phh ** 2 * (1.5 + 0.5 * phh) - 3.0 * Rh * (1.0 + phh)
        kw["xihat"] = np.column_stack([
            psh, (phh - ys[:, 3]) / b2, (qh - ys[:, 4]) / b2])
        lo = np.array([ocfg.cube.a1, ocfg.cube.a2, ocfg.cube.a3])
        hi = np.array([ocfg.cube.b1, ocfg.cube.b2, ocfg.cube.b3])
        phys = np.column_stack([psh, phh, qh])
        viol = np.maximum(phys - hi, 0.0) + np.maximum(lo - phys, 0.0)
        meta["max_cube_violation"] = float(viol.max())
    Psi = ps + params.psi_c0 + 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(Psi > 0, (2.0 + u) ** 2 / Psi, np.nan)
    return Trajectory(mode=mode, t=np.asarray(ts, dtype=float), R=R, phi=ph,
                      psi=ps, u=np.broadcast_to(u, R.shape).astype(float),
                      gamma=gamma, V=_V_cols(R, ph, ps, gains), meta=meta, **kw)


def _fastest_rate(mode, gains, ocfg) -> float:
    rate = 1.0
    if mode in ("full-sf", "extended-sf", "output-feedback"):
        rate = max(rate, gains.k2)
    if mode == "partial-sf":
        rate = max(rate, 2.0 * (1.0 + abs(gains.d1) + abs(gains.d2)))
    if ocfg is not None:
        rate = max(rate, 3.0 / ocfg.rho)
    return rate


def simulate(cfg: SimConfig, gains: ControllerGains | None = None,
             observer_cfg: obs.ObserverConfig | None = None,
             params: PlantParams | None = None) -> Trajectory:
    """Run one closed-loop scenario and record a Trajectory."""
    gains = gains if gains is not None else ControllerGains()
    params = params if params is not None else PlantParams()
    if cfg.x0.R < -R_CLAMP:
        raise ValueError(f"initial R = {cfg.x0.R} is negative")

    if cfg.mode in ("full-sf", "extended-sf", "output-feedback"):
        report = check_gains(gains.k1, gains.k2, gains.C, params)
        if not report.passed:
            msg = (f"gains (k1={gains.k1}, k2={gains.k2}, C={gains.C}) fail the"
                   f" certificate on: {', '.join(report.failed_names())}")
            if cfg.strict_gains:
                raise GainValidationError(msg + " (pass strict_gains=False to override)")
            warnings.warn(msg + "; continuing without the stability guarantee")
    if cfg.mode == "output-feedback" and observer_cfg is None:
        raise ValueError("output-feedback mode requires an ObserverConfig")

    integ = cfg.resolved_integrator()
    rate = _fastest_rate(cfg.mode, gains, observer_cfg)
    if integ == "rk4" and cfg.h * rate > 2.5:
        warnings.warn(
            f"fixed step h = {cfg.h} is large for the fastest closed-loop rate"
            f" ~{rate:.2e} (h*rate = {cfg.h * rate:.2f} > 2.5): expect instability")
    if integ == "rk45" and cfg.t_final * rate > 5e7:
        warnings.warn(
            f"horizon {cfg.t_final} with stiffness ~{rate:.1e} needs >"
            f" {cfg.t_final * rate / 2.8:.1e} explicit steps; consider integrator='lsoda'")

    meta: dict = {"integrator": integ, "u0": cfg.u0}
    x0 = cfg.x0

    if cfg.mode in ("open-loop", "partial-sf", "full-sf"):
        rhs_t, _ = _build_plant3_rhs(cfg.mode, gains, params, cfg.u0)
        y0 = (x0.R, x0.phi, x0.psi)
    elif cfg.mode == "extended-sf":
        rhs_t, _ = _build_extended_rhs(gains, params)
        y0 = (x0.R, x0.phi, x0.psi, cfg.z0[0], cfg.z0[1])
    else:
        rhs_t = _build_output_feedback_rhs(gains, observer_cfg, params)
        xh = cfg.xhat0
        y0 = (x0.R, x0.phi, x0.psi, cfg.z0[0], cfg.z0[1], xh.R, xh.phi, xh.psi)

    if cfg.t_final == 0.0:
        meta["n_steps"] = 0
        return _assemble(cfg.mode, [0.0], [y0], gains, params, observer_cfg, meta)

    if integ == "rk4":
        cube = observer_cfg.cube if cfg.mode == "output-feedback" else None
        ts, ys, m = _fixed_rk4_loop(rhs_t, y0, cfg.t_final, cfg.h,
                                    cfg.record_points, cube)
        meta.update(m)
    elif integ == "rk45":
        def rhs_a(t, y):
            return np.asarray(rhs_t(t, tuple(y)))
        ts, ys, stats = integrate_adaptive(rhs_a, np.array(y0), (0.0, cfg.t_final),
                                           cfg.abstol, cfg.reltol, cfg.h_max)
        meta.update(stats)
        meta["min_R"] = float(ys[:, 0].min())
    else:
        from scipy.integrate import solve_ivp

        def rhs_a(t, y):
            return rhs_t(t, tuple(y))
        if cfg.t_final > 10.0:
            t_eval = np.concatenate([[0.0],
                                     np.geomspace(1e-4, cfg.t_final,
                                                  max(cfg.record_points, 16))])
        else:
            t_eval = np.linspace(0.0, cfg.t_final, max(cfg.record_points, 16))
        sol = solve_ivp(rhs_a, (0.0, cfg.t_final), np.array(y0), method="LSODA",
                        rtol=cfg.reltol, atol=min(cfg.abstol, 1e-14), t_eval=t_eval)
        if not sol.success:
            raise SimulationError(f"LSODA failed: {sol.message}")
        ts, ys = sol.t, sol.y.T
        meta["n_steps"] = int(sol.nfev)
        meta["min_R"] = float(ys[:, 0].min())

    return _assemble(cfg.mode, ts, ys, gains, params, observer_cfg, meta)
