"""Moore-Greitzer three-state (MG3) compression system model.

States: R (normalized stall-cell squared amplitude), Phi (mass flow),
Psi (plenum pressure rise). The cubic compressor characteristic peaks at
Phi = 1; the control goal is to operate there. Shifted coordinates move
that operating point to the origin:

    phi = Phi - 1,  psi = Psi - psi_c0 - 2,  u = Phi_T - 1

where Phi_T is the throttle mass flow (the actual control handle). All
closed-loop design is done in shifted coordinates; the unshifted form is
kept for reporting and consistency checks.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

# Negative R beyond this is rejected as unphysical; within it, it is
# treated as integration roundoff.
R_NEG_TOL = 1e-12


@dataclass(frozen=True)
class PlantParams:
    """Physical constants of the compression system.

    sigma: dimensionless rate constant of the stall-cell dynamics.
    beta: dimensionless plenum parameter (enters as 1/beta**2).
    psi_c0: constant offset of the compressor characteristic. It cancels
        out of the shifted dynamics, so it defaults to zero and matters
        only for unshifted reporting.
    """

    sigma: float = 7.0
    beta: float = 1.0 / math.sqrt(2.0)
    psi_c0: float = 0.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @property
    def beta_sq(self) -> float:
        return self.beta * self.beta


@dataclass(frozen=True)
class PlantState:
    """Unshifted state (R, Phi, Psi)."""

    R: float
    Phi: float
    Psi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.R, self.Phi, self.Psi])


@dataclass(frozen=True)
class ShiftedState:
    """Shifted state (R, phi, psi) with the peak equilibrium at the origin.

    No constructor-level R >= 0 check: observer estimates legitimately
    wander to small negative R. Physical-model entry points validate.
    """

    R: float
    phi: float
    psi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.R, self.phi, self.psi])

    @classmethod
    def from_array(cls, a) -> "ShiftedState":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class ExtendedState:
    """Shifted plant state plus the two input-side integrators.

    z1 is the applied control u = Phi_T - 1, z2 its rate.
    """

    x: ShiftedState
    z1: float
    z2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x.R, self.x.phi, self.x.psi, self.z1, self.z2])

    @classmethod
    def from_array(cls, a) -> "ExtendedState":
        return cls(ShiftedState(float(a[0]), float(a[1]), float(a[2])),
                   float(a[3]), float(a[4]))


def _check_R(R: float, where: str):
    if R < -R_NEG_TOL:
        raise ValueError(f"{where}: R = {R} is negative beyond tolerance {R_NEG_TOL}")


def shift_state(s: PlantState, params: PlantParams) -> ShiftedState:
    return ShiftedState(s.R, s.Phi - 1.0, s.Psi - params.psi_c0 - 2.0)


def unshift_state(x: ShiftedState, params: PlantParams) -> PlantState:
    return PlantState(x.R, x.phi + 1.0, x.psi + params.psi_c0 + 2.0)


def compressor_char(Phi: float, params: PlantParams) -> float:
    """Cubic steady-state compressor characteristic Psi_C(Phi).

    Peaks at Phi = 1 with value psi_c0 + 2.
    """
    return params.psi_c0 + 1.0 + 1.5 * Phi - 0.5 * Phi ** 3


def throttle_gamma(Phi_T: float, Psi: float) -> float:
    """Throttle opening gamma from the static throttle law Psi = (1 + Phi_T)**2 / gamma.

    Reporting-only: control design works with u = Phi_T - 1 directly.
    """
    if Psi <= 0:
        raise ValueError(f"throttle law needs Psi > 0, got {Psi} (out-of-model regime)")
    return (1.0 + Phi_T) ** 2 / Psi


def mg3_derivative(s: PlantState, Phi_T: float, params: PlantParams) -> np.ndarray:
    """Time derivative (Rdot, Phidot, Psidot) of the unshifted model."""
    _check_R(s.R, "mg3_derivative")
    Rdot = params.sigma * s.R * (1.0 - s.Phi ** 2 - s.R)
    Phidot = -s.Psi + compressor_char(s.Phi, params) - 3.0 * s.Phi * s.R
    Psidot = (s.Phi - Phi_T) / params.beta_sq
    return np.array([Rdot, Phidot, Psidot])


def shifted_derivative(x: ShiftedState, u: float, params: PlantParams) -> np.ndarray:
    """Time derivative (Rdot, phidot, psidot) in shifted coordinates.

    Equals the unshifted derivative conjugated by the coordinate shift
    (a property test relies on that).
    """
    _check_R(x.R, "shifted_derivative")
    R, ph, ps = x.R, x.phi, x.psi
    Rdot = -params.sigma * R * R - params.sigma * R * (2.0 * ph + ph * ph)
    phidot = -ps - 1.5 * ph * ph - 0.5 * ph ** 3 - 3.0 * R * ph - 3.0 * R
    psidot = -(u - ph) / params.beta_sq
    return np.array([Rdot, phidot, psidot])


def split_affine(x: ShiftedState, params: PlantParams) -> tuple[np.ndarray, np.ndarray]:
    """Control-affine decomposition xdot = f(x) + g(x) * u.

    g is constant: only the pressure state sees the throttle directly.
    """
    f = shifted_derivative(x, 0.0, params)
    g = np.array([0.0, 0.0, -1.0 / params.beta_sq])
    return f, g


def extended_derivative(e: ExtendedState, v: float, params: PlantParams) -> np.ndarray:
    """Derivative of the integrator-extended system: (xdot, z1dot, z2dot).

    The plant sees u = z1; z1dot = z2; z2dot = v (outer control).
    """
    f, g = split_affine(e.x, params)
    xdot = f + g * e.z1
    return np.array([xdot[0], xdot[1], xdot[2], e.z2, v])
