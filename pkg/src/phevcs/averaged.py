"""Averaged pH systems: constant structure plus k parameter-weighted pairs.

    dx/dt = D(theta) grad_H(x) + B u,      D(theta) = J - R + sum_j theta_j (J_j - R_j)
    y     = B^T grad_H(x)

theta collects duty ratios (bounds [0, 1]) and modulation indexes
(bounds [-1, 1]). The bilinear refactoring D(theta) grad_H = (J-R) grad_H
+ Dcal(x) theta with Dcal(x) = [D_1 grad_H, ..., D_k grad_H] underpins the
controller designs in `control`.
"""

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, NumericalError
from .ph_core import PhSystem, ValidationError

log = logging.getLogger(__name__)

COND_SINGULAR = 1e12     # condition number beyond which D(theta) counts as singular
RESIDUAL_TOL = 1e-9


def duty_from_modulation(m):
    """Map a modulation index in [-1, 1] to a duty ratio in [0, 1]."""
    return (np.asarray(m, dtype=float) + 1.0) / 2.0


def modulation_from_duty(d):
    """Inverse of duty_from_modulation."""
    return 2.0 * np.asarray(d, dtype=float) - 1.0


def clamp_theta(theta, bounds, warn=True):
    """Saturate theta at the parameter box, mimicking hardware duty limiting."""
    theta = np.asarray(theta, dtype=float)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    clamped = np.clip(theta, lo, hi)
    if warn and not np.array_equal(clamped, theta):
        log.warning("theta clamped to parameter bounds: %s -> %s", theta, clamped)
    return clamped


class AveragedPhSystem:
    """Averaged pH system with constant matrices and k control parameters."""

    def __init__(self, J, R, Js, Rs, B, H, param_bounds=None):
        J = np.asarray(J, dtype=float)
        R = np.asarray(R, dtype=float)
        self.n = J.shape[0]
        self.J, self.R = J, R
        self.Js = [np.asarray(M, dtype=float) for M in Js]
        self.Rs = [np.asarray(M, dtype=float) for M in Rs]
        self.k = len(self.Js)
        if len(self.Rs) != self.k:
            raise DimensionError("Js and Rs must have equal length")
        self.B = np.asarray(B, dtype=float)
        self.m = self.B.shape[1]
        self.H = np.asarray(H, dtype=float)
        if param_bounds is None:
            param_bounds = [(0.0, 1.0)] * self.k
        self.param_bounds = [tuple(map(float, b)) for b in param_bounds]
        self._check_structure()
        self.Ds = [Jj - Rj for Jj, Rj in zip(self.Js, self.Rs)]

    def _check_structure(self):
        def skew(M, name):
            if np.abs(M + M.T).max() > 1e-12 * max(1.0, np.abs(M).max()):
                raise ValidationError(f"{name} is not skew-symmetric")

        def psd(M, name):
            if np.linalg.eigvalsh(0.5 * (M + M.T)).min() < -1e-9 * max(1.0, np.abs(M).max()):
                raise ValidationError(f"{name} is not positive semidefinite")

        skew(self.J, "J")
        psd(self.R, "R")
        for j, (Jj, Rj) in enumerate(zip(self.Js, self.Rs)):
            skew(Jj, f"J_{j + 1}")
            psd(Rj, f"R_{j + 1}")
        if np.linalg.eigvalsh(0.5 * (self.H + self.H.T)).min() <= 0:
            raise ValidationError("H is not positive definite")
        # R + sum theta_j R_j must stay PSD over the box; checking the
        # corners is exhaustive since the map is affine in theta
        for corner in itertools.product(*self.param_bounds):
            Rt = self.R + sum(t * Rj for t, Rj in zip(corner, self.Rs))
            psd(Rt, f"R(theta) at corner {corner}")

    # structure ----------------------------------------------------------
    def d_matrix(self, theta):
        """D(theta) = J - R + sum_j theta_j (J_j - R_j); no bound clamping."""
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.k:
            raise DimensionError(f"theta must have length {self.k}, got {theta.size}")
        D = self.J - self.R
        for t, Dj in zip(theta, self.Ds):
            D = D + t * Dj
        return D

    def d_cal(self, x):
        """n x k matrix whose column j is (J_j - R_j) H x."""
        x = np.asarray(x, dtype=float)
        if x.size != self.n:
            raise DimensionError(f"x must have length {self.n}, got {x.size}")
        g = self.H @ x
        return np.column_stack([Dj @ g for Dj in self.Ds])

    def grad_hamiltonian(self, x):
        return self.H @ np.asarray(x, dtype=float)

    def hamiltonian(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * float(x @ self.H @ x)

    # dynamics -----------------------------------------------------------
    def rhs(self, x, theta, u):
        """D(theta) H x + B u (identically (J-R) H x + Dcal(x) theta + B u)."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if u.size != self.m:
            raise DimensionError(f"u must have length {self.m}, got {u.size}")
        return self.d_matrix(theta) @ (self.H @ x) + self.B @ u

    def output(self, x):
        return self.B.T @ (self.H @ np.asarray(x, dtype=float))

    def at_theta(self, theta, ports=None):
        """Freeze theta and return the plain PhSystem it induces."""
        theta = np.asarray(theta, dtype=float)
        J = self.J + sum(t * Jj for t, Jj in zip(theta, self.Js))
        R = self.R + sum(t * Rj for t, Rj in zip(theta, self.Rs))
        return PhSystem(self.n, self.m, J=J, R=R, B=self.B, H=self.H, ports=ports)


@dataclass(frozen=True)
class Equilibrium:
    """Steady state (x_bar, theta_bar, u_bar) with its residual certificate."""

    x_bar: np.ndarray
    theta_bar: np.ndarray
    u_bar: np.ndarray
    residual: float

    def __post_init__(self):
        scale = 1.0 + float(np.max(np.abs(self.u_bar))) if self.u_bar.size else 1.0
        if not np.isfinite(self.residual):
            raise NumericalError("equilibrium residual is not finite")


@dataclass(frozen=True)
class ShiftedHamiltonian:
    """Bregman shift S(x) = H(x - x_bar) of a quadratic Hamiltonian."""

    H: np.ndarray
    x_bar: np.ndarray

    def value(self, x):
        d = np.asarray(x, dtype=float) - self.x_bar
        return 0.5 * float(d @ self.H @ d)

    def grad(self, x):
        return self.H @ (np.asarray(x, dtype=float) - self.x_bar)


class SingularSteadyStateError(NumericalError):
    """D(theta_bar) is numerically singular; try steady_state_from_setpoints."""


def steady_state_from_theta(sys, theta_bar, u_bar):
    """x_bar = -H^{-1} D(theta_bar)^{-1} B u_bar, with residual certificate."""
    theta_bar = np.asarray(theta_bar, dtype=float)
    u_bar = np.asarray(u_bar, dtype=float)
    D = sys.d_matrix(theta_bar)
    cond = np.linalg.cond(D)
    if not np.isfinite(cond) or cond > COND_SINGULAR:
        raise SingularSteadyStateError(
            f"D(theta_bar) has condition number {cond:.3e}; "
            "consider steady_state_from_setpoints")
    g = np.linalg.solve(D, -sys.B @ u_bar)
    x_bar = np.linalg.solve(sys.H, g)
    residual = float(np.max(np.abs(D @ (sys.H @ x_bar) + sys.B @ u_bar)))
    return Equilibrium(x_bar=x_bar, theta_bar=theta_bar, u_bar=u_bar, residual=residual)


def steady_state_from_setpoints(sys, pinned, u_bar, x0=None, theta0=None,
                                tol=RESIDUAL_TOL, max_iter=80):
    """Recover (x_bar, theta_bar) from k pinned quantities by Newton iteration.

    `pinned` is a list of (kind, index, value) with kind in:
      "x"     - pins a state component,
      "grad"  - pins a gradient component (H x)_i, i.e. a port quantity,
      "theta" - pins a parameter.
    The number of pins must equal k so the system is square.
    """
    from .numerics import newton_solve

    u_bar = np.asarray(u_bar, dtype=float)
    if len(pinned) != sys.k:
        raise DimensionError(f"need exactly k={sys.k} pins, got {len(pinned)}")
    n, k = sys.n, sys.k
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    theta0 = (np.array([(lo + hi) / 2 for lo, hi in sys.param_bounds])
              if theta0 is None else np.asarray(theta0, dtype=float))

    def residual(z):
        x, theta = z[:n], z[n:]
        r = np.empty(n + k)
        r[:n] = sys.rhs(x, theta, u_bar)
        g = sys.H @ x
        for i, (kind, idx, val) in enumerate(pinned):
            if kind == "x":
                r[n + i] = x[idx] - val
            elif kind == "grad":
                r[n + i] = g[idx] - val
            elif kind == "theta":
                r[n + i] = theta[idx] - val
            else:
                raise DimensionError(f"unknown pin kind {kind!r}")
        return r

    z = newton_solve(residual, np.concatenate([x0, theta0]), tol=tol, max_iter=max_iter)
    x_bar, theta_bar = z[:n], z[n:]
    res = float(np.max(np.abs(sys.rhs(x_bar, theta_bar, u_bar))))
    return Equilibrium(x_bar=x_bar, theta_bar=theta_bar, u_bar=u_bar, residual=res)
