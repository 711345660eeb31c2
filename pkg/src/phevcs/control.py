"""Stabilizing parameter controllers for averaged pH systems.

Four certified constructions around an equilibrium (x_bar, theta_bar, u_bar):

  fixed_theta  theta frozen at theta_bar,
  ph_p         dynamic proportional extension with state (x, theta),
  ph_dae       stationary controller, theta eliminated algebraically,
  ph_pi        proportional-integral extension with state (x, xi).

Each construction certifies at build time that the extended right-hand
side vanishes at the equilibrium and that the equilibrium Jacobian is
Hurwitz. The structural dissipation (PSD of the symmetric part of the
extended coefficient matrix) is checked separately on sampled states.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .averaged import ShiftedHamiltonian, clamp_theta
from .numerics import (DimensionError, NumericalError, Spectrum, eigenvalues,
                       integrate_ode, solve_lyapunov)

log = logging.getLogger(__name__)

VARIANTS = ("fixed_theta", "ph_p", "ph_dae", "ph_pi")


class CertificateError(NumericalError):
    """A stability precondition or certificate failed."""


class StabilizabilityError(CertificateError):
    """rank[i w I - A, Dcal] < n at some imaginary-axis eigenvalue."""


@dataclass(frozen=True)
class GainSet:
    """Controller gains; K_theta is always symmetric positive definite."""

    k_theta: np.ndarray
    k_h: np.ndarray = None
    k_xi: np.ndarray = None
    gamma: float = None
    delta: float = None

    def __post_init__(self):
        kt = np.asarray(self.k_theta, dtype=float)
        if not np.allclose(kt, kt.T, rtol=0, atol=1e-12 * (1 + np.abs(kt).max())):
            raise CertificateError("K_theta must be symmetric")
        if np.linalg.eigvalsh(kt).min() <= 0:
            raise CertificateError("K_theta must be positive definite")
        for name, val in (("gamma", self.gamma), ("delta", self.delta)):
            if val is not None and val <= 0:
                raise CertificateError(f"{name} must be positive, got {val}")


def _as_k_theta(K_theta, k):
    if np.isscalar(K_theta):
        if K_theta <= 0:
            raise CertificateError(f"gamma must be positive, got {K_theta}")
        return float(K_theta) * np.eye(k)
    K = np.asarray(K_theta, dtype=float)
    if K.shape != (k, k):
        raise DimensionError(f"K_theta must be {k}x{k}, got {K.shape}")
    return K


def rank_condition(R_at_theta, Dcal, tol_factor=1e-10):
    """Numerical-rank test rk[R, Dcal] == n via SVD."""
    R = np.asarray(R_at_theta, dtype=float)
    D = np.asarray(Dcal, dtype=float)
    M = np.hstack([R, D])
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return R.shape[0] == 0
    return int(np.sum(s > tol_factor * s[0])) == R.shape[0]


@dataclass
class BassDesign:
    """Result of the Bass stabilization: gain, shift, and certificate."""

    k_hat: np.ndarray
    alpha: float
    closed_loop_spectrum: Spectrum
    lyapunov_residual: float


def bass_design(A, Dcal, alpha=None):
    """Stabilizing K_hat from (alpha I + A) K + K (alpha I + A^T) = 2 Dcal Dcal^T.

    alpha defaults to 1.1 times the largest singular value of A.
    Stabilizability is checked at the (finitely many) eigenvalues of A on
    or near the imaginary axis. Certifies K_hat > 0 and
    A - Dcal Dcal^T K_hat^{-1} Hurwitz before returning.
    """
    A = np.asarray(A, dtype=float)
    D = np.asarray(Dcal, dtype=float)
    n = A.shape[0]
    scale = max(1.0, np.abs(A).max())
    for lam in eigenvalues(A).values:
        if lam.real >= -1e-9 * scale:
            M = np.hstack([lam * np.eye(n) - A, D.astype(complex)])
            s = np.linalg.svd(M, compute_uv=False)
            if int(np.sum(s > 1e-10 * s[0])) < n:
                raise StabilizabilityError(
                    f"rank[i w I - A, Dcal] < n at w = {lam.imag:.6g}")
    smax = np.linalg.norm(A, 2)
    if alpha is None:
        alpha = 1.1 * smax if smax > 0 else 1.0
    if alpha <= smax:
        raise CertificateError(f"alpha = {alpha:.6g} must exceed sigma_max(A) = {smax:.6g}")
    K = solve_lyapunov(alpha * np.eye(n) + A, 2.0 * D @ D.T)
    resid = np.linalg.norm((alpha * np.eye(n) + A) @ K + K @ (alpha * np.eye(n) + A.T)
                           - 2.0 * D @ D.T, "fro")
    if np.linalg.eigvalsh(K).min() <= 0:
        raise CertificateError(
            f"Bass solution is not positive definite (min eig {np.linalg.eigvalsh(K).min():.3e})")
    spec = eigenvalues(A - D @ D.T @ np.linalg.inv(K))
    if spec.max_real_part >= 0:
        raise CertificateError(
            f"Bass certificate failed: closed-loop max Re = {spec.max_real_part:.3e}")
    return BassDesign(k_hat=K, alpha=float(alpha), closed_loop_spectrum=spec,
                      lyapunov_residual=float(resid))


class ClosedLoop:
    """A controller variant bound to an averaged system and equilibrium.

    The extended state z packs (x,), (x, theta) or (x, xi) depending on
    the variant; `unpack` returns the pieces, `theta_of` the parameter
    vector the plant sees. `storage` evaluates the shifted Hamiltonian of
    the variant (the Lyapunov candidate certified by the construction).
    """

    def __init__(self, variant, system, equilibrium, gains, theta_map=None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.system = system
        self.eq = equilibrium
        self.gains = gains
        self.shifted = ShiftedHamiltonian(H=system.H, x_bar=equilibrium.x_bar)
        self.dcal_bar = system.d_cal(equilibrium.x_bar)
        self._theta_map = theta_map          # ph_dae: theta = theta_bar + T grad_S
        self.plant_clamp = None              # optional saturation override
        n, k = system.n, system.k
        self.nz = n if variant in ("fixed_theta", "ph_dae") else n + k
        self.extended_state_layout = {
            "fixed_theta": f"z = x ({n})",
            "ph_p": f"z = (x ({n}), theta ({k}))",
            "ph_dae": f"z = x ({n}); theta = theta_bar + T grad_S(x)",
            "ph_pi": f"z = (x ({n}), xi ({k}))",
        }[variant]
        self._certify()

    # state packing --------------------------------------------------------
    def initial_state(self, x0=None):
        x0 = self.eq.x_bar if x0 is None else np.asarray(x0, dtype=float)
        if self.variant == "ph_p":
            return np.concatenate([x0, self.eq.theta_bar])
        if self.variant == "ph_pi":
            return np.concatenate([x0, np.zeros(self.system.k)])
        return x0.copy()

    def unpack(self, z):
        z = np.asarray(z, dtype=float)
        n = self.system.n
        if self.variant == "ph_p":
            return {"x": z[..., :n], "theta": z[..., n:]}
        if self.variant == "ph_pi":
            return {"x": z[..., :n], "xi": z[..., n:]}
        return {"x": z}

    def theta_of(self, z):
        parts = self.unpack(z)
        x = parts["x"]
        if self.variant == "fixed_theta":
            return self.eq.theta_bar.copy()
        if self.variant == "ph_p":
            return parts["theta"]
        gs = self.shifted.grad(x)
        if self.variant == "ph_dae":
            return self.eq.theta_bar + self._theta_map @ gs
        kt_inv = np.linalg.inv(self.gains.k_theta)
        return self.eq.theta_bar + kt_inv @ (self.gains.k_h @ gs + parts["xi"])

    # dynamics ---------------------------------------------------------------
    def rhs(self, z, u=None, clamp=False):
        """Extended right-hand side; u defaults to u_bar (zero offset).

        With clamp=True the plant evaluates a box-saturated theta while
        the controller rows keep the raw value (hardware duty limiting).
        """
        sys, eq = self.system, self.eq
        parts = self.unpack(np.asarray(z, dtype=float))
        x = parts["x"]
        gs = self.shifted.grad(x)
        du = np.zeros(sys.m) if u is None else np.asarray(u, dtype=float) - eq.u_bar
        theta = self.theta_of(z)
        if clamp:
            theta_plant = (self.plant_clamp(theta) if self.plant_clamp is not None
                           else clamp_theta(theta, sys.param_bounds, warn=False))
        else:
            theta_plant = theta
        dth = theta_plant - eq.theta_bar
        dx = sys.d_matrix(theta_plant) @ gs + self.dcal_bar @ dth + sys.B @ du
        if self.variant == "ph_p":
            dtheta = self.gains.k_h @ gs - self.gains.k_theta @ (parts["theta"] - eq.theta_bar)
            return np.concatenate([dx, dtheta])
        if self.variant == "ph_pi":
            dxi = self.gains.k_xi @ gs
            return np.concatenate([dx, dxi])
        return dx

    def storage(self, z):
        """Shifted Hamiltonian of the variant (S, S^e, or S^f)."""
        parts = self.unpack(np.asarray(z, dtype=float))
        val = self.shifted.value(parts["x"])
        if self.variant == "ph_p":
            dth = parts["theta"] - self.eq.theta_bar
            val += 0.5 * float(dth @ dth)
        elif self.variant == "ph_pi":
            val += 0.5 * float(parts["xi"] @ parts["xi"])
        return val

    # certificates -------------------------------------------------------
    def jacobian(self):
        """Analytic Jacobian of the extended RHS at the equilibrium."""
        sys, eq = self.system, self.eq
        n, k = sys.n, sys.k
        H = sys.H
        Dbar = sys.d_matrix(eq.theta_bar)
        Dc = self.dcal_bar
        if self.variant == "fixed_theta":
            return Dbar @ H
        if self.variant == "ph_p":
            top = np.hstack([Dbar @ H, Dc])
            bot = np.hstack([self.gains.k_h @ H, -self.gains.k_theta])
            return np.vstack([top, bot])
        if self.variant == "ph_dae":
            return (Dbar + Dc @ self._theta_map) @ H
        kt_inv = np.linalg.inv(self.gains.k_theta)
        F = Dbar + Dc @ kt_inv @ self.gains.k_h
        top = np.hstack([F @ H, Dc @ kt_inv])
        bot = np.hstack([self.gains.k_xi @ H, np.zeros((k, k))])
        return np.vstack([top, bot])

    def _certify(self):
        z_eq = self.initial_state()
        r = np.max(np.abs(self.rhs(z_eq)))
        if r > 1e-9:
            raise CertificateError(f"extended RHS at equilibrium is {r:.3e} (> 1e-9)")
        self.spectrum = eigenvalues(self.jacobian())
        if self.spectrum.max_real_part >= 0:
            raise CertificateError(
                f"{self.variant}: equilibrium Jacobian not Hurwitz "
                f"(max Re = {self.spectrum.max_real_part:.3e})")


def _check_schur(sys, eq, K_theta):
    Dc = sys.d_cal(eq.x_bar)
    A = sys.d_matrix(eq.theta_bar) - Dc @ np.linalg.solve(K_theta, Dc.T)
    spec = eigenvalues(A)
    if spec.max_real_part >= 0:
        raise CertificateError(
            "D(theta_bar) - Dcal K_theta^{-1} Dcal^T is not Hurwitz "
            f"(max Re = {spec.max_real_part:.3e})")
    return spec


def build_fixed_theta(sys, eq):
    """Shifted system with theta frozen at theta_bar; requires D(theta_bar) Hurwitz."""
    spec = eigenvalues(sys.d_matrix(eq.theta_bar))
    if spec.max_real_part >= 0:
        raise CertificateError(
            f"D(theta_bar) is not Hurwitz (max Re = {spec.max_real_part:.3e}); "
            "fixed-theta operation is not certified")
    gains = GainSet(k_theta=np.eye(sys.k))
    return ClosedLoop("fixed_theta", sys, eq, gains)


def build_ph_p(sys, eq, K_theta):
    """Proportional extension: theta' = -Dcal(x_bar)^T grad_S - K_theta (theta - theta_bar)."""
    Kt = _as_k_theta(K_theta, sys.k)
    _check_schur(sys, eq, Kt)
    Kh = -sys.d_cal(eq.x_bar).T
    gamma = float(K_theta) if np.isscalar(K_theta) else None
    gains = GainSet(k_theta=Kt, k_h=Kh, gamma=gamma)
    return ClosedLoop("ph_p", sys, eq, gains)


def build_ph_dae(sys, eq, K_theta, delta, delta_exponent=1):
    """Stationary controller with theta eliminated algebraically.

    The algebraic row 0 = K_H grad_S - K_theta (theta - theta_bar) with
    K_H = -delta Dcal(x_bar)^T gives theta = theta_bar + T grad_S,
    T = -delta^e K_theta^{-1} Dcal^T. The default exponent e = 1 keeps the
    elimination equivalent to the stationary controller itself;
    delta_exponent=2 selects the variant with an extra delta factor in the
    substitution. The closed loop is dx/dt = F(x) grad_S(x) + B (u - u_bar)
    whose decomposition F = J_hat - R_hat is exposed via dae_decomposition.
    """
    if delta <= 0:
        raise CertificateError(f"delta must be positive, got {delta}")
    if delta_exponent not in (1, 2):
        raise ValueError("delta_exponent must be 1 or 2")
    Kt = _as_k_theta(K_theta, sys.k)
    _check_schur(sys, eq, Kt)
    Dc = sys.d_cal(eq.x_bar)
    T = -(delta ** delta_exponent) * np.linalg.solve(Kt, Dc.T)
    gamma = float(K_theta) if np.isscalar(K_theta) else None
    gains = GainSet(k_theta=Kt, k_h=-delta * Dc.T, gamma=gamma, delta=float(delta))
    cl = ClosedLoop("ph_dae", sys, eq, gains, theta_map=T)
    cl.delta_exponent = delta_exponent
    return cl


def build_ph_pi(sys, eq, K_theta, delta):
    """PI extension with integral state xi and K_xi = -(Dcal K_theta^{-1})^T."""
    if delta <= 0:
        raise CertificateError(f"delta must be positive, got {delta}")
    Kt = _as_k_theta(K_theta, sys.k)
    _check_schur(sys, eq, Kt)
    Dc = sys.d_cal(eq.x_bar)
    Kh = -delta * Dc.T
    Kxi = -np.linalg.solve(Kt, Dc.T)        # = -(Dcal K_theta^{-1})^T for symmetric K_theta
    gamma = float(K_theta) if np.isscalar(K_theta) else None
    gains = GainSet(k_theta=Kt, k_h=Kh, k_xi=Kxi, gamma=gamma, delta=float(delta))
    return ClosedLoop("ph_pi", sys, eq, gains)


def dae_decomposition(cl, x):
    """(J_hat, R_hat) with F(x) = J_hat(x) - R_hat(x) for a ph_dae loop."""
    if cl.variant != "ph_dae":
        raise ValueError("dae_decomposition applies to ph_dae loops only")
    sys = cl.system
    theta = cl.theta_of(np.asarray(x, dtype=float))
    J_hat = sys.J + sum(t * Jj for t, Jj in zip(theta, sys.Js))
    R_theta = sys.R + sum(t * Rj for t, Rj in zip(theta, sys.Rs))
    R_hat = R_theta - 0.5 * (cl.dcal_bar @ cl._theta_map + (cl.dcal_bar @ cl._theta_map).T)
    return J_hat, R_hat


@dataclass
class DissipationReport:
    ok: bool
    entries: list = field(default_factory=list)   # (z, min_eig, ok)
    worst: float = np.inf

    def __bool__(self):
        return self.ok


def extended_dissipation_check(cl, sample_states, tol=1e-9):
    """PSD check of the variant's dissipation part at each sample.

    ph_p:   symmetric part of [[D(theta), Dcal(x_bar)], [-Dcal^T, -K_theta]]
    ph_dae: R_hat(x) of the F = J_hat - R_hat decomposition
    ph_pi:  R(theta) + delta Dcal K_theta^{-1} Dcal^T (the (x,x) dissipation
            block; the xi coupling is exactly skew by the K_xi choice)

    Violations are reported, not raised: far outside the operating box the
    local guarantee may genuinely fail.
    """
    if cl.variant not in ("ph_p", "ph_dae", "ph_pi"):
        raise ValueError(f"no extended dissipation structure for {cl.variant}")
    sys = cl.system
    entries = []
    worst = np.inf
    for z in sample_states:
        z = np.asarray(z, dtype=float)
        theta = cl.theta_of(z)
        R_theta = sys.R + sum(t * Rj for t, Rj in zip(theta, sys.Rs))
        if cl.variant == "ph_p":
            M = np.block([[R_theta, np.zeros((sys.n, sys.k))],
                          [np.zeros((sys.k, sys.n)), cl.gains.k_theta]])
        elif cl.variant == "ph_dae":
            _, M = dae_decomposition(cl, z)
        else:
            Dc = cl.dcal_bar
            M = R_theta + cl.gains.delta * Dc @ np.linalg.solve(cl.gains.k_theta, Dc.T)
        min_eig = float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())
        scale = max(1.0, float(np.abs(M).max()))
        ok = min_eig >= -tol * scale
        entries.append((z, min_eig, ok))
        worst = min(worst, min_eig)
    return DissipationReport(ok=all(e[2] for e in entries), entries=entries, worst=worst)


def closed_loop_jacobian(cl):
    """Analytic equilibrium Jacobian of the extended RHS, with its spectrum."""
    J = cl.jacobian()
    return J, eigenvalues(J)


def simulate(cl, x0=None, t_end=0.1, t_eval=None, u_fn=None,
             rel_tol=1e-8, abs_tol=1e-10, clamp=True):
    """Integrate a closed loop from x0 (plant state) over [0, t_end].

    theta is saturated at the parameter box inside the plant evaluation
    (clamp events are counted and logged once). Returns the extended-state
    trajectory; unpack columns via cl.unpack / cl.theta_of.
    """
    z0 = cl.initial_state(x0)
    events = {"clamped": 0}
    bounds = cl.system.param_bounds

    def rhs(t, z):
        if clamp:
            theta = cl.theta_of(z)
            lo = np.array([b[0] for b in bounds])
            hi = np.array([b[1] for b in bounds])
            if np.any(theta < lo) or np.any(theta > hi):
                events["clamped"] += 1
        u = None if u_fn is None else u_fn(t)
        return cl.rhs(z, u=u, clamp=clamp)

    traj = integrate_ode(rhs, z0, (0.0, t_end), rel_tol=rel_tol, abs_tol=abs_tol,
                         t_eval=t_eval)
    traj.meta["clamp_events"] = events["clamped"]
    traj.meta["variant"] = cl.variant
    if events["clamped"]:
        log.warning("%s: theta left the parameter box in %d rhs evaluations (saturated)",
                    cl.variant, events["clamped"])
    return traj


class CascadedExtension:
    """Structural template of the doubly-extended cascade (no certificate).

    theta is eliminated from 0 = K_H grad_S - K_d (theta - theta_bar)
    + K_xi1 xi1 + K_xi2 xi2; the integrators run xi1' = K_xi3 grad_S,
    xi2' = K_xi4 grad_S + K_xi5 xi1. Stability is NOT certified here; the
    certified concrete cascade lives in the charging-station module.
    """

    def __init__(self, sys, eq, K_d, K_xi1, K_xi2, K_xi3, K_xi4, K_xi5, K_H=None):
        self.system = sys
        self.eq = eq
        self.K_d = _as_k_theta(K_d, sys.k)
        self.K_H = -sys.d_cal(eq.x_bar).T if K_H is None else np.asarray(K_H, dtype=float)
        self.K = [np.asarray(M, dtype=float) for M in (K_xi1, K_xi2, K_xi3, K_xi4, K_xi5)]
        self.shifted = ShiftedHamiltonian(H=sys.H, x_bar=eq.x_bar)
        self.dcal_bar = sys.d_cal(eq.x_bar)
        self.n1 = self.K[0].shape[1]
        self.n2 = self.K[1].shape[1]

    def theta_of(self, z):
        x, xi1, xi2 = self.unpack(z)
        gs = self.shifted.grad(x)
        rhs = self.K_H @ gs + self.K[0] @ xi1 + self.K[1] @ xi2
        return self.eq.theta_bar + np.linalg.solve(self.K_d, rhs)

    def unpack(self, z):
        n = self.system.n
        return z[:n], z[n:n + self.n1], z[n + self.n1:]

    def initial_state(self, x0=None):
        x0 = self.eq.x_bar if x0 is None else np.asarray(x0, dtype=float)
        return np.concatenate([x0, np.zeros(self.n1 + self.n2)])

    def rhs(self, z, u=None):
        sys, eq = self.system, self.eq
        x, xi1, xi2 = self.unpack(np.asarray(z, dtype=float))
        gs = self.shifted.grad(x)
        du = np.zeros(sys.m) if u is None else np.asarray(u, dtype=float) - eq.u_bar
        theta = self.theta_of(z)
        dx = sys.d_matrix(theta) @ gs + self.dcal_bar @ (theta - eq.theta_bar) + sys.B @ du
        dxi1 = self.K[2] @ gs
        dxi2 = self.K[3] @ gs + self.K[4] @ xi1
        return np.concatenate([dx, dxi1, dxi2])
