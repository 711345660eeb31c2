"""Dense numerical kernel: eigenvalues, definiteness, Lyapunov, Newton, ODE.

Everything here is plain float64 numpy on small matrices (n <= 32). All
routines are pure functions: identical inputs give bit-identical outputs.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

MAX_DIM = 32

EIG_TOL = 1e-9        # Hurwitz margin
PSD_TOL = 1e-9        # definiteness slack
ODE_RTOL = 1e-8
ODE_ATOL = 1e-10


class DimensionError(ValueError):
    """Shape/size mismatch in a matrix or vector argument."""


class NumericalError(RuntimeError):
    """A numeric routine failed (non-convergence, singularity, overflow)."""


class SpectrumCollisionError(NumericalError):
    """A and -A share an eigenvalue: the Lyapunov operator is singular."""


class ConvergenceError(NumericalError):
    """Iteration did not reach the requested tolerance."""


def _check_square(A, name="A"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {A.shape}")
    if A.shape[0] > MAX_DIM:
        raise DimensionError(f"{name} is {A.shape[0]}x{A.shape[0]}; kernel handles n <= {MAX_DIM}")
    if not np.all(np.isfinite(A)):
        raise NumericalError(f"{name} contains non-finite entries")
    return A


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues of a square matrix, with multiplicity."""

    values: np.ndarray
    max_real_part: float

    @property
    def is_hurwitz(self):
        return self.max_real_part < 0.0


def eigenvalues(A):
    """All eigenvalues of a square matrix (n <= 32), as a Spectrum.

    Backed by LAPACK's balanced Hessenberg-QR iteration, which is
    backward stable; good to ~1e-8 * ||A|| on well-conditioned inputs.
    """
    A = _check_square(A)
    try:
        vals = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK rarely fails here
        raise NumericalError(f"eigenvalue iteration failed: {exc}") from exc
    return Spectrum(values=vals, max_real_part=float(vals.real.max()))


def is_hurwitz(A, tol=EIG_TOL):
    """True iff every eigenvalue of A has real part < -tol."""
    return eigenvalues(A).max_real_part < -tol


def is_psd(S, tol=PSD_TOL):
    """True iff the symmetric part of S has smallest eigenvalue >= -tol."""
    S = _check_square(S, "S")
    sym = 0.5 * (S + S.T)
    return float(np.linalg.eigvalsh(sym).min()) >= -tol


def solve_lyapunov(A, Q):
    """Solve A X + X A^T = Q for symmetric X via Kronecker vectorization.

    Builds (I (x) A + A (x) I) vec(X) = vec(Q) and solves the dense n^2
    system; n <= 32 keeps it at most 1024 x 1024. Requires that A and -A
    share no eigenvalue (e.g. A Hurwitz, or the alpha-shifted Bass form).
    """
    A = _check_square(A)
    Q = _check_square(Q, "Q")
    n = A.shape[0]
    if Q.shape != A.shape:
        raise DimensionError(f"Q shape {Q.shape} does not match A shape {A.shape}")
    eye = np.eye(n)
    K = np.kron(eye, A) + np.kron(A, eye)   # column-major vec convention
    try:
        vecx = np.linalg.solve(K, Q.flatten(order="F"))
    except np.linalg.LinAlgError as exc:
        raise SpectrumCollisionError(
            "Lyapunov operator is singular: A and -A share an eigenvalue"
        ) from exc
    X = vecx.reshape((n, n), order="F")
    X = 0.5 * (X + X.T)
    resid = np.linalg.norm(A @ X + X @ A.T - Q, "fro")
    bound = 1e-10 * max(1.0, np.linalg.norm(Q, "fro"))
    if resid > 1e3 * bound:
        # far outside the contract: the Kronecker system was ill-conditioned
        raise SpectrumCollisionError(
            f"Lyapunov residual {resid:.3e} exceeds contract; "
            "spectra of A and -A are (nearly) colliding"
        )
    return X


def finite_diff_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of f at x; entrywise error O(h^2)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        step = h * max(1.0, abs(x[j]))
        xp = x.copy(); xp[j] += step
        xm = x.copy(); xm[j] -= step
        J[:, j] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * step)
    return J


def newton_solve(F, x0, tol=1e-10, max_iter=50, jac=None):
    """Damped Newton iteration for F(x) = 0.

    The Jacobian is obtained by finite differences unless `jac` is given.
    Steps are halved (up to 30 times) until the sup-norm of F decreases.
    """
    x = np.asarray(x0, dtype=float).copy()
    fx = np.asarray(F(x), dtype=float)
    if fx.size != x.size:
        raise DimensionError(f"residual size {fx.size} != unknown size {x.size}")
    for _ in range(max_iter):
        nrm = np.max(np.abs(fx))
        if nrm < tol:
            return x
        J = finite_diff_jacobian(F, x) if jac is None else np.asarray(jac(x), dtype=float)
        try:
            dx = np.linalg.solve(J, -fx)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular Jacobian in Newton iteration") from exc
        lam = 1.0
        for _ in range(30):
            x_new = x + lam * dx
            f_new = np.asarray(F(x_new), dtype=float)
            if np.max(np.abs(f_new)) < nrm:
                break
            lam *= 0.5
        x, fx = x_new, f_new
    nrm = np.max(np.abs(fx))
    if nrm < tol:
        return x
    raise ConvergenceError(
        f"Newton did not converge in {max_iter} iterations; final residual {nrm:.3e}"
    )


@dataclass
class Trajectory:
    """Time-stamped states with solver metadata."""

    t: np.ndarray
    x: np.ndarray                       # shape (len(t), n)
    meta: dict = field(default_factory=dict)

    def column(self, j):
        return self.x[:, j]


def integrate_ode(rhs, x0, t_span, rel_tol=ODE_RTOL, abs_tol=ODE_ATOL, t_eval=None):
    """Adaptive embedded Runge-Kutta 4(5) integration with dense output.

    Samples at `t_eval` if given, else at the accepted internal steps.
    Raises with a state dump if the right-hand side produces non-finite
    values, and with a stiffness diagnostic on step-size underflow.
    """
    x0 = np.asarray(x0, dtype=float)
    last_state = {"x": x0, "t": t_span[0]}

    def guarded(t, x):
        dx = np.asarray(rhs(t, x), dtype=float)
        if not np.all(np.isfinite(dx)):
            raise NumericalError(
                f"non-finite rhs at t={t:.6g}; state dump: {np.array2string(x, precision=6)}"
            )
        last_state["x"], last_state["t"] = x, t
        return dx

    sol = solve_ivp(guarded, t_span, x0, method="RK45", rtol=rel_tol, atol=abs_tol,
                    t_eval=t_eval, dense_output=t_eval is None)
    if not sol.success:
        raise NumericalError(
            f"integration failed near t={last_state['t']:.6g} "
            f"(likely stiffness / step-size underflow): {sol.message}"
        )
    meta = {
        "n_steps": int(sol.t.size if t_eval is None else sol.nfev // 6),
        "nfev": int(sol.nfev),
        "step_sizes": np.diff(sol.t) if t_eval is None else None,
        "rel_tol": rel_tol,
        "abs_tol": abs_tol,
    }
    return Trajectory(t=sol.t.copy(), x=sol.y.T.copy(), meta=meta)
