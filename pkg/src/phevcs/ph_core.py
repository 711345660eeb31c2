"""Generic port-Hamiltonian state-space systems and their interconnection.

A system is

    dx/dt = (J - R)(x) grad_H(x) + (B - P)(x) u
    y     = (B + P)^T(x) grad_H(x) + (S - N)(x) u

with quadratic Hamiltonian H(x) = x^T H x / 2, J and N skew, the block
[[R, P], [P^T, S]] positive semidefinite, and H symmetric positive
definite. Coefficients may be constant matrices or callables of the state.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, is_psd

SKEW_TOL = 1e-12      # relative skewness tolerance
BLOCK_TOL = 1e-9      # dissipation-block PSD slack


class ValidationError(ValueError):
    """A structural pH assumption is violated."""


class CouplingError(ValueError):
    """Interconnection ports do not match (roles or dimensions)."""


def _matfun(M, n_rows, n_cols, name):
    """Normalize a constant matrix or callable to (callable, constant_or_None)."""
    if M is None:
        Z = np.zeros((n_rows, n_cols))
        return (lambda x, _Z=Z: _Z), Z
    if callable(M):
        return M, None
    M = np.asarray(M, dtype=float)
    if M.shape != (n_rows, n_cols):
        raise DimensionError(f"{name} must be {n_rows}x{n_cols}, got {M.shape}")
    return (lambda x, _M=M: _M), M


@dataclass(frozen=True)
class PortLabeling:
    """Which input columns belong to the in/out port and what they carry.

    `in_role` / `out_role` name the signal the port *receives* ("voltage"
    or "current"); the collocated output is then the complementary signal.
    """

    in_cols: tuple
    out_cols: tuple
    in_role: str = "voltage"
    out_role: str = "current"

    def __post_init__(self):
        if set(self.in_cols) & set(self.out_cols):
            raise ValidationError("in/out port column sets must be disjoint")
        for role in (self.in_role, self.out_role):
            if role not in ("voltage", "current"):
                raise ValidationError(f"unknown port role {role!r}")


class PhSystem:
    """pH system with state-dependent coefficients and a constant H.

    Constant coefficients keep a fast path (the constant is stored and
    reused); state-dependent ones are arbitrary callables x -> matrix.
    """

    def __init__(self, n, m, J=None, R=None, B=None, P=None, S=None, N=None,
                 H=None, ports=None):
        self.n = int(n)
        self.m = int(m)
        self._J, self.J_const = _matfun(J, n, n, "J")
        self._R, self.R_const = _matfun(R, n, n, "R")
        self._B, self.B_const = _matfun(B, n, m, "B")
        self._P, self.P_const = _matfun(P, n, m, "P")
        self._S, self.S_const = _matfun(S, m, m, "S")
        self._N, self.N_const = _matfun(N, m, m, "N")
        if H is None:
            H = np.eye(n)
        H = np.asarray(H, dtype=float)
        if H.shape != (n, n):
            raise DimensionError(f"H must be {n}x{n}, got {H.shape}")
        self.H = H
        self.ports = ports

    # coefficient access -------------------------------------------------
    def J(self, x):
        return self._J(np.asarray(x, dtype=float))

    def R(self, x):
        return self._R(np.asarray(x, dtype=float))

    def B(self, x):
        return self._B(np.asarray(x, dtype=float))

    def P(self, x):
        return self._P(np.asarray(x, dtype=float))

    def S(self, x):
        return self._S(np.asarray(x, dtype=float))

    def N(self, x):
        return self._N(np.asarray(x, dtype=float))

    @property
    def is_constant(self):
        return all(M is not None for M in
                   (self.J_const, self.R_const, self.B_const,
                    self.P_const, self.S_const, self.N_const))

    # energy -------------------------------------------------------------
    def hamiltonian(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * float(x @ self.H @ x)

    def grad_hamiltonian(self, x):
        return self.H @ np.asarray(x, dtype=float)

    # dynamics -----------------------------------------------------------
    def rhs(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.size != self.n or u.size != self.m:
            raise DimensionError(f"expected state size {self.n} and input size {self.m}, "
                                 f"got {x.size} and {u.size}")
        g = self.H @ x
        return (self.J(x) - self.R(x)) @ g + (self.B(x) - self.P(x)) @ u

    def output(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.size != self.n or u.size != self.m:
            raise DimensionError(f"expected state size {self.n} and input size {self.m}, "
                                 f"got {x.size} and {u.size}")
        g = self.H @ x
        return (self.B(x) + self.P(x)).T @ g + (self.S(x) - self.N(x)) @ u

    def power_balance_residual(self, x, u):
        """(supplied, dissipated, stored_rate) with supplied = u^T y.

        Contract: stored_rate = supplied - dissipated to rounding, and
        dissipated >= -tol * scale with scale = 1 + |supplied| + |dissipated|.
        """
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        g = self.H @ x
        supplied = float(u @ self.output(x, u))
        z = np.concatenate([g, u])
        W = np.block([[self.R(x), self.P(x)], [self.P(x).T, self.S(x)]])
        dissipated = float(z @ W @ z)
        stored_rate = float(g @ self.rhs(x, u))
        return supplied, dissipated, stored_rate


@dataclass
class ValidationReport:
    ok: bool
    worst: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def validate(sys, sample_states, raise_on_failure=False):
    """Check skewness of J and N, PSD of the dissipation block, and H > 0.

    Every check is evaluated at every sample state; the report records the
    worst violation per matrix. With raise_on_failure, the first offending
    matrix raises a ValidationError naming it and the state.
    """
    samples = [np.asarray(s, dtype=float) for s in sample_states]
    if not samples:
        raise ValidationError("sample_states must be non-empty")
    worst = {"J_skew": 0.0, "N_skew": 0.0, "dissipation_min_eig": np.inf, "H_min_eig": np.inf}
    failures = []

    h_eigs = np.linalg.eigvalsh(0.5 * (sys.H + sys.H.T))
    worst["H_min_eig"] = float(h_eigs.min())
    if not np.allclose(sys.H, sys.H.T, rtol=0, atol=SKEW_TOL * (1 + np.abs(sys.H).max())):
        failures.append(("H", None, "H is not symmetric"))
    if h_eigs.min() <= 0:
        failures.append(("H", None, f"H has non-positive eigenvalue {h_eigs.min():.3e}"))

    for x in samples:
        for name, M in (("J", sys.J(x)), ("N", sys.N(x))):
            scale = max(1.0, np.abs(M).max())
            dev = np.abs(M + M.T).max() / scale
            key = f"{name}_skew"
            if dev > worst[key]:
                worst[key] = float(dev)
            if dev > SKEW_TOL * 10:
                failures.append((name, x, f"{name} skewness violation {dev:.3e}"))
        W = np.block([[sys.R(x), sys.P(x)], [sys.P(x).T, sys.S(x)]])
        w_eigs = np.linalg.eigvalsh(0.5 * (W + W.T))
        if w_eigs.min() < worst["dissipation_min_eig"]:
            worst["dissipation_min_eig"] = float(w_eigs.min())
        if w_eigs.min() < -BLOCK_TOL:
            name = "R" if sys.P_const is not None and not np.any(sys.P_const) else "[[R,P],[P^T,S]]"
            failures.append((name, x,
                             f"dissipation block min eigenvalue {w_eigs.min():.3e}"))

    report = ValidationReport(ok=not failures, worst=worst, failures=failures)
    if failures and raise_on_failure:
        name, x, msg = failures[0]
        loc = "" if x is None else f" at state {np.array2string(np.asarray(x), precision=4)}"
        raise ValidationError(f"{msg} (matrix {name}){loc}")
    return report


def interconnect(sys1, sys2, gain=1.0):
    """Power-conserving pairwise interconnection of two pH systems.

    sys1's out-port receives the (negated) current of sys2's in-port and
    returns its voltage; sys2's in-port receives that voltage:

        u_{o,1} = -gain * B_{i,2}^T grad_H2,   u_{i,2} = +gain * B_{o,1}^T grad_H1

    giving the composite structure blocks [-gain B_{o,1} B_{i,2}^T;
    +gain B_{i,2} B_{o,1}^T]. With gain=1 this is exactly the textbook
    current/voltage coupling; gain != 1 is an ideal-transformer coupling
    (power is conserved for every gain). Remaining external ports are
    sys1's in-port columns followed by sys2's out-port columns.
    """
    for s, which in ((sys1, "sys1"), (sys2, "sys2")):
        if s.ports is None:
            raise CouplingError(f"{which} carries no PortLabeling")
        if not s.is_constant:
            raise CouplingError("interconnect requires constant-coefficient systems")
        for M in (s.P_const, s.S_const, s.N_const):
            if np.any(M):
                raise CouplingError("interconnect requires P = S = N = 0 at the ports")
    if sys1.ports.out_role != "current" or sys2.ports.in_role != "voltage":
        raise CouplingError(
            "unsupported port roles: sys1 out-port must receive a current and "
            "sys2 in-port a voltage (the current/voltage coupling of the mixed type)")
    o1 = list(sys1.ports.out_cols)
    i2 = list(sys2.ports.in_cols)
    if len(o1) != len(i2):
        raise CouplingError(f"port widths differ: {len(o1)} vs {len(i2)}")

    n1, n2 = sys1.n, sys2.n
    Bo1 = sys1.B_const[:, o1]
    Bi2 = sys2.B_const[:, i2]
    JR = np.zeros((n1 + n2, n1 + n2))
    JR[:n1, :n1] = sys1.J_const - sys1.R_const
    JR[n1:, n1:] = sys2.J_const - sys2.R_const
    JR[:n1, n1:] = -gain * Bo1 @ Bi2.T
    JR[n1:, :n1] = +gain * Bi2 @ Bo1.T

    i1 = list(sys1.ports.in_cols)
    o2 = list(sys2.ports.out_cols)
    B = np.zeros((n1 + n2, len(i1) + len(o2)))
    B[:n1, :len(i1)] = sys1.B_const[:, i1]
    B[n1:, len(i1):] = sys2.B_const[:, o2]

    J = 0.5 * (JR - JR.T)
    R = -0.5 * (JR + JR.T)
    H = np.zeros((n1 + n2, n1 + n2))
    H[:n1, :n1] = sys1.H
    H[n1:, n1:] = sys2.H
    ports = PortLabeling(in_cols=tuple(range(len(i1))),
                         out_cols=tuple(range(len(i1), len(i1) + len(o2))),
                         in_role=sys1.ports.in_role, out_role=sys2.ports.out_role)
    return PhSystem(n1 + n2, len(i1) + len(o2), J=J, R=R, B=B, H=H, ports=ports)


def permute_states(sys, order):
    """Reindex a constant-coefficient system's state as x_new = x[order]."""
    if not sys.is_constant:
        raise DimensionError("permute_states requires constant coefficients")
    idx = np.asarray(order, dtype=int)
    if sorted(idx.tolist()) != list(range(sys.n)):
        raise DimensionError("order must be a permutation of range(n)")
    return PhSystem(sys.n, sys.m,
                    J=sys.J_const[np.ix_(idx, idx)],
                    R=sys.R_const[np.ix_(idx, idx)],
                    B=sys.B_const[idx, :],
                    P=sys.P_const[idx, :],
                    S=sys.S_const, N=sys.N_const,
                    H=sys.H[np.ix_(idx, idx)],
                    ports=sys.ports)
