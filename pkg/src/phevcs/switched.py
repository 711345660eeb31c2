"""PWM-switched counterpart of the averaged model.

The switched model is the averaged model evaluated at instantaneous
switch positions: the DC/DC duty ratio is replaced by its binary signal
and the modulation indexes by the dq transform of the +-1 inverter leg
states. Integration is fixed-step RK4 (step = 1 / (f_sw * steps_per_period))
with switch transitions only at step boundaries; the controller is sampled
once per carrier period on period-averaged measurements.

Duties are realized as centered ON-windows with a deterministic
fractional-step carry, so the long-run duty mean is exact even though
transitions sit on the step grid (plain carrier comparison would leave a
systematic quantization bias of up to 1/steps_per_period, which the
battery branch amplifies far beyond the model's other errors).
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .evcs import EvcsStateLayout, cascaded_pi_measurements, dq_forward, dq_inverse
from .numerics import NumericalError, Trajectory

log = logging.getLogger(__name__)

try:  # pragma: no cover - exercised indirectly
    import numba

    HAVE_NUMBA = True
except Exception:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


@dataclass(frozen=True)
class PwmConfig:
    """Carrier configuration for the switched simulation."""

    f_sw: float = 1e4
    carrier: str = "triangle"
    steps_per_period: int = 200

    def __post_init__(self):
        if self.f_sw <= 0:
            raise ValueError("f_sw must be positive")
        if self.steps_per_period < 50:
            raise ValueError("steps_per_period must be at least 50")
        if self.carrier not in ("triangle", "sawtooth"):
            raise ValueError("carrier must be 'triangle' or 'sawtooth'")

    @property
    def dt(self):
        return 1.0 / (self.f_sw * self.steps_per_period)


@dataclass(frozen=True)
class SwitchState:
    """Instantaneous switch positions: DC/DC model index and inverter legs.

    s_dc = 2 means the high-side switch conducts (model j=2, selected when
    the PWM signal is high); s_dc = 1 is the freewheeling topology. Legs
    are True when tied to the positive rail.
    """

    s_dc: int
    s_abc: tuple

    def __post_init__(self):
        if self.s_dc not in (1, 2):
            raise ValueError("s_dc must be 1 or 2")
        if len(self.s_abc) != 3:
            raise ValueError("s_abc must have three legs")


def carrier_value(t, cfg):
    """Normalized carrier in [0, 1] at time t."""
    frac = (t * cfg.f_sw) % 1.0
    if cfg.carrier == "sawtooth":
        return frac
    return 2.0 * frac if frac < 0.5 else 2.0 * (1.0 - frac)


def pwm_signal(d, t, cfg):
    """Binary PWM signal: True selects model j=2 (duty-weighted topology).

    Carrier comparison; the mean over one period equals d up to the step
    quantization 1/steps_per_period. d is clamped to [0, 1].
    """
    d = min(1.0, max(0.0, float(d)))
    if d >= 1.0:
        return True
    return carrier_value(t, cfg) < d


def switch_state_theta(sw, angle):
    """Vertex parameter vector (theta1, m_d, m_q) of a SwitchState."""
    legs = np.array([1.0 if s else -1.0 for s in sw.s_abc])
    m_dq = dq_forward(legs, angle)
    return np.array([1.0 if sw.s_dc == 2 else 0.0, m_dq[0], m_dq[1]])


def switched_rhs(sys, x, sw, u, angle=0.0):
    """Instantaneous switched dynamics: the averaged RHS at vertex parameters."""
    if isinstance(sw, SwitchState):
        theta_sw = switch_state_theta(sw, angle)
    else:
        theta_sw = np.asarray(sw, dtype=float)
    return sys.rhs(x, theta_sw, u)


def _on_window(duty, spp, carry):
    """Centered ON-window length/start with fractional-step carry diffusion."""
    target = duty * spp + carry
    n_on = int(math.floor(target + 0.5))
    n_on = min(spp, max(0, n_on))
    return (spp - n_on) // 2, n_on, target - n_on


# --------------------------------------------------------------------------
# inner integration kernel (numba-compiled when available)
# --------------------------------------------------------------------------

def _make_kernel():
    two_thirds = 2.0 / 3.0
    shift = 2.0 * math.pi / 3.0

    def run_period(x, AH, Bu, ja, jb, jc, hd, dstart, dlen, lstart, llen,
                   omega, t0, dt, spp, clamp_on, clamp_idx, clamp_val, out):
        n = x.shape[0]
        k1 = np.empty(n); k2 = np.empty(n); k3 = np.empty(n)
        k4 = np.empty(n); xt = np.empty(n)
        for j in range(spp):
            th1 = 1.0 if (j >= dstart and j < dstart + dlen) else 0.0
            ang = omega * (t0 + (j + 0.5) * dt)
            ca = math.cos(ang); sa = math.sin(ang)
            cb = math.cos(ang - shift); sb = math.sin(ang - shift)
            cc = math.cos(ang + shift); sc = math.sin(ang + shift)
            la = 1.0 if (j >= lstart[0] and j < lstart[0] + llen[0]) else -1.0
            lb = 1.0 if (j >= lstart[1] and j < lstart[1] + llen[1]) else -1.0
            lc = 1.0 if (j >= lstart[2] and j < lstart[2] + llen[2]) else -1.0
            md = two_thirds * (la * ca + lb * cb + lc * cc)
            mq = two_thirds * (la * sa + lb * sb + lc * sc)

            for stage in range(4):
                if stage == 0:
                    src, dst, scl = x, k1, 0.5 * dt
                elif stage == 1:
                    src, dst, scl = xt, k2, 0.5 * dt
                elif stage == 2:
                    src, dst, scl = xt, k3, dt
                else:
                    src, dst, scl = xt, k4, 0.0
                for i in range(n):
                    acc = Bu[i]
                    for m in range(n):
                        acc += AH[i, m] * src[m]
                    dst[i] = acc
                a0, b0 = ja[0], jb[0]
                dst[a0] += th1 * jc[0] * hd[b0] * src[b0]
                dst[b0] -= th1 * jc[0] * hd[a0] * src[a0]
                a1, b1 = ja[1], jb[1]
                dst[a1] += md * jc[1] * hd[b1] * src[b1]
                dst[b1] -= md * jc[1] * hd[a1] * src[a1]
                a2, b2 = ja[2], jb[2]
                dst[a2] += mq * jc[2] * hd[b2] * src[b2]
                dst[b2] -= mq * jc[2] * hd[a2] * src[a2]
                if stage < 3:
                    for i in range(n):
                        xt[i] = x[i] + scl * dst[i]
            for i in range(n):
                x[i] += (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if clamp_on:
                x[clamp_idx] = clamp_val
            for i in range(n):
                out[j, i] = x[i]

    return run_period


_py_kernel = _make_kernel()
if HAVE_NUMBA:
    _nb_kernel = numba.njit(cache=True)(_make_kernel())
else:  # pragma: no cover
    _nb_kernel = None


# --------------------------------------------------------------------------
# sampled controllers (one command per carrier period)
# --------------------------------------------------------------------------

class SampledPhController:
    """Discrete realization of a ClosedLoop variant at the carrier rate.

    theta is algebraic for fixed_theta/ph_dae/ph_pi; for ph_p the linear
    theta dynamics are advanced exactly over one period (matrix
    exponential of -K_theta), which is stable for any gamma * dt. Commands
    are saturated with the station clamp (duty box, modulation disk) so the
    realized leg duties never re-clip.
    """

    def __init__(self, cl, dt_ctrl):
        from .evcs import station_clamp

        self.cl = cl
        self.variant = cl.variant
        self._clamp = station_clamp
        if self.variant == "ph_p":
            self._decay = expm(-cl.gains.k_theta * dt_ctrl)
            self._kt_inv = np.linalg.inv(cl.gains.k_theta)
        if self.variant == "ph_pi":
            self._kt_inv = np.linalg.inv(cl.gains.k_theta)

    def initial(self):
        if self.variant == "ph_p":
            return {"theta": self.cl.eq.theta_bar.copy()}
        if self.variant == "ph_pi":
            return {"xi": np.zeros(self.cl.system.k), "prev": np.zeros(self.cl.system.k)}
        return {}

    def command(self, state, x_meas, dt_ctrl):
        cl, eq = self.cl, self.cl.eq
        gs = cl.shifted.grad(x_meas)
        if self.variant == "fixed_theta":
            theta = eq.theta_bar
        elif self.variant == "ph_dae":
            theta = eq.theta_bar + cl._theta_map @ gs
        elif self.variant == "ph_p":
            theta_qs = eq.theta_bar + self._kt_inv @ (cl.gains.k_h @ gs)
            theta = theta_qs + self._decay @ (state["theta"] - theta_qs)
            state = {"theta": theta}
        else:  # ph_pi: trapezoidal integral, algebraic theta
            dxi = cl.gains.k_xi @ gs
            xi = state["xi"] + 0.5 * dt_ctrl * (state["prev"] + dxi)
            theta = eq.theta_bar + self._kt_inv @ (cl.gains.k_h @ gs + xi)
            state = {"xi": xi, "prev": dxi}
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.clip(theta, lo, hi), state


class SampledCascadedPi:
    """Cascaded PI baseline sampled at the carrier rate."""

    def __init__(self, sys, eq, params, refs=None, gains=None, start_at_fixed_point=True):
        from .evcs import CascadedPiState, cascaded_pi_fixed_point, cascaded_pi_refs

        self.sys, self.eq, self.params = sys, eq, params
        from .evcs import CascadedPiGains
        self.gains = CascadedPiGains() if gains is None else gains
        self.refs = cascaded_pi_refs(sys, eq) if refs is None else refs
        self._fixed = (cascaded_pi_fixed_point(sys, eq, params, self.refs, self.gains)
                       if start_at_fixed_point else CascadedPiState.zero())

    def initial(self):
        from .evcs import CascadedPiState
        return CascadedPiState(xi=self._fixed.xi.copy(),
                               deriv_prev=self._fixed.deriv_prev.copy())

    def command(self, state, x_meas, dt_ctrl):
        from .evcs import cascaded_pi_step
        meas = cascaded_pi_measurements(x_meas, self.sys.H)
        return cascaded_pi_step(state, meas, self.refs, self.params, dt_ctrl, self.gains)


# --------------------------------------------------------------------------
# the simulator
# --------------------------------------------------------------------------

def simulate_switched(sys, controller, x0, t_end, cfg=None, disturbances=(),
                      sample_stride=1, use_numba=None):
    """Fixed-step switched simulation with per-period controller sampling.

    `controller` provides initial() and command(state, mean_x, dt) ->
    (theta_cmd, state); `disturbances` is a list of (t0, t1, state_index,
    clamped_state_value) windows applied after every step. The trajectory
    stores every sample_stride-th step; per-period means, times, and the
    theta commands live in meta (keys period_t, period_mean, theta_cmd).
    Deterministic: no random state anywhere.
    """
    if sys.k != 3:
        raise ValueError("switched simulation expects the 3-parameter station model")
    cfg = PwmConfig() if cfg is None else cfg
    if use_numba is None:
        use_numba = HAVE_NUMBA
    kernel = _nb_kernel if (use_numba and HAVE_NUMBA) else _py_kernel

    n = sys.n
    dt = cfg.dt
    spp = cfg.steps_per_period
    n_periods = int(math.ceil(t_end * cfg.f_sw - 1e-12))
    n_steps = n_periods * spp

    AH = (sys.J - sys.R) * np.diag(sys.H)[None, :]
    hd = np.diag(sys.H).copy()
    Bu = sys.B @ np.asarray(controller_u(sys, controller), dtype=float)
    ja = np.empty(3, dtype=np.int64); jb = np.empty(3, dtype=np.int64)
    jc = np.empty(3, dtype=np.float64)
    for j, Dj in enumerate(sys.Ds):
        a, b = np.nonzero(Dj)
        ja[j], jb[j] = a[0], b[0]
        jc[j] = Dj[a[0], b[0]]

    x = np.asarray(x0, dtype=float).copy()
    stored = [x.copy()]
    stored_t = [0.0]
    period_t = np.empty(n_periods)
    period_mean = np.empty((n_periods, n))
    theta_trace = np.empty((n_periods, 3))
    buf = np.empty((spp, n))
    state = controller.initial()
    meas = x.copy()      # first command sees the initial state
    carry_dc = 0.0
    carry_leg = np.zeros(3)
    clamp_events = 0

    for kper in range(n_periods):
        t0 = kper * spp * dt
        theta_cmd, state = controller.command(state, meas, dt * spp)
        theta_trace[kper] = theta_cmd
        # duty realization: centered windows with carry diffusion
        dstart, dlen, carry_dc = _on_window(float(np.clip(theta_cmd[0], 0, 1)), spp, carry_dc)
        ang_c = sys_omega(sys) * (t0 + 0.5 * spp * dt)
        m_abc = dq_inverse(np.asarray(theta_cmd[1:3]), ang_c)
        d_abc = (np.clip(m_abc, -1.0, 1.0) + 1.0) / 2.0
        lstart = np.empty(3, dtype=np.int64); llen = np.empty(3, dtype=np.int64)
        for leg in range(3):
            s0, l0, carry_leg[leg] = _on_window(float(d_abc[leg]), spp, carry_leg[leg])
            lstart[leg], llen[leg] = s0, l0
        # active disturbance window (constant within one carrier period)
        clamp_on, clamp_idx, clamp_val = False, 0, 0.0
        t_mid = t0 + 0.5 * spp * dt
        for (w0, w1, idx, val) in disturbances:
            if w0 <= t_mid < w1:
                clamp_on, clamp_idx, clamp_val = True, int(idx), float(val)
                clamp_events += 1
                break
        kernel(x, AH, Bu, ja, jb, jc, hd, dstart, dlen, lstart, llen,
               sys_omega(sys), t0, dt, spp, clamp_on, clamp_idx, clamp_val, buf)
        if not np.all(np.isfinite(x)):
            raise NumericalError(
                f"switched simulation diverged near t={t0:.6g}; "
                f"last finite state: {np.array2string(stored[-1], precision=5)}")
        period_mean[kper] = buf.mean(axis=0)
        period_t[kper] = t0 + 0.5 * (spp - 1) * dt
        meas = period_mean[kper]
        for j in range(sample_stride - 1, spp, sample_stride):
            stored.append(buf[j].copy())
            stored_t.append(t0 + (j + 1) * dt)

    traj = Trajectory(t=np.asarray(stored_t), x=np.asarray(stored),
                      meta={"f_sw": cfg.f_sw, "steps_per_period": spp, "dt": dt,
                            "sample_stride": sample_stride,
                            "period_t": period_t, "period_mean": period_mean,
                            "theta_cmd": theta_trace,
                            "clamped_periods": clamp_events,
                            "kernel": "numba" if (use_numba and HAVE_NUMBA) else "python"})
    return traj


def sys_omega(sys):
    """Grid angular frequency recovered from the assembled rotation block."""
    lay = EvcsStateLayout
    # J[Q_cq, Q_cd] = C_f * omega and H[Q_cd, Q_cd] = 1 / C_f
    return sys.J[lay.Q_CQ, lay.Q_CD] * sys.H[lay.Q_CD, lay.Q_CD]


def controller_u(sys, controller):
    """Constant plant input the controller's equilibrium was built for."""
    cl = getattr(controller, "cl", None)
    if cl is not None:
        return cl.eq.u_bar
    return controller.eq.u_bar


def period_average(traj, f_sw):
    """Sliding one-period boxcar mean of a uniformly sampled trajectory.

    The output is shorter by one carrier period; a constant trajectory is
    unchanged and pure carrier-frequency ripple is nulled to quadrature
    accuracy.
    """
    t = traj.t
    dts = np.diff(t)
    if dts.size == 0:
        raise ValueError("trajectory too short")
    dt = dts[0]
    if np.max(np.abs(dts - dt)) > 1e-9 * dt:
        raise ValueError("period_average requires uniform sampling")
    spp = 1.0 / (f_sw * dt)
    n_win = int(round(spp))
    if abs(spp - n_win) > 1e-6 or n_win < 1:
        raise ValueError("sampling must give an integer number of samples per period")
    c = np.cumsum(traj.x, axis=0, dtype=float)
    c = np.vstack([np.zeros((1, traj.x.shape[1])), c])
    means = (c[n_win:] - c[:-n_win]) / n_win
    t_out = t[:means.shape[0]] + 0.5 * (n_win - 1) * dt
    return Trajectory(t=t_out, x=means, meta={"boxcar": n_win, **traj.meta})
