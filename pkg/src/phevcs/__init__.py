"""Averaged port-Hamiltonian modeling and control of an EV charging station."""

from .averaged import (AveragedPhSystem, Equilibrium, ShiftedHamiltonian,
                       duty_from_modulation, modulation_from_duty,
                       steady_state_from_setpoints, steady_state_from_theta)
from .control import (BassDesign, ClosedLoop, GainSet, bass_design,
                      build_fixed_theta, build_ph_dae, build_ph_p, build_ph_pi,
                      closed_loop_jacobian, extended_dissipation_check,
                      rank_condition, simulate)
from .evcs import (EvcsParams, EvcsSetpoints, EvcsStateLayout, PAPER_THETA,
                   build_ac_side, build_dc_side, build_full, default_params,
                   dq_forward, dq_inverse, nominal_input, ph_controllers_evcs,
                   solve_equilibrium)
from .numerics import (Spectrum, Trajectory, eigenvalues, finite_diff_jacobian,
                       integrate_ode, is_hurwitz, is_psd, newton_solve,
                       solve_lyapunov)
from .ph_core import PhSystem, PortLabeling, interconnect, validate
from .switched import (PwmConfig, SampledCascadedPi, SampledPhController,
                       SwitchState, period_average, pwm_signal, simulate_switched,
                       switched_rhs)

__version__ = "0.1.0"
