"""Goal-driven NMR pulse design: coupled spin-1/2 simulation, spectra and
exact-gradient optimization of shaped RF pulses against spectral objectives."""

from .spinsys import (SpinSystem, SpinSystemError, load_spin_system, single_spin_operator,
                      product_operator, basis_labels, free_hamiltonian, rf_hamiltonian,
                      equilibrium_state, operator_from_expression, parse_operator_terms)
from .prop import (PulseSegment, HardPulse, Delay, PulseProgram, segment_propagator,
                   delay_propagator, hard_pulse, run_program)
from .detect import (Acquisition, Detector, Fid, Spectrum, SpectralRegion, acquire_fid,
                     spectrum_from_fid, simulate_spectrum, peak_height, region_power)
from .objective import (Task, RobustnessSpec, ObjectiveSpec, Objective, evaluate, state_fidelity,
                        rf_power_penalty, expand_ensemble)
from .grad import propagator_directional_derivative, loss_gradient, finite_difference_check
from .optimize import OptConfig, OptResult, initialize_controls, run_optimization
from .analyze import decompose, enhancement_factor, press_baseline

__version__ = "0.1.0"
