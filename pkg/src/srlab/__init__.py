"""srlab: spectral Monte Carlo laboratory for slowly forced bistable SPDEs.

Simulates  dphi = (1/eps)[Lap phi + f(t, phi)] dt + (sigma/sqrt(eps)) dW  on
the one-dimensional torus with space-time white noise, tracks concentration
of sample paths around adiabatic solutions, and estimates the critical noise
intensity separating rare from near-certain transitions between equilibrium
branches.
"""

from .spectral import (SpectralField, TorusSpec, basis_eval, from_physical,
                       hs_norm, laplacian_eigenvalue, mean_transverse_split,
                       sup_norm_estimate, to_physical)
from .model import (BranchSet, DriftKind, DriftModel, Stability, allen_cahn,
                    critical_amplitude, custom_drift, drift_apply,
                    equilibrium_branches, linear_drift, linearization,
                    normal_form, perp_remainders)
from .adiabatic import (AdiabaticFrame, alpha_integral, build_frame,
                        deterministic_pde_track, track_stable, track_unstable,
                        zeta_solve)
from .integrator import (ExitSpec, NonFinite, SimConfig, TrajectoryRecord,
                         noise_increment_std, simulate, simulate_linear_mode,
                         step)
from .mc import (BatchResult, ExitEvent, ExitStatistics, FitResult,
                 concentration_fit, event_probability, mode_variance_report,
                 run_batch, scaling_exponent, threshold_bisect,
                 transition_probability, wilson_interval)

__version__ = "0.1.0"
