"""Rate-constant maps of biosensor interactions by adaptive variational Bayes."""

from .analysis import (InteractionReport, RateConstantMap, data_overlap, intensity_map,
                       l2_relative_error, moment_map, peak_to_background, relative_wasserstein, tcm)
from .avba import AvbaConfig, AvbaResult, mark, refinement_indicator, run_avba, triangle_variation
from .errors import (DimensionError, DivergenceError, DomainError, NumericalError, TruncationError,
                     ValidationError)
from .kinetics import (Domain, InjectionGrid, KineticsParams, RatePoint, SensorgramSet,
                       forward_response, generate_synthetic, kernel, kernel_value)
from .mcmc import McmcChain, McmcConfig, factor_correlations, gibbs_step, run_mcmc
from .mesh import TriMesh, refine, uniform_initial_mesh
from .operators import DesignSystem, assemble_design, assemble_mass, assemble_regularizer
from .vb import HyperPriors, TruncatedNormalPosterior, VBSettings, VBState, run_vb

__version__ = "0.1.0"
