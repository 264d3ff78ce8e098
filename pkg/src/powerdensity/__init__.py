"""Reconstruction of conductivities from power-density internal functionals."""

from .field_grid import FrameField, Grid, MatrixField, ScalarField, VectorField, diff, norms
from .forward import DataBundle, check_positivity, perturb, solve_conductivity, synthesize
from .frames import F_from_R, F_from_S, cF, cofactor_frame, derived_fields
from .experiment import ExperimentConfig, convergence_study, run_experiment, stability_sweep
from .phantoms import IlluminationSet, Phantom, make_phantom

__version__ = "0.1.0"
