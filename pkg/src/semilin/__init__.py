"""Deep solvers for semilinear parabolic PDEs: deep BSDE and fixed-point schemes."""

__version__ = "0.1.0"

from .pdes import PROBLEM_IDS, make_problem  # noqa: E402,F401
