"""Numerical lab for Kirchhoff-type problems with a steep potential well.

Modules: :mod:`kwl.domain` (grids, the well family), :mod:`kwl.operators`
(discrete energy), :mod:`kwl.spectrum` (Dirichlet and well spectra),
:mod:`kwl.solver` (critical points), :mod:`kwl.analysis` (a priori constants,
concentration sweeps) and :mod:`kwl.cli` (the ``kwl`` command).
"""

__version__ = "0.1.0"

from .domain import Grid, PotentialWell, ProblemParams, validate_well  # noqa: E402
from .operators import assemble, energy, gradient  # noqa: E402

__all__ = ["Grid", "PotentialWell", "ProblemParams", "validate_well", "assemble", "energy",
           "gradient", "__version__"]
