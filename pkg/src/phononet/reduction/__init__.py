"""Model-order reduction toolbox."""

from .bands import K_POINTS, band_misfit
from .fine import FineModel, chain_lattice, dimer, grid_membrane
from .localize import LocalizedBasis, band_modes, localize, pencil_frequencies, reduce
from .substructure import (
    ReducedComponent,
    assemble,
    assemble_reduced,
    component_reduce,
    partition_grid,
    substructure_benchmark,
)

__all__ = [
    "K_POINTS",
    "FineModel",
    "LocalizedBasis",
    "ReducedComponent",
    "assemble",
    "assemble_reduced",
    "band_misfit",
    "band_modes",
    "chain_lattice",
    "component_reduce",
    "dimer",
    "grid_membrane",
    "localize",
    "partition_grid",
    "pencil_frequencies",
    "reduce",
    "substructure_benchmark",
]
