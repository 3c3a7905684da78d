"""Desk-scale numerics for semiclassical cutoff resolvents in one dimension.

Modules: ``operators`` (grids, cutoffs, banded P, P_W, commutators),
``resolvent`` (banded LU, power-iteration norms, a(h) sweeps and fits),
``gluing`` (the two parametrix gluings and their error calculus),
``continuation`` (Neumann series, continued norms, disk certificate),
``microlocal`` (FBI transform, masks, rays, flows, trapping probe),
``harness`` and ``cli`` (configured runs and CSV output).
"""
from .operators import (
    DEFAULT_LAYOUT,
    DiscreteOperator,
    Grid,
    LayoutError,
    SupportLayout,
    assemble_p,
    attach_absorber,
    commutator_with_cutoff,
    make_grid,
    make_potential,
    make_profile,
)
from .resolvent import (
    Factorization,
    NearSingularError,
    NormCurve,
    cutoff_norm,
    measure_a,
    outgoing_cutoff_norm,
    power_norm,
    scaling_fit,
)
from .gluing import build_gluing, error_product_norm, fit_decay
from .continuation import cap_lower_halfplane_norm, disk_certificate, neumann_resolvent
from .microlocal import fbi_transform, hamiltonian_flow, trapping_probe, wavefront_mask
from .harness import ExperimentConfig, fit_report, run_experiment

__version__ = "0.1.0"
