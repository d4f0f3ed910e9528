"""Analysis instruments for trained or freshly initialised spiking ResNets."""

from .energy import (E_AC, E_MAC, EnergyReport, FiringStats, energy_from_counts, energy_from_rate,
                     firing_stats, model_firing_stats, syops_count)
from .isometry import BlockIsometry, IsometryReport, PhiEstimate, isometry_report, phi_moments
from .landscape import LandscapeGrid, loss_landscape, scan
from .ssim import ssim, ssim_radar
from .unavailing import (NotApplicableError, block_unavailing_rate, state_change_monte_carlo,
                         state_change_probability, unavailing_block_rate)
