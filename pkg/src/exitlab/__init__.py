"""Monte Carlo laboratory for exit measures of critically branching diffusions.

Subpackage map:

- ``partitions``     exact subset/partition combinatorics and formal identities
- ``geometry``       model domains with analytic Green/Poisson/Martin kernels
- ``pde_solutions``  nonlinear fields, killed potentials, subset-indexed families
- ``diffusion``      path samplers (plain, harmonic-transform, potential-transform)
- ``superprocess``   branching-particle exit measures and excursion estimators
- ``backbone``       conditioned branching backbone with Poisson mass immigration
- ``martingales``    partition-sum martingale evaluation and mean checks
- ``conditioning``   small-cap hitting rates, scaling brackets, forest sampler
- ``cli``            experiment runner with CSV/JSON/figure reports
"""

__version__ = "0.1.0"
