"""Risk-aware safety filters for stochastic control-affine systems.

Submodules: ``sde`` (simulation), ``barrier`` (barrier calculus), ``risk``
(closed-form risk bounds), ``qp`` and ``filters`` (CBF-QP safety filters),
``models``, ``scenarios``, ``harness`` (Monte Carlo) and ``cli``.
"""

__version__ = "0.1.0"
