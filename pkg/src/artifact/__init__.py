"""Point vortices, viscous vortex dynamics and their kinetic (Boltzmann) derivation.

Modules: vortex_ode, biot_savart, ns_spectral, self_similar, collision,
hilbert, and harness/cli for experiment orchestration.
"""
__version__ = "0.1.0"
