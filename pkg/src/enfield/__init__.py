"""enfield: equivariant neural fields for steady-state PDE surrogates.

Geometry goes in as a signed-distance field, gets compressed into a latent
point cloud by a meta-learned equivariant field, and comes back out as a
continuous physical field conditioned on global parameters.
"""

__version__ = "0.1.0"
