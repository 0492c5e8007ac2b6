"""Toric-code decoding workbench: code construction, noise, classical
decoders and a soft mixture-of-experts transformer decoder."""

from toricmoe.lattice import ToricCode, build_toric_code, gf2_rank, symplectic_product

__all__ = ["ToricCode", "build_toric_code", "gf2_rank", "symplectic_product"]
__version__ = "0.1.0"
