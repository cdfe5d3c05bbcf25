"""Hybrid RLWE inference over prime-power cyclotomic rings.

The server evaluates quantized linear layers under encryption and shuffles
their outputs; the client decrypts, runs activations in plaintext, and
re-encrypts for the next round.  See README.md for the tour.
"""

from .params import GadgetParams, RingParams, SchemeParams, preset_for_bits

__all__ = ["GadgetParams", "RingParams", "SchemeParams", "preset_for_bits"]
__version__ = "0.1.0"
