"""Categorical diffusion for protein inverse folding, with RL fine-tuning.

Two-phase training: a graph denoiser is pretrained on observed
structure/sequence pairs with a discrete-diffusion objective, then tuned
with a clipped policy gradient to maximize the structural consistency of
its designs. Evaluation covers sequence recovery, diversity, and foldable
diversity against a pluggable folding oracle.
"""

__version__ = "0.1.0"

from .core import Alphabet, Sequence, Backbone, encode_sequence, decode_sequence

__all__ = [
    "Alphabet",
    "Sequence",
    "Backbone",
    "encode_sequence",
    "decode_sequence",
    "__version__",
]
