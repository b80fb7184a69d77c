"""Many-to-many speaker and emotion style conversion on mel-like features.

Trains a StarGAN-style generator with separate speaker and emotion style
encoders, mapping networks, a multi-head real/fake discriminator and dual
source classifiers. Target domains are paired virtually during training so
that the model can convert to speaker-emotion combinations that never occur
in the real data; fakes from such pairs are masked out of discriminator
training.
"""

from emovc.domains import (
    DomainCatalog,
    DomainPair,
    PairMask,
    build_catalog,
    fake_pair_mask,
    is_seen,
    sample_virtual_target,
)

__all__ = [
    "DomainCatalog",
    "DomainPair",
    "PairMask",
    "build_catalog",
    "fake_pair_mask",
    "is_seen",
    "sample_virtual_target",
]

__version__ = "0.1.0"
