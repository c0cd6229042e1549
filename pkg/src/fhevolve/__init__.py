"""Evolutionary search over mathematically equivalent FHE kernel variants.

Toy-parameter TFHE and RNS-CKKS built on exact negacyclic ring arithmetic,
a searchable space of kernel implementations, a gated evaluator and an
island-model MAP-Elites controller.
"""

from .variants import REFERENCE_GENOME, Genome, KernelDescriptor, enumerate_space, run_variant

__version__ = "0.1.0"

__all__ = ["Genome", "KernelDescriptor", "REFERENCE_GENOME", "enumerate_space", "run_variant", "__version__"]
