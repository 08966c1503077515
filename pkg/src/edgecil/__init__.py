"""Memory-bounded class-incremental learning for sensor-feature embeddings.

A small numpy implementation of an embedding network trained with a margin
contrastive loss, a herding-selected exemplar memory, nearest-class-mean
classification, and an edge update that blends contrastive learning on new
samples with feature distillation on stored exemplars.
"""

__version__ = "0.1.0"
