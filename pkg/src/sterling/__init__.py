"""Non-contrastive self-supervised embeddings for bipartite graphs."""

__version__ = "0.1.0"
