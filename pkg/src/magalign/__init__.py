"""Graph-side refinement of frozen paired multimodal embeddings for cross-modal retrieval."""

__version__ = "0.1.0"
