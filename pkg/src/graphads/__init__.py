"""graphads: cross-lingual ad retrieval with graph-contextual embeddings.

Dual text encoders map queries and ads into one embedding space, a graph
attention layer refines the embeddings over a query-ad-user interaction
graph, and a contrastive objective aligns matching pairs across languages.
Ships with a deterministic synthetic multilingual ad world, a click
simulator and an ablation harness.
"""

__version__ = "0.1.0"
