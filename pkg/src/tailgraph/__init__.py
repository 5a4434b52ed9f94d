"""Long-tailed graph classification with subgraph retrieval augmentation,
category-centered contrastive learning, and decoupled classifier re-balancing."""

__version__ = "0.1.0"
