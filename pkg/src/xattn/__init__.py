"""Cross-domain product retrieval with attention-pooled embeddings.

Shop-side embeddings are pooled with tag-conditioned attention, query-side
embeddings with context-conditioned attention, trained by a four-input
triplet loss and served through a retrieve-then-rerank pipeline.
"""

__version__ = "0.1.0"
