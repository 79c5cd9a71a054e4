"""embrec: CF embeddings injected into a small LLM for recommendation.

WALS matrix factorization supplies user/item embeddings; two small MLP
projectors map them into the token space of a from-scratch decoder-only
transformer (manual gradients, optional LoRA adapters); training runs in two
stages and evaluation ranks the full catalog with HR@k / NDCG@k.
"""

__version__ = "0.1.0"
