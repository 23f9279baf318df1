"""Diversity-aware outfit recommendation engine.

Core flow: catalog -> pairwise compatibility embeddings (compat) -> exact
kNN retrieval (retrieval) -> rank-blended selection (stylerank) -> outfit
assembly (engine). evaluator holds the synthetic world and the lambda
ablation harness; service and cli wrap the engine for the review loop.
"""

__version__ = "0.1.0"
