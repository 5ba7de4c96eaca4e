"""Multi-label few-shot image classification over a joint visual/text space.

Local features are scored against label word embeddings in a shared space;
support images contribute per-cell features filtered by loss-change
importance, and prototypes combine cross-attention with label-conditioned
dynamic convolution.
"""

__version__ = "0.1.0"
