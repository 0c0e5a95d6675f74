"""Ensemble node classification on heterogeneous graphs.

Relation-group message passing over multiple batch-size subgraph views,
fused by a two-stage residual min-max attention, trained with a
diversity-regularized cross-entropy objective and hand-derived gradients.
"""

__version__ = "0.1.0"
