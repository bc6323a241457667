"""reldet: desk-scale visual relation detection.

A from-scratch float64 autodiff engine drives a predicate classifier whose
kernels are predicted one-shot from subject/object categories, evaluated with
Recall@K over synthetic spatial-relation scenes.
"""

__version__ = "0.1.0"
