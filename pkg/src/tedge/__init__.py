"""Trace-driven edge-caching benchmark with a from-scratch ViT popularity predictor.

Modules: ``trace`` (request logs, request matrix), ``topology`` (node layout,
M-Zipf workloads), ``pipeline`` (windowing, labels, GAF images), ``vit`` (the
model, training and checkpoints), ``cachesim`` (policy simulation) and
``cli`` (the ``tedge`` stage runner).
"""
__version__ = "0.1.0"
