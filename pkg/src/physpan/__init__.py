"""Outcome prediction for simple physical interactions.

The package couples a deterministic 2D rigid-body episode generator with a
small learned stack: a convolutional-LSTM frame predictor, per-frame and
context feature encoders, and a differentiable span-selection head that both
classifies outcomes and exposes which generated frames drove the decision.
Everything runs on a self-contained float64 reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
