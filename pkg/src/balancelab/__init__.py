"""Desk-scale testbed for learned ankle-balance control.

A planar musculoskeletal ankle simulator, a recurrent sensor-dynamics
model with a parametric-bias input, exploration policies for safe data
collection, online bias adaptation, and a gradient-based model-predictive
balance controller, wired together by a small experiment CLI.
"""

__version__ = "0.1.0"
