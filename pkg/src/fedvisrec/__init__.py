"""Desk-scale simulator for visually-aware federated recommenders.

Covers the full loop: deterministic synthetic worlds, federated training of
(visual) NCF and light graph-convolution recommenders, gradient- and
image-poisoning attacks on cold target items, and a guided-diffusion
purification/detection defense.  A FastAPI service wraps the core; the CLI
is a thin client of that service.
"""

__version__ = "0.1.0"
