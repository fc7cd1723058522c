"""Wide-and-deep interaction ranker for contest recommendation.

Desk-scale end-to-end system: a seeded synthetic transaction world, a daily
feature pipeline with a file-based offline store, a hand-differentiated
wide-and-deep pairwise ranker, offline evaluation, a simulated A/B harness,
daily batch inference, and a low-latency in-memory ranking service.
"""

__version__ = "0.1.0"
