"""Closed-loop knowledge-graph learning engine.

Knowledge-aware user classification alternating with graph refinement and
expert-gated expansion over time-sliced corpora. See README.md for the loop
protocol and the CLI / HTTP surfaces.
"""

__version__ = "0.1.0"
