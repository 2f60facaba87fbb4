"""Certified tube tracking with learned uncertainty models.

Subpackages cover the plant abstraction (``dynamics``), GP uncertainty
learning (``gp``), high-probability uniform error bounds (``bounds``),
contraction metrics and geodesic feedback (``metric``, ``geodesic``),
the adaptive compensation loop (``adaptation``), tube certificates
(``certificates``), planners (``planning``), and the episode harness with
its CLI (``harness``, ``cli``).
"""

__version__ = "0.1.0"
