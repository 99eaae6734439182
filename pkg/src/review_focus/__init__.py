"""Focus-level evaluation of paper reviews.

Extracts strengths/weaknesses from reviews, annotates each point with a
(target, aspect) facet pair, computes normalized focus distributions, and
compares reviewer groups with distributional, set-agreement, and
text-similarity metrics.
"""

__version__ = "0.1.0"
