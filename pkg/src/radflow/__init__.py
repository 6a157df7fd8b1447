"""radflow: probabilistic radiance fields with conditional flows.

Training renders a distribution over radiance fields rather than a single
field; inference reports per-pixel color/depth means and variances, and
the metrics module scores how well those variances rank the actual errors.
"""

__version__ = "0.1.0"
