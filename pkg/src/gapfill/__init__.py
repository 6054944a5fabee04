"""Gap-filling of irregular point retrievals into gridded Level 3 products.

Subpackages: geometry (frames, grids, binning), covariance (models and
Gaussian-field simulation), kriging (exact and local), frk (fixed rank
kriging), diagnostics (scores, coverage, smoothness), pipeline (retrieval
filtering, aggregation, daily product generation, validation).
"""

__version__ = "0.1.0"
