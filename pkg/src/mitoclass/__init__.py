"""Multi-head, imbalance-aware AMF vs NMF classification at desk scale."""

__version__ = "0.1.0"
