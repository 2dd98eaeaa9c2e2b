"""Semantic-communication jamming lab: attacks, detector-weighted ensembling, LiRPA bounds."""

__version__ = "0.1.0"
