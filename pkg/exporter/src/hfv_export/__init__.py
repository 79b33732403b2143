"""Offline feature exporter.

Runs a ViT-L/14-geometry encoder over tracklet frame directories and writes
one HFV1 feature volume per tracklet plus a JSONL manifest, the exact
formats the retrieval package consumes. This package is standalone: it
shares file formats with the consumer, not code.
"""

__version__ = "0.1.0"
