"""Self-evolving encrypted traffic classification.

Silver-sample harvesting, windowed multi-threshold drift scoring and fully
fine-tuned lineage tracking for a small recurrent flow classifier.
"""

__version__ = "0.1.0"
