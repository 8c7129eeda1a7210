"""pidsbench - provenance-based intrusion detection pipelines."""

__version__ = "0.1.0"
