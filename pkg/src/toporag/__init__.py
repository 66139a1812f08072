"""toporag: topology-grounded retrieval, constrained decoding, and a
generate-verify-repair loop for network configuration synthesis."""

__version__ = "0.1.0"
