"""Learned bit-interleaved encodings for sparse tensor MTTKRP."""
__version__ = "0.1.0"
