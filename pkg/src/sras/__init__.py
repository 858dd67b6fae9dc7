"""Decentralized multi-party remote attestation: library and simulator."""

from .crypto import SUITE_ID
from .errors import SrasError

__version__ = "0.1.0"
__all__ = ["SUITE_ID", "SrasError", "__version__"]
