from .core import MotifCDR
from .cli import main

try:
    from ._version import __version__
except ImportError:
    __version__ = "unknown"

__all__ = ["MotifCDR", "main", "__version__"]
