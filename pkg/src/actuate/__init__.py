"""Linear observers and minimal-norm steering for a toy transformer policy."""

from .store import __version__

__all__ = ["__version__"]
