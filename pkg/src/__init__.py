from src.mitoclass import __version__

__all__ = ["__version__"]
