"""Learned drift-car dynamics and gradient-based trajectory optimization through them."""

__version__ = "0.1.0"


def bundled(*parts: str):
    """Path to a file shipped in the package's ``data`` directory."""
    from importlib.resources import files

    return files("learndrift").joinpath("data", *parts)
