"""Self-adaptive forecasting: backcasting-based test-time adaptation for
multi-horizon time-series forecasters."""

__version__ = "0.1.0"


def resource_path(name: str) -> str:
    """Absolute path of a bundled example file (toy panel CSVs and config)."""
    from importlib.resources import files

    return str(files(__name__) / "resources" / name)
