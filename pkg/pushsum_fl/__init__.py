__all__ = ["app", "experiment", "protocol", "verify"]
__version__ = "1.0.0"
