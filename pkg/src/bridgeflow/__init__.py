"""bridgeflow — homotopy Schrödinger-bridge data assimilation for drift-diffusion processes."""

try:
    from bridgeflow._version import __version__
except ImportError:
    __version__ = "0.0.0+unknown"
