"""Route-locked dual-expert decoder, exact-gradient verification lab, leakage harness."""

__version__ = "0.1.0"
