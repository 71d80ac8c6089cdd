"""sslsentry: an HTTPS-intercepting proxy that pen-tests local clients for
broken SSL certificate validation and shields the vulnerable ones from real
man-in-the-middle attacks by cross-checking upstream certificate chains
against a pinned trusted oracle."""

__version__ = "0.1.0"
