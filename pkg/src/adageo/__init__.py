"""Few-shot cross-domain visual place recognition.

Submodules are imported on demand so that ``adageo.cli`` can set BLAS thread
limits before numpy loads.
"""

__version__ = "0.1.0"
