"""Fixed-effects binary choice panels with generalized-logistic shocks.

Simulation, identification diagnostics, and two-step GMM estimation built on
the determinant-based conditional moment restriction that holds when the
shock odds are a positive combination of exponentials.
"""

from genlogit.glogit import GenLogistic, logistic

__version__ = "0.1.0"

__all__ = ["GenLogistic", "logistic", "__version__"]
