"""Ki-67 scoring with silver-standard domain calibration.

Keep __init__ free of side effects so that importing a single module (for
example in worker processes) does not pull in the CLI.
"""

__version__ = "0.4.0"
__all__ = ["__version__"]
