"""Package entry point: `python -m ki67_calib`."""
import sys

from .main import main

if __name__ == "__main__":
    sys.exit(main())
