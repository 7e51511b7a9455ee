"""
SplatFuse launcher
Run the command-line interface without installing the package
"""

import os
import sys

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.cli import main


if __name__ == "__main__":
    sys.exit(main())
