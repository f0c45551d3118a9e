#!/usr/bin/env python3
"""
DDLOD Runner Script

Runs the ddlod CLI from a source checkout without installing the package,
e.g. `python scripts/run.py solve --preset oscillatory --nH 10`.
"""

import sys
from pathlib import Path

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from ddlod.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
