"""
XferLab launcher
Run from the repository root:  python xferlab.py train --config configs/default.cfg
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from app.main import main

if __name__ == "__main__":
    sys.exit(main())
